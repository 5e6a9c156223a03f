import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from carparse.errors import ConfigError, EmptyGroundTruth, ShapeMismatch
from carparse.metrics import (A3dpConfig, Box2D, Car3D, EvalRecord, a3dp, aos_os, box_iou,
                              orientation_score, part_iou, shape_similarity)
from carparse.pose import CarPose
from carparse.taxonomy import reduced_taxonomy


def _car(rng, camera, dim):
    pose = CarPose((rng.uniform(-np.pi, np.pi), rng.uniform(-0.1, 0.1), 0.0),
                   (rng.uniform(200, 1700), rng.uniform(300, 900)), rng.uniform(5, 60))
    return Car3D(pose, rng.normal(size=dim))


def _perturbed(rng, car, scale):
    p = car.pose
    th = np.array(p.theta) + rng.normal(scale=0.2 * scale, size=3)
    c = np.array(p.center_px) + rng.normal(scale=40 * scale, size=2)
    d = max(p.distance * (1 + rng.normal(scale=0.2 * scale)), 1.0)
    return Car3D(CarPose(tuple(th), tuple(c), d), car.shape + rng.normal(scale=scale, size=car.shape.size),
                 score=float(rng.uniform()))


def test_default_schedule_contains_named_criteria():
    cfg = A3dpConfig()
    t, r, s = cfg.tuples("abs")[cfg.loose_index]
    assert t == pytest.approx(2.8) and r == pytest.approx(math.pi / 6)
    t, r, s = cfg.tuples("abs")[cfg.strict_index]
    assert t == pytest.approx(1.4) and r == pytest.approx(math.pi / 12)
    assert len(cfg.tuples()) == 10


def test_config_validation():
    with pytest.raises(ConfigError):
        A3dpConfig(translation=(1.0,), relative=(0.1,), rotation=(0.1,), shape=(0.5,), loose_index=0, strict_index=0)
    with pytest.raises(ConfigError):
        A3dpConfig(loose_index=3, strict_index=3)
    with pytest.raises(ConfigError):
        A3dpConfig(translation=tuple(np.linspace(0.1, 2.8, 10)))
    with pytest.raises(ConfigError):
        A3dpConfig.from_dict({"bogus": 1})
    cfg = A3dpConfig()
    assert A3dpConfig.from_dict(cfg.to_dict()) == cfg


def test_perfect_predictions(space, camera):
    rng = np.random.default_rng(0)
    gts = [_car(rng, camera, space.dim) for _ in range(6)]
    rec = EvalRecord(camera, list(gts), list(gts))
    for mode in ("abs", "rel"):
        r = a3dp([rec], space, mode=mode)
        assert r.mean == 1.0 and r.c_l == 1.0 and r.c_s == 1.0


def test_three_meter_error_fails_loose(space, camera):
    gt = Car3D(CarPose((0.2, 0.0, 0.0), (960.0, 700.0), 20.0), np.zeros(space.dim))
    pred = Car3D(CarPose((0.2, 0.0, 0.0), (960.0, 700.0), 23.0), np.zeros(space.dim))
    r = a3dp([EvalRecord(camera, [pred], [gt])], space)
    assert r.c_l == 0.0 and r.c_s == 0.0 and r.mean == 0.0


def test_empty_ground_truth(space, camera):
    with pytest.raises(EmptyGroundTruth):
        a3dp([EvalRecord(camera, [], [])], space)


def test_extra_predictions_lower_precision(space, camera):
    rng = np.random.default_rng(1)
    gt = _car(rng, camera, space.dim)
    extra = Car3D(gt.pose, gt.shape, score=0.1)
    r = a3dp([EvalRecord(camera, [Car3D(gt.pose, gt.shape, 0.9), extra], [gt])], space)
    assert r.mean == 0.5 and r.recall[0] == 1.0


def test_shape_similarity_identity_and_range(space):
    s = np.random.default_rng(2).normal(size=space.dim)
    assert shape_similarity(space, s, s) == 1.0
    assert shape_similarity(space, s + 1, s) < 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 1.0), st.floats(1.0, 3.0))
def test_a3dp_monotone_under_loosening(space, camera, seed, noise, factor):
    rng = np.random.default_rng(seed)
    recs = []
    for _ in range(2):
        gts = [_car(rng, camera, space.dim) for _ in range(3)]
        preds = [_perturbed(rng, g, noise) for g in gts[: rng.integers(1, 4)]]
        recs.append(EvalRecord(camera, preds, gts))
    tight = A3dpConfig()
    loose = A3dpConfig(translation=tuple(factor * t for t in tight.translation),
                       relative=tuple(factor * t for t in tight.relative),
                       rotation=tuple(factor * t for t in tight.rotation),
                       shape=tuple(s / factor for s in tight.shape))
    for mode in ("abs", "rel"):
        a = a3dp(recs, space, tight, mode)
        b = a3dp(recs, space, loose, mode)
        assert all(y >= x for x, y in zip(a.per_tuple, b.per_tuple))
        assert b.mean >= a.mean
        # tuples inside one schedule tighten monotonically too
        assert all(a.per_tuple[k] >= a.per_tuple[k + 1] for k in range(len(a.per_tuple) - 1))


def test_os_identity_reference_numbers():
    os_pct = 100 * orientation_score(79.58 / 100, 77.89 / 100)
    assert abs(os_pct - 97.88) <= 0.005
    assert orientation_score(0.0, 0.0) == 0.0


def test_aos_perfect():
    gts = [[Box2D((0, 0, 10, 10), 0.3), Box2D((20, 20, 40, 35), -2.0)], [Box2D((5, 5, 25, 25), 1.0)]]
    preds = [[Box2D(g.box, g.azimuth, 0.9) for g in img] for img in gts]
    ap, aos, os_ = aos_os(preds, gts)
    assert ap == 1.0 and aos == 1.0 and os_ == 1.0


def test_aos_flipped_orientation():
    ap, aos, os_ = aos_os([[Box2D((0, 0, 10, 10), math.pi)]], [[Box2D((0, 0, 10, 10), 0.0)]])
    assert ap == 1.0 and aos == 0.0 and os_ == 0.0


def test_aos_iou_threshold():
    gt = [[Box2D((0, 0, 10, 10), 0.0)]]
    pred = [[Box2D((0, 0, 10, 6.5), 0.0)]]            # IoU 0.65 < 0.7
    assert aos_os(pred, gt)[0] == 0.0
    assert aos_os(pred, gt, iou_threshold=0.6)[0] == 1.0
    assert box_iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0
    with pytest.raises(EmptyGroundTruth):
        aos_os([[]], [[]])
    with pytest.raises(ShapeMismatch):
        aos_os([[]], [[], []])


@settings(max_examples=60)
@given(st.integers(0, 2**32 - 1))
def test_aos_bounded_by_ap(seed):
    rng = np.random.default_rng(seed)
    preds, gts = [], []
    for _ in range(3):
        G = []
        for _ in range(rng.integers(1, 4)):
            x, y = rng.uniform(0, 100, 2)
            G.append(Box2D((x, y, x + rng.uniform(5, 30), y + rng.uniform(5, 30)), rng.uniform(-np.pi, np.pi)))
        P = [Box2D(tuple(np.add(g.box, rng.normal(scale=2, size=4))), g.azimuth + rng.normal(scale=1.0),
                   float(rng.uniform())) for g in G if rng.uniform() < 0.8]
        gts.append(G)
        preds.append(P)
    ap, aos, os_ = aos_os(preds, gts)
    assert aos <= ap + 1e-12
    assert 0.0 <= os_ <= 1.0
    if ap > 0:
        assert os_ == aos / ap


def test_part_iou_identity_and_complement():
    rng = np.random.default_rng(0)
    gt = rng.integers(0, 14, size=(40, 50))
    iou, miou = part_iou(gt, gt, reduced_taxonomy())
    present = np.isin(np.arange(1, 14), gt)
    assert np.all(iou[present] == 1.0) and miou == 1.0
    pred = np.where(gt == 3, 0, 3)
    iou, _ = part_iou(pred, gt, 13)
    assert iou[2] == 0.0


def test_part_iou_disjoint_and_missing_classes():
    a = np.zeros((4, 4), int)
    b = np.zeros((4, 4), int)
    a[:2] = 1
    b[2:] = 2
    iou, miou = part_iou(a, b, 3)
    assert iou[0] == 0.0 and iou[1] == 0.0 and np.isnan(iou[2])
    assert miou == 0.0
    with pytest.raises(ShapeMismatch):
        part_iou(a, b[:3], 3)


def test_part_iou_ignore_label():
    gt = np.array([[1, 1, 255, 255]])
    pred = np.array([[1, 1, 2, 2]])
    iou, miou = part_iou(pred, gt, 2, ignore_label=255)
    assert iou[0] == 1.0 and np.isnan(iou[1]) and miou == 1.0


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_part_iou_symmetric_and_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    n = 6
    a = rng.integers(0, n + 1, size=(12, 12))
    b = rng.integers(0, n + 1, size=(12, 12))
    ia, ma = part_iou(a, b, n)
    ib, mb = part_iou(b, a, n)
    assert np.array_equal(np.isnan(ia), np.isnan(ib))
    assert np.allclose(ia[~np.isnan(ia)], ib[~np.isnan(ib)]) and math.isclose(ma, mb)
    perm = np.r_[0, 1 + rng.permutation(n)]          # background stays fixed
    ip, mp = part_iou(perm[a], perm[b], n)
    assert np.allclose(ip[perm[1:] - 1], ia, equal_nan=True)
    assert math.isclose(mp, ma)
