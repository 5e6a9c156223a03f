"""Training objectives evaluated on predictor outputs, with analytic gradients.

* ``loss_class_consistency``: part cross-entropy on the synthetic domain plus
  car/not-car cross-entropy on both domains.
* ``loss_direct``: L1 on center and shape, bin confidence cross-entropy and
  L1 bin-offset regression for angles and distance.
* ``loss_3d``: per-vertex distances in the model and camera frames plus the
  car-center distance.

Finite differences appear only in the checking helpers at the bottom.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ShapeMismatch
from .pose import (BinCodec, BinEncoding, Camera, angle_codec, distance_codec, euler_jacobian,
                   euler_to_matrix, ray_rotation, wrap_angle)
from .shape_space import ShapeSpace


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0   # source-domain car term
    lambda2: float = 1.0   # target-domain car term
    w_direct: float = 1.0
    w_3d: float = 1.0

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.w_direct, self.w_3d) < 0:
            raise ValueError("loss weights must be non-negative")


def _softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


@dataclass(frozen=True, eq=False)
class SegPrediction:
    """Per-pixel class distributions, shape (H, W, classes).

    ``part_probs`` covers the part classes plus background (index 0);
    ``car_probs`` is (not-car, car). Build from logits with ``from_logits``
    to get gradients with respect to those logits.
    """

    part_probs: np.ndarray
    car_probs: np.ndarray

    def __post_init__(self):
        for name in ("part_probs", "car_probs"):
            p = np.asarray(getattr(self, name), dtype=np.float64)
            if p.ndim != 3:
                raise ShapeMismatch(f"{name} must be (H, W, classes)")
            if p.min() < 0 or p.max() > 1 or np.abs(p.sum(axis=-1) - 1.0).max() > 1e-6:
                raise ValueError(f"{name} must hold per-pixel distributions")
            object.__setattr__(self, name, p)
        if self.part_probs.shape[:2] != self.car_probs.shape[:2]:
            raise ShapeMismatch("part and car maps differ in size")

    @classmethod
    def from_logits(cls, part_logits, car_logits) -> "SegPrediction":
        return cls(_softmax(np.asarray(part_logits, float)), _softmax(np.asarray(car_logits, float)))


def _pixel_ce(probs: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits behind ``probs``."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != probs.shape[:2]:
        raise ShapeMismatch(f"labels {labels.shape} vs predictions {probs.shape[:2]}")
    n = labels.size
    flat = labels.reshape(-1)
    rows = np.arange(n)
    with np.errstate(divide="ignore"):
        loss = float(-np.log(probs.reshape(n, -1)[rows, flat]).sum() / n)
    grad = probs.copy().reshape(n, -1)
    grad[rows, flat] -= 1.0
    return loss, grad.reshape(probs.shape) / n


def loss_class_consistency(src_pred: SegPrediction, src_part_gt, src_car_gt,
                           tgt_pred: SegPrediction, tgt_car_gt,
                           w: Optional[LossWeights] = None) -> Tuple[float, Dict[str, np.ndarray]]:
    """``L_sp + lambda1 * L_sc + lambda2 * L_tc`` and gradients w.r.t. the three logit maps."""
    w = w or LossWeights()
    l_sp, g_sp = _pixel_ce(src_pred.part_probs, src_part_gt)
    l_sc, g_sc = _pixel_ce(src_pred.car_probs, src_car_gt)
    l_tc, g_tc = _pixel_ce(tgt_pred.car_probs, tgt_car_gt)
    total = l_sp + w.lambda1 * l_sc + w.lambda2 * l_tc
    grads = {"src_part_logits": g_sp, "src_car_logits": w.lambda1 * g_sc,
             "tgt_car_logits": w.lambda2 * g_tc}
    return total, grads


# --------------------------------------------------------------------------
# Direct loss
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DirectPrediction:
    center: np.ndarray                  # (2,) pixels
    shape: np.ndarray                   # (22,)
    angles: Tuple[BinEncoding, BinEncoding, BinEncoding]
    distance: BinEncoding


@dataclass(frozen=True, eq=False)
class DirectTarget:
    center: np.ndarray
    shape: np.ndarray
    theta: np.ndarray                   # (3,) radians
    distance: float


@dataclass(frozen=True, eq=False)
class DirectLossInput:
    pred: DirectPrediction
    gt: DirectTarget


@dataclass(frozen=True)
class Codecs:
    angle: BinCodec = field(default_factory=angle_codec)
    distance: BinCodec = field(default_factory=distance_codec)


def _l1(r: np.ndarray) -> Tuple[float, np.ndarray]:
    # subgradient 0 at 0
    return float(np.sum(np.abs(r))), np.sign(r)


def _conf_loss(conf: np.ndarray, true_bin: int) -> Tuple[float, np.ndarray]:
    lp = _log_softmax(conf)
    g = np.exp(lp)
    g[true_bin] -= 1.0
    return float(-lp[true_bin]), g


def loss_direct(inp: DirectLossInput, codecs: Optional[Codecs] = None) -> Tuple[float, Dict[str, np.ndarray]]:
    """Direct loss and gradients keyed by prediction field.

    Gradient keys: ``center``, ``shape``, ``angle{k}_conf``, ``angle{k}_offsets``
    (k = 0, 1, 2), ``distance_conf``, ``distance_offsets``. Confidences are
    logits; offsets are the raw (sin, cos) pairs for angles and meters for
    distance. Only the ground-truth bin's offset is regressed.
    """
    codecs = codecs or Codecs()
    p, g = inp.pred, inp.gt
    grads: Dict[str, np.ndarray] = {}
    l_center, grads["center"] = _l1(np.asarray(p.center, float) - np.asarray(g.center, float))
    l_shape, grads["shape"] = _l1(np.asarray(p.shape, float) - np.asarray(g.shape, float))
    if np.shape(p.shape) != np.shape(g.shape):
        raise ShapeMismatch("shape parameter vectors differ in length")
    centers = np.asarray(codecs.angle.bin_centers)
    l_rot = 0.0
    for k in range(3):
        enc = p.angles[k]
        b = codecs.angle.bin_index(g.theta[k])
        lc, gc = _conf_loss(enc.confidences, b)
        s, c = enc.offsets[b]
        delta = np.arctan2(s, c)
        r = wrap_angle(centers[b] + delta - g.theta[k])
        sign = float(np.sign(r))
        n2 = s * s + c * c
        go = np.zeros_like(enc.offsets)
        go[b] = [sign * c / n2, -sign * s / n2]
        l_rot += lc + abs(r)
        grads[f"angle{k}_conf"] = gc
        grads[f"angle{k}_offsets"] = go
    enc = p.distance
    b = codecs.distance.bin_index(g.distance)
    lc, gc = _conf_loss(enc.confidences, b)
    r = codecs.distance.bin_centers[b] + enc.offsets[b] - g.distance
    go = np.zeros_like(enc.offsets)
    go[b] = np.sign(r)
    l_dis = lc + abs(r)
    grads["distance_conf"] = gc
    grads["distance_offsets"] = go
    return l_center + l_shape + l_rot + l_dis, grads


def confident(enc: BinEncoding, margin: float = 1e3) -> BinEncoding:
    """Turn one-hot confidences into logits whose softmax is exactly one-hot in float64."""
    return BinEncoding(np.asarray(enc.confidences) * margin, enc.offsets)


# --------------------------------------------------------------------------
# 3D loss
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PoseShape:
    """Shape parameters plus allocentric angles, projected center and range."""

    shape: np.ndarray
    theta: np.ndarray
    center: np.ndarray
    distance: float


@dataclass(frozen=True, eq=False)
class ThreeDLossInput:
    pred: PoseShape
    gt: PoseShape
    space: ShapeSpace
    camera: Camera


def _safe_unit(v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    n = np.linalg.norm(v, axis=-1)
    u = np.zeros_like(v)
    nz = n > 0
    u[nz] = v[nz] / n[nz, None]
    return n, u


def loss_3d(inp: ThreeDLossInput, return_terms: bool = False):
    """Sum of the three 3D terms and gradients w.r.t. ``shape``, ``theta`` and ``distance``."""
    p, g, space, cam = inp.pred, inp.gt, inp.space, inp.camera
    if np.shape(p.shape) != np.shape(g.shape) or len(p.shape) != space.dim:
        raise ShapeMismatch("shape parameter vectors do not match the shape space")
    V = space.vertices(p.shape)
    Vs = space.vertices(g.shape)
    J = space.vertex_jacobian()                        # (N, 3, dim)
    Rc = ray_rotation(cam, p.center)
    Rv = euler_to_matrix(p.theta)
    R = Rc @ Rv
    Rs = ray_rotation(cam, g.center) @ euler_to_matrix(g.theta)
    N = len(V)

    n1, u1 = _safe_unit(V - Vs)
    term1 = float(n1.mean())
    g_shape = np.einsum("ni,nid->d", u1, J) / N

    D = V @ R.T - Vs @ Rs.T
    n2, u2 = _safe_unit(D)
    term2 = float(n2.mean())
    g_shape += np.einsum("ni,ij,njd->d", u2, R, J) / N
    dRv = euler_jacobian(p.theta)
    g_theta = np.array([np.einsum("ni,ij,nj->", u2, Rc @ dRv[k], V) / N for k in range(3)])

    T = Rc @ np.array([0.0, 0.0, p.distance])
    Ts = ray_rotation(cam, g.center) @ np.array([0.0, 0.0, g.distance])
    n3, u3 = _safe_unit((T - Ts)[None])
    term3 = float(n3[0])
    g_dist = float(u3[0] @ Rc[:, 2])

    total = term1 + term2 + term3
    grads = {"shape": g_shape, "theta": g_theta, "distance": np.array([g_dist])}
    if return_terms:
        return total, grads, (term1, term2, term3)
    return total, grads


def loss_total(direct: float, threed: float, w: Optional[LossWeights] = None) -> float:
    w = w or LossWeights()
    return w.w_direct * direct + w.w_3d * threed


# --------------------------------------------------------------------------
# Finite-difference checks
# --------------------------------------------------------------------------

def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def central_difference(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g


def _check_class_consistency(rng, shape=(8, 8), n_parts=5, step=1e-5) -> float:
    H, W = shape
    sp_logits = rng.normal(size=(H, W, n_parts))
    sc_logits = rng.normal(size=(H, W, 2))
    tc_logits = rng.normal(size=(H, W, 2))
    part_gt = rng.integers(0, n_parts, size=(H, W))
    car_gt = rng.integers(0, 2, size=(H, W))
    tgt_gt = rng.integers(0, 2, size=(H, W))

    # the target-domain part map does not enter the loss
    tgt_part = rng.normal(size=(H, W, n_parts))

    def f(a, b, c):
        return loss_class_consistency(SegPrediction.from_logits(a, b), part_gt, car_gt,
                                      SegPrediction.from_logits(tgt_part, c), tgt_gt)[0]

    _, grads = loss_class_consistency(
        SegPrediction.from_logits(sp_logits, sc_logits), part_gt, car_gt,
        SegPrediction.from_logits(tgt_part, tc_logits), tgt_gt)
    fd_sp = central_difference(lambda z: f(z, sc_logits, tc_logits), sp_logits.copy(), step)
    fd_sc = central_difference(lambda z: f(sp_logits, z, tc_logits), sc_logits.copy(), step)
    fd_tc = central_difference(lambda z: f(sp_logits, sc_logits, z), tc_logits.copy(), step)
    analytic = np.concatenate([grads["src_part_logits"].ravel(), grads["src_car_logits"].ravel(),
                               grads["tgt_car_logits"].ravel()])
    numeric = np.concatenate([fd_sp.ravel(), fd_sc.ravel(), fd_tc.ravel()])
    return relative_error(analytic, numeric)


_DIRECT_KEYS = ["center", "shape", "angle0_conf", "angle0_offsets", "angle1_conf",
                "angle1_offsets", "angle2_conf", "angle2_offsets", "distance_conf",
                "distance_offsets"]


def _random_direct_input(rng, codecs: Codecs, margin: float = 0.05) -> DirectLossInput:
    """Random prediction/target pair with every L1 residual at least ``margin`` from a kink."""
    na, nd = codecs.angle.n_bins, codecs.distance.n_bins

    def away(size):
        v = rng.uniform(margin, 1.0, size=size)
        return v * rng.choice([-1.0, 1.0], size=size)

    c_gt = rng.uniform(0, 1000, 2)
    s_gt = rng.normal(size=22)
    theta = rng.uniform(-np.pi, np.pi, 3)
    d_gt = float(np.exp(rng.uniform(np.log(4.0), np.log(120.0))))
    angles = []
    for k in range(3):
        b = codecs.angle.bin_index(theta[k])
        offs = rng.normal(size=(na, 2))
        # regressed angle lands a non-zero wrapped distance away from the target
        want = wrap_angle(theta[k] + away(()) * 0.5 - codecs.angle.bin_centers[b])
        radius = rng.uniform(0.5, 2.0)
        offs[b] = [radius * np.sin(want), radius * np.cos(want)]
        angles.append(BinEncoding(rng.normal(size=na), offs))
    doffs = rng.normal(size=nd)
    b = codecs.distance.bin_index(d_gt)
    doffs[b] = d_gt - codecs.distance.bin_centers[b] + away(())
    pred = DirectPrediction(c_gt + away(2) * 5, s_gt + away(22), tuple(angles),
                            BinEncoding(rng.normal(size=nd), doffs))
    return DirectLossInput(pred, DirectTarget(c_gt, s_gt, theta, d_gt))


def _pack_direct(p: DirectPrediction) -> np.ndarray:
    parts = [p.center, p.shape]
    for enc in p.angles:
        parts += [enc.confidences, enc.offsets.ravel()]
    parts += [p.distance.confidences, p.distance.offsets]
    return np.concatenate([np.ravel(x) for x in parts])


def _unpack_direct(x: np.ndarray, like: DirectPrediction) -> DirectPrediction:
    i = 0

    def take(n):
        nonlocal i
        out = x[i:i + n]
        i += n
        return out.copy()

    center = take(2)
    shape = take(len(like.shape))
    angles = []
    for enc in like.angles:
        n = len(enc.confidences)
        conf = take(n)
        angles.append(BinEncoding(conf, take(2 * n).reshape(n, 2)))
    n = len(like.distance.confidences)
    dist = BinEncoding(take(n), take(n))
    return DirectPrediction(center, shape, tuple(angles), dist)


def _check_direct(rng, codecs: Codecs, step=1e-5) -> float:
    inp = _random_direct_input(rng, codecs)
    _, grads = loss_direct(inp, codecs)
    analytic = np.concatenate([np.ravel(grads[k]) for k in _DIRECT_KEYS])
    x0 = _pack_direct(inp.pred)
    numeric = central_difference(
        lambda x: loss_direct(DirectLossInput(_unpack_direct(x, inp.pred), inp.gt), codecs)[0],
        x0.copy(), step)
    return relative_error(analytic, numeric)


def toy_shape_space(rng, n_vertices: int = 50, n_models: int = 30) -> ShapeSpace:
    from .shape_space import build_shape_space

    base = rng.normal(size=(n_vertices, 3)) * np.array([0.9, 0.7, 2.2])
    models = [base * rng.uniform(0.85, 1.15, size=3) + rng.normal(scale=0.05, size=base.shape)
              for _ in range(n_models)]
    return build_shape_space(models, dim=22)


def _check_3d(rng, space: ShapeSpace, camera: Camera, step=1e-5) -> float:
    def pose(s):
        return PoseShape(s, rng.uniform(-0.8, 0.8, 3) * np.array([np.pi, 0.5, 0.5]),
                         rng.uniform([200, 150], [camera.width - 200, camera.height - 150]),
                         float(rng.uniform(5, 60)))

    pred = pose(rng.normal(size=22))
    gt = pose(rng.normal(size=22))
    inp = ThreeDLossInput(pred, gt, space, camera)
    _, grads = loss_3d(inp)
    analytic = np.concatenate([grads["shape"], grads["theta"], grads["distance"]])
    x0 = np.concatenate([pred.shape, pred.theta, [pred.distance]])

    def f(x):
        q = PoseShape(x[:22], x[22:25], pred.center, float(x[25]))
        return loss_3d(ThreeDLossInput(q, gt, space, camera))[0]

    return relative_error(analytic, central_difference(f, x0.copy(), step))


def run_gradcheck(n_points: int = 100, seed: int = 0, step: float = 1e-5) -> dict:
    """Finite-difference check of all three losses at ``n_points`` random points each."""
    from .pose import default_camera

    rng = np.random.default_rng(seed)
    codecs = Codecs()
    space = toy_shape_space(rng)
    camera = default_camera()
    report = {}
    for name, fn in (("class_consistency", lambda: _check_class_consistency(rng, step=step)),
                     ("direct", lambda: _check_direct(rng, codecs, step)),
                     ("3d", lambda: _check_3d(rng, space, camera, step))):
        errs = [fn() for _ in range(n_points)]
        report[name] = {"n": n_points, "max_relative_error": float(max(errs)),
                        "median_relative_error": float(np.median(errs))}
    return report
