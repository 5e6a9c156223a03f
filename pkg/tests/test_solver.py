import numpy as np
import pytest
from dataclasses import replace

from carparse.errors import TooFewParts
from carparse.pose import CarPose, geodesic_distance
from carparse.scene import SceneConfig, ground_plane, place_scene, rasterize
from carparse.solver import (CentroidModel, PartObservation, PoseEstimate, RefineConfig,
                             extract_observations, is_confident, pnp_init, pose_vector, refine,
                             rendered_centroids, solve_scene)


@pytest.fixture(scope="module")
def model(space, camera):
    return CentroidModel(space, camera)


def _random_pose(rng, camera):
    theta = (rng.uniform(-np.pi, np.pi), rng.uniform(-0.2, 0.2), rng.uniform(-0.1, 0.1))
    c = (rng.uniform(0.3, 0.7) * camera.width, rng.uniform(0.4, 0.7) * camera.height)
    return CarPose(theta, c, rng.uniform(8, 30))


def _visible_parts(model, x):
    all_ids = np.unique(model.labels)
    seen = rendered_centroids(model, x, all_ids)
    return all_ids[np.all(np.isfinite(seen), axis=1)]


def _model_obs(model, pose, shape=None):
    shape = np.zeros(model.space.dim) if shape is None else shape
    x = pose_vector(pose, shape)
    ids = _visible_parts(model, x)
    return PartObservation(ids, model.predict(x, ids)[0], np.full(len(ids), 100)), x


def _solve_model_obs(model, space, camera, obs):
    init = pnp_init(obs, space, camera, model)
    start = PoseEstimate(init.pose, np.zeros(space.dim), init.reprojection_rms, False, 0, 0, init.planar)
    return refine(start, obs, space, camera, model=model)


def test_pnp_exact_on_projected_part_centroids(model, space, camera):
    rng = np.random.default_rng(0)
    for _ in range(10):
        pose = _random_pose(rng, camera)
        ids = _visible_parts(model, pose_vector(pose, np.zeros(space.dim)))
        P = model.part_centroids_3d(ids)
        X = P @ pose.rotation(camera).T + pose.translation(camera)
        uv = np.stack([camera.fx * X[:, 0] / X[:, 2] + camera.cx, camera.fy * X[:, 1] / X[:, 2] + camera.cy], 1)
        res = pnp_init(PartObservation(ids, uv, np.ones(len(ids), int)), space, camera, model)
        assert not res.planar
        assert geodesic_distance(res.rotation, pose.rotation(camera)) < 1e-6
        assert abs(res.pose.distance - pose.distance) < 1e-6


def test_too_few_parts(space, camera):
    obs = PartObservation(np.array([1, 2, 3]), np.zeros((3, 2)), np.ones(3, int))
    with pytest.raises(TooFewParts):
        pnp_init(obs, space, camera)


def test_planar_fallback_is_flagged(space, camera):
    class Flat(CentroidModel):
        def part_centroids_3d(self, part_ids, shape=None):
            g = np.linspace(-0.6, 0.6, 3)
            pts = np.array([[a, -0.7, b * 2] for a in g for b in g])   # roof-like plane y = -0.7
            return pts[: len(part_ids)]

    flat = Flat(space, camera)
    pose = CarPose((0.4, 0.1, 0.0), (1000.0, 650.0), 15.0)
    P = flat.part_centroids_3d(range(9))
    X = P @ pose.rotation(camera).T + pose.translation(camera)
    uv = np.stack([camera.fx * X[:, 0] / X[:, 2] + camera.cx, camera.fy * X[:, 1] / X[:, 2] + camera.cy], 1)
    res = pnp_init(PartObservation(np.arange(9), uv, np.ones(9, int)), space, camera, flat)
    assert res.planar
    assert geodesic_distance(res.rotation, pose.rotation(camera)) < 1e-6
    assert np.abs(res.translation - pose.translation(camera)).max() < 1e-6


def test_refine_from_truth_takes_no_step(model, space, camera):
    pose = CarPose((0.5, 0.05, 0.0), (900.0, 700.0), 14.0)
    obs, x = _model_obs(model, pose)
    est = refine(PoseEstimate(pose, np.zeros(space.dim), 0.0, False), obs, space, camera, model=model)
    assert est.converged
    assert np.array_equal(pose_vector(est.pose, est.shape), x)
    assert est.cost_trace[-1] == 0.0 and est.reprojection_rms == 0.0


def test_refine_recovers_from_perturbed_init(model, space, camera):
    rng = np.random.default_rng(1)
    for _ in range(5):
        pose = _random_pose(rng, camera)
        obs, _ = _model_obs(model, pose)
        th = np.array(pose.theta) + np.radians(5) * rng.choice([-1, 1], 3) / np.sqrt(3)
        start = CarPose(tuple(th), pose.center_px, pose.distance * 1.1)
        est = refine(PoseEstimate(start, np.zeros(space.dim), 0.0, False), obs, space, camera, model=model)
        assert geodesic_distance(est.rotation(camera), pose.rotation(camera)) < 1e-4
        assert np.linalg.norm(est.translation(camera) - pose.translation(camera)) < 1e-3


def test_solve_exact_on_model_observations(model, space, camera):
    rng = np.random.default_rng(2)
    rms = []
    for _ in range(30):
        pose = _random_pose(rng, camera)
        obs, _ = _model_obs(model, pose)
        if len(obs) < 6:
            continue
        est = _solve_model_obs(model, space, camera, obs)
        rms.append(est.reprojection_rms)
        assert geodesic_distance(est.rotation(camera), pose.rotation(camera)) < 1e-6
        assert abs(est.pose.distance - pose.distance) < 1e-6
    assert len(rms) >= 20
    assert np.mean(np.array(rms) < 1e-3) >= 0.99


def test_cost_trace_non_increasing(model, space, camera):
    rng = np.random.default_rng(3)
    pose = _random_pose(rng, camera)
    obs, _ = _model_obs(model, pose, shape=rng.normal(size=space.dim))
    noisy = obs.with_centroids(obs.centroids + rng.normal(scale=2.0, size=obs.centroids.shape))
    est = _solve_model_obs(model, space, camera, noisy)
    assert np.all(np.diff(est.cost_trace) <= 0)


def test_equivariant_under_principal_point_shift(model, space, camera):
    pose = CarPose((1.1, 0.05, 0.02), (800.0, 700.0), 18.0)
    obs, _ = _model_obs(model, pose)
    rng = np.random.default_rng(4)
    obs = obs.with_centroids(obs.centroids + rng.normal(scale=1.0, size=obs.centroids.shape))
    a = _solve_model_obs(model, space, camera, obs)
    cam2 = camera.shifted(37)
    b = _solve_model_obs(CentroidModel(space, cam2), space, cam2,
                         obs.with_centroids(obs.centroids + [37.0, 0.0]))
    assert np.abs(np.array(b.pose.theta) - a.pose.theta).max() < 1e-6
    assert b.pose.center_px[0] - a.pose.center_px[0] == pytest.approx(37.0, abs=1e-5)
    assert b.pose.distance == pytest.approx(a.pose.distance, abs=1e-6)
    assert np.abs(b.translation(cam2) - a.translation(camera)).max() < 1e-6


def test_extract_observations_centroids_and_filters():
    part = np.zeros((40, 60), int)
    inst = np.zeros((40, 60), int)
    part[5:15, 10:20] = 3
    inst[5:15, 10:20] = 1
    part[0:8, 40:50] = 4                # touches the border
    inst[0:8, 40:50] = 1
    part[20:22, 10:40] = 5              # 2 px thick: edge-on
    inst[20:22, 10:40] = 1
    obs = extract_observations(part, inst)
    o = obs[1]
    assert o.part_ids.tolist() == [2]
    assert o.centroids.tolist() == [[15.0, 10.0]]
    assert o.pixel_counts.tolist() == [100]


def test_unseen_and_occluded_instances_are_skipped(space, camera):
    part = np.zeros((100, 100), int)
    inst = np.zeros((100, 100), int)
    inst[10:30, 10:30] = 2              # instance without part pixels
    inst[50:80, 50:80] = 3
    part[50:80, 50:80] = 7              # one part only
    ests, diag = solve_scene(part, inst, space, camera.resized(100, 100))
    assert ests == []
    assert [d["status"] for d in diag] == ["skipped", "skipped"]
    assert [d["instance_id"] for d in diag] == [2, 3]


def test_solve_scene_on_rendered_maps(space):
    cfg = SceneConfig()
    scene = place_scene(cfg, space, 3)
    maps = rasterize(scene, space, visibility=False)
    ground = ground_plane(scene.camera_height, scene.camera_pitch)
    ests, diag = solve_scene(maps.part_map, maps.instance_map, space, scene.camera, maps.depth_map, ground)
    assert len(diag) == len(np.unique(maps.instance_map)) - 1
    assert ests, "expected at least one confident estimate"
    truth = {i.instance_id: i for i in scene.instances}
    for e in ests:
        assert is_confident(e)
        t = truth[e.instance_id]
        assert geodesic_distance(e.rotation(scene.camera), t.rotation) < np.radians(1)
        assert abs(e.pose.distance - t.pose.distance) / t.pose.distance < 0.01
        assert 0 < e.score <= 1


def test_confidence_gate(space):
    est = PoseEstimate(CarPose((0, 0, 0), (1, 1), 5.0), np.zeros(space.dim), 0.1, True,
                       translation_sigma=0.2, rotation_sigma=0.01)
    assert is_confident(est)
    assert not is_confident(replace(est, translation_sigma=2.0))
    assert not is_confident(replace(est, converged=False))
    assert not is_confident(replace(est, rotation_sigma=np.radians(20)))
    assert replace(est, translation_sigma=np.nan).score == 0.0


def test_rendered_centroids_match_extracted(model, space, camera):
    cfg = SceneConfig(n_cars=(1, 1), occluder_count=(0, 0))
    scene = place_scene(cfg, space, 0)
    maps = rasterize(scene, space, visibility=False)
    obs = extract_observations(maps.part_map, maps.instance_map)[1]
    ins = scene.instances[0]
    seen = rendered_centroids(model, pose_vector(ins.pose, ins.shape), obs.part_ids)
    assert np.abs(seen - obs.centroids).max() < 1e-3
    unknown = rendered_centroids(model, pose_vector(ins.pose, ins.shape), [int(model.labels.max()) + 5])
    assert np.all(np.isnan(unknown))
