import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from carparse.errors import PlacementFailure
from carparse.pose import CarPose, project
from carparse.scene import (Occluder, SceneConfig, SceneInstance, _box_mesh, car_axes,
                            dataset_stats, load_label_maps, place_scene, polygons_overlap,
                            pose_stats, rasterize, raycast, save_label_maps, scene_geometry,
                            world_to_camera, zbuffer)


def _rect(cx, cy, w, h, yaw=0.0):
    c, s = math.cos(yaw), math.sin(yaw)
    pts = np.array([[-w, -h], [w, -h], [w, h], [-w, h]]) / 2
    return pts @ np.array([[c, -s], [s, c]]).T + [cx, cy]


def _car_at(scene, space, instance_id, gx, gy, yaw, shape=None):
    """A car placed exactly as the scene sampler would place it."""
    s = np.zeros(space.dim) if shape is None else shape
    V = space.vertices(s)
    R_wc, C_w = world_to_camera(scene.camera_height, scene.camera_pitch)
    center = np.array([gx, gy, V[:, 1].max()])
    R = R_wc @ car_axes(yaw)
    T = R_wc @ (center - C_w)
    return SceneInstance(instance_id, s, yaw, center, R, T, CarPose.from_egocentric(R, T, scene.camera),
                         _rect(gx, gy, 2, 4, yaw))


@pytest.fixture(scope="module")
def base_scene(space):
    return place_scene(SceneConfig(n_cars=(1, 1), occluder_count=(0, 0)), space, 0)


def test_light_count_default():
    assert SceneConfig().light_count == (5, 20)


def test_sat_basic_cases():
    a = _rect(0, 0, 2, 4)
    assert polygons_overlap(a, a)
    assert polygons_overlap(a, _rect(1.5, 0, 2, 4))
    assert not polygons_overlap(a, _rect(3, 0, 2, 4))
    # diamond clears the square on a diagonal axis only
    assert not polygons_overlap(_rect(0, 0, 2, 2), _rect(2.3, 2.3, 2, 2, math.pi / 4))


@settings(max_examples=100)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-3.2, 3.2), st.floats(-3.2, 3.2))
def test_sat_matches_sampling_oracle(x, y, ya, yb):
    a, b = _rect(0, 0, 2, 4, ya), _rect(x, y, 2, 4, yb)
    # dense interior sampling of one rectangle against the other's half-planes
    u, v = np.meshgrid(np.linspace(-1, 1, 41), np.linspace(-2, 2, 81))
    c, s = math.cos(yb), math.sin(yb)
    pts = np.stack([u.ravel(), v.ravel()], 1) @ np.array([[c, -s], [s, c]]).T + [x, y]
    ca, sa = math.cos(ya), math.sin(ya)
    local = pts @ np.array([[ca, -sa], [sa, ca]])
    hit = np.any((np.abs(local[:, 0]) <= 1) & (np.abs(local[:, 1]) <= 2))
    if hit:
        assert polygons_overlap(a, b)


def test_single_car_scene(space):
    sc = place_scene(SceneConfig(n_cars=(1, 1)), space, 7)
    assert len(sc.instances) == 1 and not any("car" in w for w in sc.warnings)


def test_identical_position_rejected(space):
    cfg = SceneConfig(n_cars=(2, 2), occluder_count=(0, 0), forward_range=(20.0, 20.0),
                      fov_fraction=1e-9, max_attempts=20)
    sc = place_scene(cfg, space, 0)
    assert len(sc.instances) == 1
    assert any("could not place car" in w for w in sc.warnings)
    with pytest.raises(PlacementFailure):
        place_scene(cfg, space, 0, strict=True)


@pytest.mark.slow
def test_no_overlaps_over_many_scenes(space):
    cfg = SceneConfig()
    for i in range(200):
        sc = place_scene(cfg, space, i)
        fps = [x.footprint for x in sc.instances] + [o.footprint for o in sc.occluders]
        for a in range(len(fps)):
            for b in range(a + 1, len(fps)):
                assert not polygons_overlap(fps[a], fps[b])


def test_footprint_matches_model_extent(space):
    sc = place_scene(SceneConfig(), space, 1)
    for ins in sc.instances:
        V = space.vertices(ins.shape)
        fp = ins.footprint
        side = np.linalg.norm(fp[1] - fp[0]), np.linalg.norm(fp[2] - fp[1])
        assert side[0] == pytest.approx(np.ptp(V[:, 0]), rel=1e-12)
        assert side[1] == pytest.approx(np.ptp(V[:, 2]), rel=1e-12)


def test_projected_center_matches_pose(space):
    sc = place_scene(SceneConfig(), space, 2)
    for ins in sc.instances:
        assert np.abs(project(sc.camera, ins.translation) - ins.pose.center_px).max() < 1e-9
        assert ins.pose.distance == pytest.approx(np.linalg.norm(ins.translation), rel=1e-15)


def test_single_car_visibility_and_solo_equality(space, base_scene):
    maps = rasterize(base_scene, space)
    assert maps.records[0]["visibility"] == 1.0
    _, solo = zbuffer(scene_geometry(base_scene, space, only=1), base_scene.camera)
    assert np.array_equal(maps.instance_map != 0, solo >= 0)


def test_occluder_slab_hides_car(space, base_scene):
    R_wc, C_w = world_to_camera(base_scene.camera_height, base_scene.camera_pitch)
    v, f = _box_mesh(200.0, 0.2, 30.0)
    wall = v + np.array([0.0, 3.0, 0.0])
    scene = replace(base_scene, occluders=[Occluder("box", wall, f, wall[:4, :2])])
    maps = rasterize(scene, space)
    assert maps.records[0]["visible_pixels"] == 0
    assert maps.records[0]["visibility"] == 0.0


def _two_cars(space, base_scene):
    near = _car_at(base_scene, space, 1, 0.0, 10.0, 0.3)
    far = _car_at(base_scene, space, 2, 0.5, 20.0, -0.4)
    return replace(base_scene, instances=[near, far], occluders=[])


def test_near_car_wins_contested_pixels(space, base_scene):
    scene = _two_cars(space, base_scene)
    maps = rasterize(scene, space)
    _, a = zbuffer(scene_geometry(scene, space, only=1), scene.camera)
    _, b = zbuffer(scene_geometry(scene, space, only=2), scene.camera)
    contested = (a >= 0) & (b >= 0)
    assert contested.sum() > 100
    assert np.all(maps.instance_map[contested] == 1)


def test_two_car_raycast_oracle(space, base_scene):
    scene = _two_cars(space, base_scene)
    cam = scene.camera.resized(128, 128)
    geom = scene_geometry(scene, space)
    d1, w1 = zbuffer(geom, cam)
    d2, w2 = raycast(geom, cam)
    assert np.array_equal(w1 >= 0, w2 >= 0)
    assert np.array_equal(geom.part[w1[w1 >= 0]], geom.part[w2[w2 >= 0]])
    assert np.array_equal(geom.instance[w1[w1 >= 0]], geom.instance[w2[w2 >= 0]])
    hit = np.isfinite(d1)
    assert np.abs(d1[hit] - d2[hit]).max() < 1e-9


def test_hierarchy_and_depth(space):
    for i in range(5):
        maps = rasterize(place_scene(SceneConfig(), space, i), space, visibility=False)
        maps.check()
        assert np.all((maps.part_map == 0) | (maps.instance_map != 0))


def test_determinism(space):
    cfg = SceneConfig(rng_seed=42)
    a = rasterize(place_scene(cfg, space, 3), space)
    b = rasterize(place_scene(cfg, space, 3), space)
    assert np.array_equal(a.part_map, b.part_map)
    assert np.array_equal(a.instance_map, b.instance_map)
    assert np.array_equal(a.depth_map, b.depth_map)
    c = rasterize(place_scene(SceneConfig(rng_seed=43), space, 3), space)
    assert not np.array_equal(a.part_map, c.part_map)


def test_label_map_files_round_trip(tmp_path, space):
    sc = place_scene(SceneConfig(), space, 0)
    maps = rasterize(sc, space, resolution=(320, 200))
    save_label_maps(maps, sc, tmp_path, "s0")
    back, gt = load_label_maps(tmp_path, "s0")
    assert np.array_equal(back.part_map, maps.part_map)
    assert np.array_equal(back.instance_map, maps.instance_map)
    assert np.array_equal(back.depth_map, maps.depth_map.astype(np.float32).astype(np.float64))
    assert len(gt["instances"]) == len(sc.instances)


def test_stats_single_car():
    st_ = pose_stats([0.0], [10.0])
    az = np.array(st_["azimuth"]["counts"])
    dist = np.array(st_["distance"]["counts"])
    assert az.sum() == 1 and dist.sum() == 1
    edges = np.array(st_["azimuth"]["edges"])
    k = int(np.argmax(az))
    assert edges[k] <= 0.0 < edges[k + 1]
    de = np.array(st_["distance"]["edges"])
    j = int(np.argmax(dist))
    assert de[j] <= 10.0 < de[j + 1]


def test_stats_uniform_azimuth_flat():
    rng = np.random.default_rng(0)
    n, bins = 36_000, 36
    counts = np.array(pose_stats(rng.uniform(-np.pi, np.pi, n), np.full(n, 5.0), bins)["azimuth"]["counts"])
    p = 1 / bins
    sigma = math.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma)


def test_dataset_stats_counts_all_cars(space):
    scenes = [place_scene(SceneConfig(), space, i) for i in range(3)]
    st_ = dataset_stats(scenes)
    assert st_["n_cars"] == sum(len(s.instances) for s in scenes)
    with pytest.raises(ValueError):
        dataset_stats([])
