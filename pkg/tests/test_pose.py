import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from carparse.errors import BehindCamera, OutOfRange
from carparse.pose import (BinEncoding, Camera, CarPose, allocentric_compose, allocentric_decompose,
                           angle_codec, backproject, decode_bins, distance_codec, encode_bins,
                           euler_to_matrix, geodesic_distance, matrix_to_euler, pixel_ray, project,
                           random_rotation, ray_rotation, wrap_angle)

CAM = Camera(1000.0, 1000.0, 960.0, 540.0, 1920, 1080)
pixels = st.tuples(st.floats(0, 1920), st.floats(0, 1080))


def test_project_axis_and_analytic():
    assert project(CAM, [0, 0, 5]).tolist() == [960.0, 540.0]
    assert project(CAM, [1, 0, 10]).tolist() == [1060.0, 540.0]
    with pytest.raises(BehindCamera):
        project(CAM, [0, 0, 0])


@given(pixels, st.floats(0.5, 200))
def test_backproject_round_trip(px, depth):
    assert np.abs(project(CAM, backproject(CAM, px, depth)) - px).max() < 1e-9


def test_ray_rotation_principal_point_is_identity():
    assert np.array_equal(ray_rotation(CAM, (CAM.cx, CAM.cy)), np.eye(3))


def test_ray_rotation_horizontal_is_about_y():
    R = ray_rotation(CAM, (CAM.cx + 300, CAM.cy))
    assert R[1, 1] == pytest.approx(1.0, abs=1e-15)
    assert np.abs(R[1, [0, 2]]).max() < 1e-15 and np.abs(R[[0, 2], 1]).max() < 1e-15


@given(pixels)
def test_ray_rotation_maps_axis_onto_ray(px):
    R = ray_rotation(CAM, px)
    ray = backproject(CAM, px, 1.0)
    assert np.abs(R[:, 2] - ray / np.linalg.norm(ray)).max() < 1e-12
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-12 and np.linalg.det(R) == pytest.approx(1.0)


def test_ray_rotation_is_minimal():
    R = ray_rotation(CAM, (1500.0, 100.0))
    z = np.array([0.0, 0, 1])
    ray = pixel_ray(CAM, (1500.0, 100.0))
    # minimal rotation angle equals the angle between axis and ray
    assert geodesic_distance(R, np.eye(3)) == pytest.approx(math.acos(ray @ z), abs=1e-12)


def test_allocentric_at_principal_point():
    R = random_rotation(np.random.default_rng(0))
    assert np.array_equal(allocentric_decompose(R, CAM, (CAM.cx, CAM.cy)), R)


def test_allocentric_round_trip_many():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        R = random_rotation(rng)
        c = (rng.uniform(0, 1920), rng.uniform(0, 1080))
        worst = max(worst, np.abs(allocentric_compose(allocentric_decompose(R, CAM, c), CAM, c) - R).max())
    assert worst < 1e-9


@settings(max_examples=30)
@given(pixels, pixels)
def test_fixed_allocentric_follows_ray(c1, c2):
    R_v = euler_to_matrix([0.4, -0.1, 0.05])
    R1 = allocentric_compose(R_v, CAM, c1)
    R2 = allocentric_compose(R_v, CAM, c2)
    dR = ray_rotation(CAM, c2) @ ray_rotation(CAM, c1).T
    assert np.abs(R2 - dR @ R1).max() < 1e-12


def test_euler_convention_is_zxy():
    a, b, g = 0.3, -0.2, 0.1

    def rot(axis, t):
        c, s = math.cos(t), math.sin(t)
        return {"x": np.array([[1, 0, 0], [0, c, -s], [0, s, c]]),
                "y": np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]]),
                "z": np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])}[axis]

    expect = rot("z", g) @ rot("x", b) @ rot("y", a)
    assert np.abs(euler_to_matrix([a, b, g]) - expect).max() < 1e-15


@given(st.floats(-math.pi, math.pi), st.floats(-1.4, 1.4), st.floats(-math.pi, math.pi))
def test_euler_round_trip(a, b, g):
    th = matrix_to_euler(euler_to_matrix([a, b, g]))
    assert np.abs(euler_to_matrix(th) - euler_to_matrix([a, b, g])).max() < 1e-9


@given(st.floats(-100, 100))
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.sin(w), math.sin(a), abs_tol=1e-9) and math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)


def test_wrap_angle_boundary():
    assert wrap_angle(-math.pi) == math.pi
    assert wrap_angle(math.pi) == math.pi


def test_pose_translation_and_projection():
    pose = CarPose((0.1, 0.0, 0.0), (1200.0, 700.0), 25.0)
    T = pose.translation(CAM)
    assert np.linalg.norm(T) == pytest.approx(25.0)
    assert np.abs(project(CAM, T) - [1200.0, 700.0]).max() < 1e-9
    back = CarPose.from_egocentric(pose.rotation(CAM), T, CAM)
    assert np.abs(back.rotation(CAM) - pose.rotation(CAM)).max() < 1e-9
    with pytest.raises(ValueError):
        CarPose((0, 0, 0), (0, 0), 0.0)


def test_angle_codec_layout():
    codec = angle_codec()
    assert codec.n_bins == 8
    assert sorted(np.round(np.mod(codec.bin_centers, 2 * math.pi) / (math.pi / 4), 12)) == list(range(8))


def test_zero_angle_encoding():
    codec = angle_codec()
    enc = encode_bins(0.0, codec)
    b = int(np.argmax(enc.confidences))
    assert codec.bin_centers[b] == 0.0
    assert enc.offsets[b].tolist() == [0.0, 1.0]
    assert decode_bins(enc, codec) == 0.0


def test_angle_round_trip_many():
    codec = angle_codec()
    rng = np.random.default_rng(0)
    vals = rng.uniform(-10, 10, 10_000)
    err = max(abs(wrap_angle(decode_bins(encode_bins(v, codec), codec) - v)) for v in vals)
    assert err < 1e-9


def test_distance_round_trip_many():
    codec = distance_codec()
    assert codec.n_bins == 32 and codec.range == (3.0, 150.0)
    rng = np.random.default_rng(0)
    vals = rng.uniform(3.0, 150.0, 10_000)
    err = max(abs(decode_bins(encode_bins(v, codec), codec) - v) for v in vals)
    assert err < 1e-6
    with pytest.raises(OutOfRange):
        encode_bins(2.9, codec)


def test_distance_bins_log_spaced():
    e = np.asarray(distance_codec().edges)
    r = e[1:] / e[:-1]
    assert np.allclose(r, r[0])


@given(st.floats(-math.pi / 8 + 1e-6, math.pi / 8 - 1e-6))
def test_offset_recovered_by_arctangent(delta):
    # inside a bin |delta| < pi/2, so arctan(sin/cos) and the quadrant-aware form agree
    s, c = math.sin(delta), math.cos(delta)
    assert math.atan(s / c) == pytest.approx(delta, abs=1e-12)
    assert math.atan2(s, c) == pytest.approx(delta, abs=1e-12)


@given(st.floats(-20, 20))
def test_decoded_angle_inside_selected_bin(v):
    codec = angle_codec()
    enc = encode_bins(v, codec)
    b = int(np.argmax(enc.confidences))
    out = decode_bins(enc, codec)
    assert abs(wrap_angle(out - codec.bin_centers[b])) <= codec.half_width + 1e-12


def test_soft_decode_one_hot_sharp():
    codec = angle_codec()
    enc = encode_bins(0.3, codec)
    sharp = BinEncoding(enc.confidences * 50, enc.offsets)
    assert decode_bins(sharp, codec, soft=True) == pytest.approx(0.3, abs=1e-9)
