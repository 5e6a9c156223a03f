"""Pinhole camera, car pose state and bin+offset coding of angles and distances.

Rotation chart: ``R(alpha, beta, gamma) = Rz(gamma) @ Rx(beta) @ Ry(alpha)``
with azimuth ``alpha`` about the (downward) y axis, elevation ``beta`` about x
and tilt ``gamma`` about the optical axis. The same chart is used by the
losses, the solver and the metrics.

A pose stores *allocentric* angles: ``R_v = euler(theta)`` is the rotation
relative to the viewing ray through the projected car center ``c``. The
egocentric rotation is ``R = R_c(c) @ R_v`` and the car center in camera
coordinates is ``T = R_c(c) @ [0, 0, d]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import BehindCamera, OutOfRange

TWO_PI = 2.0 * math.pi


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    w = np.mod(a + math.pi, TWO_PI) - math.pi
    w = np.where(w <= -math.pi, w + TWO_PI, w)
    return float(w) if w.ndim == 0 else w


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> "Camera":
        """Same field of view at ``factor`` times the resolution."""
        return Camera(self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
                      int(round(self.width * factor)), int(round(self.height * factor)))

    def resized(self, width: int, height: int) -> "Camera":
        """Same field of view on a ``width`` x ``height`` grid (aspect may change)."""
        sx, sy = width / self.width, height / self.height
        return Camera(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, int(width), int(height))

    def shifted(self, dx: float, dy: float = 0.0) -> "Camera":
        return Camera(self.fx, self.fy, self.cx + dx, self.cy + dy, self.width, self.height)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


def default_camera() -> Camera:
    """Street-view-like intrinsics: 1920x1208 with a ~2300 px focal length."""
    return Camera(2300.0, 2300.0, 960.0, 604.0, 1920, 1208)


def project(camera: Camera, point3d) -> np.ndarray:
    p = np.asarray(point3d, dtype=np.float64)
    if p[2] <= 0:
        raise BehindCamera(f"point depth {p[2]} <= 0")
    return np.array([camera.fx * p[0] / p[2] + camera.cx, camera.fy * p[1] / p[2] + camera.cy])


def project_points(camera: Camera, points: np.ndarray) -> np.ndarray:
    """Vectorized pinhole projection; no depth check."""
    p = np.asarray(points, dtype=np.float64)
    return np.stack([camera.fx * p[..., 0] / p[..., 2] + camera.cx,
                     camera.fy * p[..., 1] / p[..., 2] + camera.cy], axis=-1)


def backproject(camera: Camera, pixel, depth: float) -> np.ndarray:
    u, v = pixel
    return np.array([(u - camera.cx) / camera.fx * depth, (v - camera.cy) / camera.fy * depth, depth])


def pixel_ray(camera: Camera, pixel) -> np.ndarray:
    u, v = pixel
    r = np.array([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0])
    return r / np.linalg.norm(r)


def rotation_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimal rotation taking unit vector ``a`` onto unit vector ``b``."""
    v = np.cross(a, b)
    c = float(np.dot(a, b))
    if not np.any(v):
        if c > 0:
            return np.eye(3)
        raise ValueError("antiparallel vectors have no unique minimal rotation")
    vx = np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])
    return np.eye(3) + vx + vx @ vx / (1.0 + c)


def ray_rotation(camera: Camera, center_px) -> np.ndarray:
    """Rotation ``R_c`` from the principal axis to the ray through ``center_px``."""
    return rotation_between(np.array([0.0, 0.0, 1.0]), pixel_ray(camera, center_px))


def _rx(b):
    c, s = math.cos(b), math.sin(b)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(g):
    c, s = math.cos(g), math.sin(g)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _drx(b):
    c, s = math.cos(b), math.sin(b)
    return np.array([[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])


def _dry(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])


def _drz(g):
    c, s = math.cos(g), math.sin(g)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


def euler_to_matrix(theta: Sequence[float]) -> np.ndarray:
    a, b, g = theta
    return _rz(g) @ _rx(b) @ _ry(a)


def euler_jacobian(theta: Sequence[float]) -> np.ndarray:
    """Partial derivatives of ``euler_to_matrix`` w.r.t. (alpha, beta, gamma), shape (3, 3, 3)."""
    a, b, g = theta
    rz, rx, ry = _rz(g), _rx(b), _ry(a)
    return np.stack([rz @ rx @ _dry(a), rz @ _drx(b) @ ry, _drz(g) @ rx @ ry])


def matrix_to_euler(R: np.ndarray) -> np.ndarray:
    """Inverse of ``euler_to_matrix`` with elevation in [-pi/2, pi/2]."""
    R = np.asarray(R)
    beta = math.asin(max(-1.0, min(1.0, R[2, 1])))
    alpha = math.atan2(-R[2, 0], R[2, 2])
    gamma = math.atan2(-R[0, 1], R[1, 1])
    return wrap_angle(np.array([alpha, beta, gamma]))


def geodesic_distance(R1: np.ndarray, R2: np.ndarray) -> float:
    """Rotation angle of ``R1^T R2`` in radians."""
    c = (np.trace(np.asarray(R1).T @ np.asarray(R2)) - 1.0) / 2.0
    return float(math.acos(max(-1.0, min(1.0, c))))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def allocentric_decompose(R: np.ndarray, camera: Camera, center_px) -> np.ndarray:
    return ray_rotation(camera, center_px).T @ np.asarray(R)


def allocentric_compose(R_v: np.ndarray, camera: Camera, center_px) -> np.ndarray:
    return ray_rotation(camera, center_px) @ np.asarray(R_v)


@dataclass(frozen=True)
class CarPose:
    """Pose of a car relative to the camera.

    ``theta`` holds allocentric (azimuth, elevation, tilt) in radians,
    ``center_px`` the projection of the car center and ``distance`` the range
    to the center along that ray, in meters.
    """

    theta: Tuple[float, float, float]
    center_px: Tuple[float, float]
    distance: float

    def __post_init__(self):
        if not self.distance > 0:
            raise ValueError("distance must be positive")
        object.__setattr__(self, "theta", tuple(float(x) for x in wrap_angle(np.asarray(self.theta, float))))
        object.__setattr__(self, "center_px", tuple(float(x) for x in self.center_px))
        object.__setattr__(self, "distance", float(self.distance))

    def R_v(self) -> np.ndarray:
        return euler_to_matrix(self.theta)

    def R_c(self, camera: Camera) -> np.ndarray:
        return ray_rotation(camera, self.center_px)

    def rotation(self, camera: Camera) -> np.ndarray:
        return self.R_c(camera) @ self.R_v()

    def translation(self, camera: Camera) -> np.ndarray:
        return self.R_c(camera) @ np.array([0.0, 0.0, self.distance])

    def egocentric_theta(self, camera: Camera) -> np.ndarray:
        return matrix_to_euler(self.rotation(camera))

    @classmethod
    def from_egocentric(cls, R: np.ndarray, T: np.ndarray, camera: Camera) -> "CarPose":
        c = project(camera, T)
        R_v = allocentric_decompose(R, camera, c)
        return cls(tuple(matrix_to_euler(R_v)), tuple(c), float(np.linalg.norm(T)))

    def to_dict(self) -> dict:
        return {"theta": list(self.theta), "center_px": list(self.center_px),
                "distance": self.distance}

    @classmethod
    def from_dict(cls, d: dict) -> "CarPose":
        return cls(tuple(d["theta"]), tuple(d["center_px"]), float(d["distance"]))


# --------------------------------------------------------------------------
# Bin + offset coding
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BinCodec:
    """Bin layout for one scalar.

    ``kind="angle"``: circular bins of equal width ``2 * half_width``.
    ``kind="distance"``: contiguous bins between consecutive ``edges``; each
    center is the midpoint (mean value) of its bin.
    """

    bin_centers: Tuple[float, ...]
    kind: str
    half_width: float = 0.0
    edges: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.kind not in ("angle", "distance"):
            raise ValueError(f"unknown codec kind {self.kind!r}")
        c = np.asarray(self.bin_centers)
        if np.any(np.diff(c) <= 0):
            raise ValueError("bin centers must be strictly increasing")
        if self.kind == "distance":
            e = np.asarray(self.edges)
            if e is None or len(e) != len(c) + 1 or np.any(np.diff(e) <= 0):
                raise ValueError("distance codec needs n+1 increasing edges")
            if np.any(c <= e[:-1]) or np.any(c >= e[1:]):
                raise ValueError("each center must lie inside its bin")
        else:
            if not np.isclose(2 * self.half_width * len(c), TWO_PI):
                raise ValueError("angle bins must tile the circle")

    @property
    def n_bins(self) -> int:
        return len(self.bin_centers)

    @property
    def range(self) -> Tuple[float, float]:
        if self.kind == "angle":
            return (-math.pi, math.pi)
        return (self.edges[0], self.edges[-1])

    def bin_index(self, value: float) -> int:
        c = np.asarray(self.bin_centers)
        if self.kind == "angle":
            return int(np.argmin(np.abs(wrap_angle(value - c))))
        lo, hi = self.edges[0], self.edges[-1]
        if not (lo <= value <= hi):
            raise OutOfRange(f"distance {value} outside [{lo}, {hi}]")
        return int(min(np.searchsorted(self.edges, value, side="right") - 1, self.n_bins - 1))

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "bin_centers": list(self.bin_centers)}
        if self.kind == "angle":
            d["half_width"] = self.half_width
        else:
            d["edges"] = list(self.edges)
        return d


def angle_codec(n_bins: int = 8) -> BinCodec:
    centers = np.sort(wrap_angle(np.arange(n_bins) * TWO_PI / n_bins))
    return BinCodec(tuple(centers.tolist()), "angle", half_width=math.pi / n_bins)


def distance_codec(n_bins: int = 32, d_min: float = 3.0, d_max: float = 150.0) -> BinCodec:
    edges = np.geomspace(d_min, d_max, n_bins + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return BinCodec(tuple(centers.tolist()), "distance", edges=tuple(edges.tolist()))


@dataclass(frozen=True)
class BinEncoding:
    """Per-bin confidences plus offsets.

    Angle offsets are (n, 2) rows of (sin delta, cos delta); distance offsets
    are an (n,) vector of delta-d.
    """

    confidences: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        conf = np.asarray(self.confidences, dtype=np.float64)
        if not np.all(np.isfinite(conf)):
            raise ValueError("confidences must be finite")
        object.__setattr__(self, "confidences", conf)
        object.__setattr__(self, "offsets", np.asarray(self.offsets, dtype=np.float64))


def encode_bins(value: float, codec: BinCodec) -> BinEncoding:
    b = codec.bin_index(value)
    conf = np.zeros(codec.n_bins)
    conf[b] = 1.0
    c = np.asarray(codec.bin_centers)
    if codec.kind == "angle":
        delta = wrap_angle(value - c)
        return BinEncoding(conf, np.stack([np.sin(delta), np.cos(delta)], axis=1))
    return BinEncoding(conf, value - c)


def decode_bins(enc: BinEncoding, codec: BinCodec, soft: bool = False) -> float:
    """Hard decode: center of the argmax bin plus its offset.

    With ``soft=True`` the per-bin estimates are averaged with softmax
    weights (circularly for angles).
    """
    c = np.asarray(codec.bin_centers)
    if codec.kind == "angle":
        per_bin = c + np.arctan2(enc.offsets[:, 0], enc.offsets[:, 1])
    else:
        per_bin = c + enc.offsets
    if not soft:
        b = int(np.argmax(enc.confidences))
        v = per_bin[b]
        return wrap_angle(v) if codec.kind == "angle" else float(v)
    z = enc.confidences - enc.confidences.max()
    wts = np.exp(z) / np.exp(z).sum()
    if codec.kind == "angle":
        return float(math.atan2(np.dot(wts, np.sin(per_bin)), np.dot(wts, np.cos(per_bin))))
    return float(np.dot(wts, per_bin))
