"""Randomized street scenes and their label, instance and depth ground truth.

World frame: ground plane z = 0, z up. The camera sits at (0, 0, h) looking
along +y, pitched down by ``pitch`` radians. Cars stand on the ground with
their y axis pointing down and yaw ``psi`` measured from +x.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numba
import numpy as np
from PIL import Image

from .errors import ConfigError, FormatError, PlacementFailure
from .pose import Camera, CarPose, default_camera
from .shape_space import ShapeSpace

logger = logging.getLogger(__name__)

NEAR_PLANE = 0.1


def _range(v, name, lo_bound=-np.inf):
    lo, hi = v
    if not (lo_bound <= lo <= hi):
        raise ConfigError(f"{name}: bad range {v}")
    return (lo, hi)


@dataclass(frozen=True)
class SceneConfig:
    rng_seed: int = 0
    n_cars: Tuple[int, int] = (5, 15)
    occluder_count: Tuple[int, int] = (0, 3)
    light_count: Tuple[int, int] = (5, 20)
    camera: Camera = field(default_factory=default_camera)
    camera_height: Tuple[float, float] = (1.4, 1.8)
    camera_pitch: Tuple[float, float] = (0.0, 0.08)     # radians, positive looks down
    forward_range: Tuple[float, float] = (6.0, 60.0)    # meters ahead of the camera
    fov_fraction: float = 0.85                          # of the half field of view
    shape_clip: float = 2.0                             # |s_k| bound in std units
    gap: float = 0.1                                    # minimum footprint clearance
    max_attempts: int = 200

    def __post_init__(self):
        _range(self.n_cars, "n_cars", 0)
        _range(self.occluder_count, "occluder_count", 0)
        _range(self.light_count, "light_count", 0)
        _range(self.camera_height, "camera_height", 0.0)
        _range(self.camera_pitch, "camera_pitch", -math.pi / 4)
        _range(self.forward_range, "forward_range", 1.0)
        if not 0 < self.fov_fraction <= 1:
            raise ConfigError("fov_fraction must lie in (0, 1]")
        if self.max_attempts < 1:
            raise ConfigError("max_attempts must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["camera"] = self.camera.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scene config keys: {sorted(unknown)}")
        kw = dict(d)
        if "camera" in kw:
            kw["camera"] = Camera.from_dict(kw["camera"])
        for k, v in kw.items():
            if isinstance(v, list):
                kw[k] = tuple(v)
        return cls(**kw)


# --------------------------------------------------------------------------
# Geometry helpers
# --------------------------------------------------------------------------

def world_to_camera(height: float, pitch: float) -> Tuple[np.ndarray, np.ndarray]:
    """Rotation (rows = camera axes in world) and camera center in world."""
    s, c = math.sin(pitch), math.cos(pitch)
    R = np.array([[1.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])
    return R, np.array([0.0, 0.0, height])


def ground_plane(height: float, pitch: float) -> Tuple[np.ndarray, float]:
    """Up normal ``n`` in camera coordinates; world height of camera point X is ``n @ X + height``."""
    R, _ = world_to_camera(height, pitch)
    return R @ np.array([0.0, 0.0, 1.0]), float(height)


def car_axes(yaw: float) -> np.ndarray:
    """Car axes as world columns (x right, y down, z forward)."""
    s, c = math.sin(yaw), math.cos(yaw)
    return np.array([[s, 0.0, c], [-c, 0.0, s], [0.0, -1.0, 0.0]])


def polygons_overlap(a: np.ndarray, b: np.ndarray, gap: float = 0.0) -> bool:
    """Separating-axis test for convex polygons given as (n, 2) vertex loops.

    Polygons closer than ``gap`` along every candidate axis count as overlapping.
    """
    for poly in (a, b):
        edges = np.roll(poly, -1, axis=0) - poly
        normals = np.stack([-edges[:, 1], edges[:, 0]], axis=1)
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        pa, pb = a @ normals.T, b @ normals.T
        sep = (pa.max(axis=0) + gap < pb.min(axis=0)) | (pb.max(axis=0) + gap < pa.min(axis=0))
        if np.any(sep):
            return False
    return True


def _box_mesh(sx, sy, sz) -> Tuple[np.ndarray, np.ndarray]:
    """Axis-aligned box with base centered at the origin, outward faces."""
    x, y = sx / 2, sy / 2
    v = np.array([[-x, -y, 0], [x, -y, 0], [x, y, 0], [-x, y, 0],
                  [-x, -y, sz], [x, -y, sz], [x, y, sz], [-x, y, sz]], float)
    f = np.array([[0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7], [0, 1, 5], [0, 5, 4],
                  [1, 2, 6], [1, 6, 5], [2, 3, 7], [2, 7, 6], [3, 0, 4], [3, 4, 7]])
    return v, f


def _cylinder_mesh(r, h, n=12) -> Tuple[np.ndarray, np.ndarray]:
    a = 2 * np.pi * np.arange(n) / n
    ring = np.stack([r * np.cos(a), r * np.sin(a)], axis=1)
    v = np.concatenate([np.c_[ring, np.zeros(n)], np.c_[ring, np.full(n, h)],
                        [[0, 0, 0], [0, 0, h]]])
    faces = []
    for i in range(n):
        j = (i + 1) % n
        faces += [[i, j, n + j], [i, n + j, n + i], [2 * n, j, i], [2 * n + 1, n + i, n + j]]
    return v, np.array(faces)


@dataclass(frozen=True, eq=False)
class Occluder:
    kind: str                   # "box" or "cylinder"
    vertices: np.ndarray        # world coordinates
    faces: np.ndarray
    footprint: np.ndarray       # (n, 2) convex loop on the ground

    def to_dict(self) -> dict:
        return {"kind": self.kind, "footprint": self.footprint.tolist(),
                "height": float(self.vertices[:, 2].max())}


@dataclass(frozen=True, eq=False)
class SceneInstance:
    instance_id: int
    shape: np.ndarray           # (dim,) shape parameters
    yaw: float
    world_center: np.ndarray    # (3,)
    rotation: np.ndarray        # egocentric, car -> camera
    translation: np.ndarray     # camera coordinates of the car center
    pose: CarPose
    footprint: np.ndarray       # (4, 2)

    def to_dict(self) -> dict:
        return {"instance_id": self.instance_id, "shape": self.shape.tolist(), "yaw": self.yaw,
                "world_center": self.world_center.tolist(), "rotation": self.rotation.tolist(),
                "translation": self.translation.tolist(), "pose": self.pose.to_dict(),
                "footprint": self.footprint.tolist()}


@dataclass(frozen=True, eq=False)
class Scene:
    index: int
    camera: Camera
    camera_height: float
    camera_pitch: float
    instances: List[SceneInstance]
    occluders: List[Occluder]
    lights: np.ndarray          # (n, 4): unit direction (world) and intensity
    warnings: List[str]

    def to_dict(self) -> dict:
        return {"index": self.index, "camera": self.camera.to_dict(),
                "camera_height": self.camera_height, "camera_pitch": self.camera_pitch,
                "instances": [i.to_dict() for i in self.instances],
                "occluders": [o.to_dict() for o in self.occluders],
                "lights": self.lights.tolist(), "warnings": list(self.warnings)}


def _footprint_rect(cx, cy, yaw, x_range, z_range) -> np.ndarray:
    ax = car_axes(yaw)
    xa, za = ax[:2, 0], ax[:2, 2]
    corners = [(x_range[0], z_range[0]), (x_range[1], z_range[0]),
               (x_range[1], z_range[1]), (x_range[0], z_range[1])]
    return np.array([[cx, cy] + x * xa + z * za for x, z in corners])


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _sample_ground_point(rng, cfg: SceneConfig) -> Tuple[float, float]:
    cam = cfg.camera
    half_fov = math.atan2(min(cam.cx, cam.width - cam.cx), cam.fx) * cfg.fov_fraction
    lo, hi = cfg.forward_range
    # area-uniform over the wedge
    r = math.sqrt(rng.uniform(lo * lo, hi * hi))
    phi = rng.uniform(-half_fov, half_fov)
    return r * math.sin(phi), r * math.cos(phi)


def place_scene(cfg: SceneConfig, space: ShapeSpace, index: int = 0,
                strict: bool = False) -> Scene:
    """Sample cars and occluders on the ground with pairwise clear footprints.

    A car or occluder that cannot be placed after ``max_attempts`` tries is
    dropped with a warning; ``strict`` raises PlacementFailure instead.
    """
    rng = scene_rng(cfg.rng_seed, index)
    height = float(rng.uniform(*cfg.camera_height))
    pitch = float(rng.uniform(*cfg.camera_pitch))
    R_wc, C_w = world_to_camera(height, pitch)
    n_cars = int(rng.integers(cfg.n_cars[0], cfg.n_cars[1] + 1))
    n_occ = int(rng.integers(cfg.occluder_count[0], cfg.occluder_count[1] + 1))
    n_lights = int(rng.integers(cfg.light_count[0], cfg.light_count[1] + 1))
    footprints: List[np.ndarray] = []
    warnings: List[str] = []

    def free(poly):
        return not any(polygons_overlap(poly, q, cfg.gap) for q in footprints)

    def fail(what):
        msg = f"scene {index}: could not place {what} after {cfg.max_attempts} attempts"
        if strict:
            raise PlacementFailure(msg)
        logger.warning(msg)
        warnings.append(msg)

    instances: List[SceneInstance] = []
    for _ in range(n_cars):
        s = np.clip(rng.normal(size=space.dim), -cfg.shape_clip, cfg.shape_clip)
        V = space.vertices(s)
        x_rng = (V[:, 0].min(), V[:, 0].max())
        z_rng = (V[:, 2].min(), V[:, 2].max())
        bottom = V[:, 1].max()
        placed = False
        for _attempt in range(cfg.max_attempts):
            gx, gy = _sample_ground_point(rng, cfg)
            yaw = float(rng.uniform(-math.pi, math.pi))
            fp = _footprint_rect(gx, gy, yaw, x_rng, z_rng)
            if free(fp):
                placed = True
                break
        if not placed:
            fail("car")
            continue
        footprints.append(fp)
        center_w = np.array([gx, gy, bottom])
        R = R_wc @ car_axes(yaw)
        T = R_wc @ (center_w - C_w)
        pose = CarPose.from_egocentric(R, T, cfg.camera)
        instances.append(SceneInstance(len(instances) + 1, s, yaw, center_w, R, T, pose, fp))

    occluders: List[Occluder] = []
    for _ in range(n_occ):
        kind = "box" if rng.uniform() < 0.5 else "cylinder"
        if kind == "box":
            dims = rng.uniform([0.3, 0.3, 0.6], [1.2, 1.2, 2.0])
            v, f = _box_mesh(*dims)
        else:
            r, h = rng.uniform(0.15, 0.5), rng.uniform(0.5, 1.9)
            v, f = _cylinder_mesh(r, h)
        placed = False
        for _attempt in range(cfg.max_attempts):
            gx, gy = _sample_ground_point(rng, cfg)
            yaw = float(rng.uniform(-math.pi, math.pi))
            c, s_ = math.cos(yaw), math.sin(yaw)
            Rz = np.array([[c, -s_, 0], [s_, c, 0], [0, 0, 1.0]])
            vw = v @ Rz.T + np.array([gx, gy, 0.0])
            base = vw[vw[:, 2] == 0][:, :2] if kind == "box" else vw[: len(v) // 2 - 1, :2]
            fp = base[:4] if kind == "box" else base
            if free(fp):
                placed = True
                break
        if not placed:
            fail("occluder")
            continue
        footprints.append(fp)
        occluders.append(Occluder(kind, vw, f, fp))

    dirs = rng.normal(size=(n_lights, 3))
    dirs[:, 2] = np.abs(dirs[:, 2])        # lights above the horizon
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    lights = np.c_[dirs, rng.uniform(0.2, 1.0, n_lights)]
    return Scene(index, cfg.camera, height, pitch, instances, occluders, lights, warnings)


def generate_scenes(cfg: SceneConfig, space: ShapeSpace, count: int, start: int = 0) -> List[Scene]:
    return [place_scene(cfg, space, start + i) for i in range(count)]


# --------------------------------------------------------------------------
# Rasterization
# --------------------------------------------------------------------------

@numba.njit(cache=True)
def _zbuffer(tris, fx, fy, cx, cy, width, height, depth, winner):
    """Z-buffer triangles (T, 3, 3) in camera coordinates into ``depth`` / ``winner``.

    Pixel (i, j) is sampled at its center (i + 0.5, j + 0.5); points on an edge
    count as inside. Depth ``1/z`` is interpolated linearly in screen space.
    Ties keep the earlier triangle.
    """
    for t in range(tris.shape[0]):
        z0, z1, z2 = tris[t, 0, 2], tris[t, 1, 2], tris[t, 2, 2]
        if z0 <= 0.1 or z1 <= 0.1 or z2 <= 0.1:
            continue
        x0 = fx * tris[t, 0, 0] / z0 + cx
        y0 = fy * tris[t, 0, 1] / z0 + cy
        x1 = fx * tris[t, 1, 0] / z1 + cx
        y1 = fy * tris[t, 1, 1] / z1 + cy
        x2 = fx * tris[t, 2, 0] / z2 + cx
        y2 = fy * tris[t, 2, 1] / z2 + cy
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0.0:
            continue
        i_lo = max(int(math.ceil(min(x0, min(x1, x2)) - 0.5)), 0)
        i_hi = min(int(math.floor(max(x0, max(x1, x2)) - 0.5)), width - 1)
        j_lo = max(int(math.ceil(min(y0, min(y1, y2)) - 0.5)), 0)
        j_hi = min(int(math.floor(max(y0, max(y1, y2)) - 0.5)), height - 1)
        inv = 1.0 / area
        for j in range(j_lo, j_hi + 1):
            py = j + 0.5
            for i in range(i_lo, i_hi + 1):
                px = i + 0.5
                w0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) * inv
                w1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) * inv
                w2 = ((x0 - px) * (y1 - py) - (x1 - px) * (y0 - py)) * inv
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                z = 1.0 / (w0 / z0 + w1 / z1 + w2 / z2)
                if z < depth[j, i]:
                    depth[j, i] = z
                    winner[j, i] = t


@dataclass(frozen=True, eq=False)
class SceneGeometry:
    """All scene triangles in camera coordinates with per-triangle labels."""

    triangles: np.ndarray       # (T, 3, 3)
    part: np.ndarray            # (T,) full part id + 1, 0 for non-car geometry
    instance: np.ndarray        # (T,) instance id, 0 for non-car geometry
    normals_world: np.ndarray   # (T, 3) for shading


def scene_geometry(scene: Scene, space: ShapeSpace, only: Optional[int] = None) -> SceneGeometry:
    if space.faces is None:
        raise ValueError("shape space carries no template faces")
    R_wc, C_w = world_to_camera(scene.camera_height, scene.camera_pitch)
    tris, parts, insts = [], [], []
    for inst in scene.instances:
        if only is not None and inst.instance_id != only:
            continue
        X = space.vertices(inst.shape) @ inst.rotation.T + inst.translation
        tris.append(X[space.faces])
        parts.append(space.face_part_labels + 1)
        insts.append(np.full(len(space.faces), inst.instance_id))
    if only is None:
        for occ in scene.occluders:
            X = (occ.vertices - C_w) @ R_wc.T
            tris.append(X[occ.faces])
            parts.append(np.zeros(len(occ.faces), dtype=np.int64))
            insts.append(np.zeros(len(occ.faces), dtype=np.int64))
    if not tris:
        empty = np.zeros((0, 3, 3))
        return SceneGeometry(empty, np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3)))
    T = np.concatenate(tris)
    n_cam = np.cross(T[:, 1] - T[:, 0], T[:, 2] - T[:, 0])
    n_cam /= np.maximum(np.linalg.norm(n_cam, axis=1, keepdims=True), 1e-300)
    return SceneGeometry(T, np.concatenate(parts), np.concatenate(insts), n_cam @ R_wc)


def zbuffer(geom: SceneGeometry, camera: Camera) -> Tuple[np.ndarray, np.ndarray]:
    depth = np.full((camera.height, camera.width), np.inf)
    winner = np.full((camera.height, camera.width), -1, dtype=np.int64)
    if len(geom.triangles):
        _zbuffer(np.ascontiguousarray(geom.triangles, dtype=np.float64), camera.fx, camera.fy,
                 camera.cx, camera.cy, camera.width, camera.height, depth, winner)
    return depth, winner


def raycast(geom: SceneGeometry, camera: Camera, rows: Optional[Sequence[int]] = None
            ) -> Tuple[np.ndarray, np.ndarray]:
    """Per-pixel ray/triangle intersection (Moller-Trumbore); the reference renderer."""
    H, W = camera.height, camera.width
    depth = np.full((H, W), np.inf)
    winner = np.full((H, W), -1, dtype=np.int64)
    T = geom.triangles
    keep = np.all(T[:, :, 2] > NEAR_PLANE, axis=1)
    idx = np.nonzero(keep)[0]
    T = T[keep]
    if len(T) == 0:
        return depth, winner
    v0 = T[:, 0]
    e1 = T[:, 1] - v0
    e2 = T[:, 2] - v0
    # conservative row culling by projected vertical extent
    yp = camera.fy * T[:, :, 1] / T[:, :, 2] + camera.cy
    y_lo, y_hi = yp.min(axis=1) - 1.0, yp.max(axis=1) + 1.0
    u_dir = (np.arange(W) + 0.5 - camera.cx) / camera.fx
    all_v0, all_e1, all_e2, all_idx = v0, e1, e2, idx
    for j in (range(H) if rows is None else rows):
        m = (y_lo <= j + 0.5) & (y_hi >= j + 0.5)
        if not np.any(m):
            continue
        v0, e1, e2, idx = all_v0[m], all_e1[m], all_e2[m], all_idx[m]
        d = np.stack([u_dir, np.full(W, (j + 0.5 - camera.cy) / camera.fy), np.ones(W)], axis=1)
        p = np.cross(d[:, None, :], e2[None])                  # (W, T, 3)
        det = np.einsum("wtk,tk->wt", p, e1)
        ok = det != 0
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        s = -v0                                                # ray origin at 0
        a = np.einsum("wtk,tk->wt", p, s) * inv
        q = np.cross(s, e1)                                    # (T, 3)
        b = np.einsum("wk,tk->wt", d, q) * inv
        t = np.einsum("tk,tk->t", e2, q)[None] * inv
        hit = ok & (a >= 0) & (b >= 0) & (a + b <= 1) & (t > 0)
        t = np.where(hit, t, np.inf)
        best = np.argmin(t, axis=1)
        tb = t[np.arange(W), best]
        has = np.isfinite(tb)
        depth[j, has] = tb[has]                                # direction has unit z, so t is depth
        winner[j, has] = idx[best[has]]
    return depth, winner


@dataclass(frozen=True, eq=False)
class LabelMaps:
    part_map: np.ndarray        # (H, W) uint16, full part id + 1, 0 background
    instance_map: np.ndarray    # (H, W) uint16, 0 background
    depth_map: np.ndarray       # (H, W) float64 meters, inf where nothing was hit
    records: List[dict]
    camera: Camera

    def check(self) -> None:
        if np.any((self.part_map != 0) & (self.instance_map == 0)):
            raise AssertionError("part pixel without instance id")
        if not np.all(np.isfinite(self.depth_map[self.instance_map != 0])):
            raise AssertionError("instance pixel without depth")


def rasterize(scene: Scene, space: ShapeSpace, camera: Optional[Camera] = None,
              resolution: Optional[Tuple[int, int]] = None, visibility: bool = True) -> LabelMaps:
    """Z-buffered label, instance and depth maps plus per-instance records.

    ``resolution`` is (width, height) and rescales the scene camera.
    Visibility is visible pixels over the pixels of a solo render.
    """
    cam = camera or scene.camera
    if resolution is not None:
        cam = cam.resized(*resolution)
    geom = scene_geometry(scene, space)
    depth, winner = zbuffer(geom, cam)
    hit = winner >= 0
    part = np.zeros(depth.shape, dtype=np.uint16)
    inst = np.zeros(depth.shape, dtype=np.uint16)
    part[hit] = geom.part[winner[hit]]
    inst[hit] = geom.instance[winner[hit]]
    counts = np.bincount(inst.ravel(), minlength=len(scene.instances) + 1)
    records = []
    for ins in scene.instances:
        rec = {"instance_id": ins.instance_id, "pose": ins.pose.to_dict(),
               "shape": ins.shape.tolist(), "translation": ins.translation.tolist(),
               "rotation": ins.rotation.tolist(), "visible_pixels": int(counts[ins.instance_id])}
        if visibility:
            _, solo = zbuffer(scene_geometry(scene, space, only=ins.instance_id), cam)
            full = int(np.count_nonzero(solo >= 0))
            rec["unoccluded_pixels"] = full
            rec["visibility"] = rec["visible_pixels"] / full if full else 0.0
        records.append(rec)
    return LabelMaps(part, inst, depth, records, cam)


def shade_preview(scene: Scene, space: ShapeSpace, camera: Optional[Camera] = None) -> np.ndarray:
    """Flat Lambertian gray image (uint8) lit by the scene lights."""
    cam = camera or scene.camera
    geom = scene_geometry(scene, space)
    _, winner = zbuffer(geom, cam)
    n = geom.normals_world
    light = 0.15 + np.clip(n @ scene.lights[:, :3].T, 0, None) @ scene.lights[:, 3]
    light = np.clip(light / max(scene.lights[:, 3].sum(), 1e-9) * 1.5, 0, 1)
    img = np.full(winner.shape, 0.35)
    hit = winner >= 0
    img[hit] = light[winner[hit]]
    return (img * 255).astype(np.uint8)


# --------------------------------------------------------------------------
# Statistics and I/O
# --------------------------------------------------------------------------

def pose_stats(azimuths, distances, azimuth_bins: int = 36,
               distance_edges: Optional[np.ndarray] = None) -> dict:
    """Histograms of allocentric azimuth and center distance."""
    az = np.asarray(azimuths, dtype=np.float64)
    dist = np.asarray(distances, dtype=np.float64)
    az_edges = np.linspace(-np.pi, np.pi, azimuth_bins + 1)
    if distance_edges is None:
        distance_edges = np.linspace(0.0, 100.0, 21)
    return {"n_cars": int(len(az)),
            "azimuth": {"edges": az_edges.tolist(), "counts": np.histogram(az, az_edges)[0].tolist()},
            "distance": {"edges": list(map(float, distance_edges)),
                         "counts": np.histogram(dist, distance_edges)[0].tolist()}}


def dataset_stats(scenes: Sequence[Scene], azimuth_bins: int = 36,
                  distance_edges: Optional[np.ndarray] = None) -> dict:
    """Pose histograms over all cars of ``scenes``."""
    if len(scenes) == 0:
        raise ValueError("need at least one scene")
    return pose_stats([i.pose.theta[0] for s in scenes for i in s.instances],
                      [i.pose.distance for s in scenes for i in s.instances],
                      azimuth_bins, distance_edges)


def format_stats(stats: dict) -> str:
    lines = [f"cars: {stats['n_cars']}", "azimuth_lo,azimuth_hi,count"]
    e, c = stats["azimuth"]["edges"], stats["azimuth"]["counts"]
    lines += [f"{e[i]:.4f},{e[i + 1]:.4f},{c[i]}" for i in range(len(c))]
    lines.append("distance_lo,distance_hi,count")
    e, c = stats["distance"]["edges"], stats["distance"]["counts"]
    lines += [f"{e[i]:.1f},{e[i + 1]:.1f},{c[i]}" for i in range(len(c))]
    return "\n".join(lines)


def save_label_maps(maps: LabelMaps, scene: Scene, out_dir, stem: str) -> Dict[str, str]:
    """Write 16-bit PNG part/instance maps, raw float32 depth and ground-truth JSON.

    Depth layout: little-endian float32, row-major (height, width), inf for
    background; the dimensions are stored in the JSON.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"part": out / f"{stem}_part.png", "instance": out / f"{stem}_instance.png",
             "depth": out / f"{stem}_depth.f32", "gt": out / f"{stem}_gt.json"}
    Image.fromarray(maps.part_map.astype(np.uint16)).save(paths["part"])
    Image.fromarray(maps.instance_map.astype(np.uint16)).save(paths["instance"])
    maps.depth_map.astype("<f4").tofile(paths["depth"])
    gt = scene.to_dict()
    gt.update({"width": maps.camera.width, "height": maps.camera.height,
               "render_camera": maps.camera.to_dict(), "records": maps.records})
    with open(paths["gt"], "w") as fh:
        json.dump(gt, fh, indent=1)
    return {k: str(v) for k, v in paths.items()}


def load_label_maps(out_dir, stem: str) -> Tuple[LabelMaps, dict]:
    d = Path(out_dir)
    try:
        gt = json.load(open(d / f"{stem}_gt.json"))
        part = np.array(Image.open(d / f"{stem}_part.png")).astype(np.uint16)
        inst = np.array(Image.open(d / f"{stem}_instance.png")).astype(np.uint16)
        depth = np.fromfile(d / f"{stem}_depth.f32", dtype="<f4").astype(np.float64)
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"{d / stem}: unreadable label maps ({exc})") from exc
    H, W = gt["height"], gt["width"]
    if part.shape != (H, W) or inst.shape != (H, W) or depth.size != H * W:
        raise FormatError(f"{d / stem}: map sizes disagree with the ground-truth record")
    cam = Camera.from_dict(gt["render_camera"])
    return LabelMaps(part, inst, depth.reshape(H, W), gt["records"], cam), gt
