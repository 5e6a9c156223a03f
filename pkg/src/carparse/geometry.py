"""Mesh and point-cloud types, uniform surface re-sampling and nearest-neighbor queries."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Tuple

import numba
import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyInput, FormatError
from .taxonomy import full_taxonomy

logger = logging.getLogger(__name__)

DEFAULT_SPACING = 0.01  # meters
WELD_TOLERANCE = 1e-6


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CarDimensions:
    wheelbase: float
    width: float
    height: float
    length: float

    def __post_init__(self):
        for name in ("wheelbase", "width", "height", "length"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"dimension {name} must be positive, got {v}")

    def as_dict(self) -> dict:
        return {"wheelbase": self.wheelbase, "width": self.width,
                "height": self.height, "length": self.length}


@dataclass(frozen=True, eq=False)
class LabeledMesh:
    """Triangle mesh with one part label per face.

    Coordinates are meters in the car frame (x right, y down, z forward).
    """

    vertices: np.ndarray
    faces: np.ndarray
    face_part_labels: np.ndarray
    dimensions: CarDimensions
    category_id: int = 0
    n_labels: int = field(default=len(full_taxonomy()), repr=False)

    def __post_init__(self):
        v = _frozen(self.vertices, np.float64).reshape(-1, 3)
        f = _frozen(self.faces, np.int64).reshape(-1, 3)
        lab = _frozen(self.face_part_labels, np.int64).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite vertex coordinates")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        if len(lab) != len(f):
            raise ValueError("need exactly one part label per face")
        if lab.size and (lab.min() < 0 or lab.max() >= self.n_labels):
            raise ValueError("part label outside the active taxonomy")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "face_part_labels", lab)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        tri = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def surface_area(self) -> float:
        return float(self.face_areas().sum())

    def with_vertices(self, vertices: np.ndarray) -> "LabeledMesh":
        return LabeledMesh(vertices, self.faces, self.face_part_labels, self.dimensions,
                           self.category_id, self.n_labels)


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    labels: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        p = _frozen(self.points, np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", p)
        if self.labels is not None:
            lab = _frozen(self.labels, np.int64).reshape(-1)
            if len(lab) != len(p):
                raise ValueError("labels length must match points length")
            object.__setattr__(self, "labels", lab)
        if self.normals is not None:
            n = _frozen(self.normals, np.float64).reshape(-1, 3)
            if len(n) != len(p):
                raise ValueError("normals length must match points length")
            if len(n) and np.max(np.abs(np.linalg.norm(n, axis=1) - 1.0)) > 1e-6:
                raise ValueError("normals must be unit length")
            object.__setattr__(self, "normals", n)

    def __len__(self) -> int:
        return len(self.points)

    @cached_property
    def tree(self) -> cKDTree:
        if len(self.points) == 0:
            raise EmptyInput("empty point cloud")
        return cKDTree(self.points)

    def query(self, queries: np.ndarray, k: int = 1) -> Tuple[np.ndarray, np.ndarray]:
        """Batched exact nearest-neighbor lookup; returns (distances, indices)."""
        return self.tree.query(np.asarray(queries, dtype=np.float64), k=k)

    def transformed(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(points, self.labels, None)


def nearest_neighbor(query, cloud: PointCloud) -> Tuple[int, float]:
    """Index and Euclidean distance of the cloud point closest to ``query``."""
    if len(cloud) == 0:
        raise EmptyInput("empty point cloud")
    d, i = cloud.query(np.asarray(query, dtype=np.float64).reshape(3))
    return int(i), float(d)


def brute_force_nearest(query, points: np.ndarray) -> Tuple[int, float]:
    d = np.linalg.norm(np.asarray(points) - np.asarray(query), axis=1)
    i = int(np.argmin(d))
    return i, float(d[i])


def clean_mesh(vertices: np.ndarray, faces: np.ndarray, labels: np.ndarray,
               tol: float = WELD_TOLERANCE):
    """Weld vertices closer than ``tol`` and drop zero-area faces.

    Welding snaps to a ``tol`` grid, so two points within ``tol`` that straddle
    a grid boundary may survive as separate vertices; that is harmless here.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    keys = np.round(vertices / tol).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    new_vertices = vertices[first]
    new_faces = inverse[faces]
    tri = new_vertices[new_faces]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    distinct = ((new_faces[:, 0] != new_faces[:, 1]) & (new_faces[:, 1] != new_faces[:, 2])
                & (new_faces[:, 0] != new_faces[:, 2]))
    keep = distinct & (area > 0)
    return new_vertices, new_faces[keep], labels[keep]


@numba.njit(cache=True)
def _hash_slot(key, mask):
    h = key ^ (key >> 29)
    h = (h * 0xBF58476D1CE4E5B) & 0x7FFFFFFFFFFFFFFF
    h = h ^ (h >> 31)
    h = (h * 0x94D049BB133111) & 0x7FFFFFFFFFFFFFFF
    h = h ^ (h >> 27)
    return h & mask


@numba.njit(cache=True)
def _dart_throw(candidates, min_dist, target):
    """Sequential rejection sampling: keep a candidate iff no kept point is within min_dist."""
    cell = min_dist / np.sqrt(3.0)
    size = 1
    while size < 4 * target + 16:
        size *= 2
    mask = size - 1
    table_keys = np.full(size, -1, dtype=np.int64)
    table_vals = np.full(size, -1, dtype=np.int64)
    lo = np.empty(3)
    for a in range(3):
        lo[a] = candidates[:, a].min() - 3 * cell
    kept = np.empty(target, dtype=np.int64)
    n_kept = 0
    r2 = min_dist * min_dist
    stride = 1 << 20
    for ci in range(candidates.shape[0]):
        if n_kept >= target:
            break
        p = candidates[ci]
        ix = int((p[0] - lo[0]) / cell)
        iy = int((p[1] - lo[1]) / cell)
        iz = int((p[2] - lo[2]) / cell)
        ok = True
        for dx in range(-2, 3):
            if not ok:
                break
            for dy in range(-2, 3):
                if not ok:
                    break
                for dz in range(-2, 3):
                    key = ((ix + dx) * stride + (iy + dy)) * stride + (iz + dz)
                    s = _hash_slot(key, mask)
                    while table_keys[s] != -1:
                        if table_keys[s] == key:
                            q = candidates[table_vals[s]]
                            d0 = q[0] - p[0]
                            d1 = q[1] - p[1]
                            d2 = q[2] - p[2]
                            if d0 * d0 + d1 * d1 + d2 * d2 < r2:
                                ok = False
                            break
                        s = (s + 1) & mask
                    if not ok:
                        break
        if ok:
            key = (ix * stride + iy) * stride + iz
            s = _hash_slot(key, mask)
            while table_keys[s] != -1:
                s = (s + 1) & mask
            table_keys[s] = key
            table_vals[s] = ci
            kept[n_kept] = ci
            n_kept += 1
    return kept[:n_kept]


# Minimum distance between kept samples, as a fraction of the requested spacing.
# Random sequential packing saturates near 0.70 / d^2, so an exclusion of
# 0.8 * spacing still reaches the area / spacing^2 target count.
EXCLUSION_FRACTION = 0.8


def remesh_uniform(mesh: LabeledMesh, spacing: float = DEFAULT_SPACING,
                   seed: int = 0) -> PointCloud:
    """Resample the surface of ``mesh`` into roughly evenly spaced labeled points.

    Samples are drawn area-weighted and thinned by dart throwing with a
    minimum separation of ``EXCLUSION_FRACTION * spacing`` until the count
    reaches ``area / spacing**2``. Each sample carries the part label and unit
    normal of its source face.
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    if mesh.n_faces == 0:
        raise EmptyInput("mesh has no faces")
    tri = mesh.triangles()
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    twice_area = np.linalg.norm(cross, axis=1)
    valid = twice_area > 1e-18
    if not np.any(valid):
        raise EmptyInput("every face is degenerate")
    areas = np.where(valid, 0.5 * twice_area, 0.0)
    total = areas.sum()
    target = max(1, int(round(total / spacing ** 2)))
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(areas) / total
    normals = np.zeros_like(cross)
    normals[valid] = cross[valid] / twice_area[valid, None]

    kept_points, kept_faces = [], []
    remaining = target
    min_dist = EXCLUSION_FRACTION * spacing
    pool_points = np.empty((0, 3))
    pool_faces = np.empty(0, dtype=np.int64)
    for _ in range(12):
        n_cand = max(64, 6 * target)
        fidx = np.searchsorted(cdf, rng.random(n_cand), side="right").clip(0, len(cdf) - 1)
        r1 = np.sqrt(rng.random(n_cand))
        r2 = rng.random(n_cand)
        t = tri[fidx]
        cand = ((1 - r1)[:, None] * t[:, 0] + (r1 * (1 - r2))[:, None] * t[:, 1]
                + (r1 * r2)[:, None] * t[:, 2])
        # re-run with previously kept points first so they are never displaced
        allp = np.concatenate([pool_points, cand])
        allf = np.concatenate([pool_faces, fidx])
        kept = _dart_throw(allp, min_dist, target)
        pool_points, pool_faces = allp[kept], allf[kept]
        remaining = target - len(kept)
        if remaining <= 0:
            break
    kept_points, kept_faces = pool_points, pool_faces
    if remaining > 0:
        logger.debug("remesh_uniform: reached %d of %d samples", len(kept_points), target)

    labels = mesh.face_part_labels[kept_faces]
    # every label with nonzero area keeps at least one representative sample
    present = set(np.unique(labels).tolist())
    extra_p, extra_f = [], []
    for lab in np.unique(mesh.face_part_labels[valid]):
        if lab in present:
            continue
        cand_faces = np.flatnonzero(valid & (mesh.face_part_labels == lab))
        f = cand_faces[np.argmax(areas[cand_faces])]
        extra_p.append(tri[f].mean(axis=0))
        extra_f.append(f)
    if extra_p:
        kept_points = np.concatenate([kept_points, np.array(extra_p)])
        kept_faces = np.concatenate([kept_faces, np.array(extra_f, dtype=np.int64)])
    return PointCloud(kept_points, mesh.face_part_labels[kept_faces], normals[kept_faces])


def sample_surface_area_weighted(mesh: LabeledMesh, count: int, seed: int = 0) -> PointCloud:
    """Plain i.i.d. area-weighted surface samples (no spacing control)."""
    tri = mesh.triangles()
    areas = mesh.face_areas()
    rng = np.random.default_rng(seed)
    fidx = rng.choice(len(areas), size=count, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    t = tri[fidx]
    pts = ((1 - r1)[:, None] * t[:, 0] + (r1 * (1 - r2))[:, None] * t[:, 1]
           + (r1 * r2)[:, None] * t[:, 2])
    return PointCloud(pts, mesh.face_part_labels[fidx])


# --------------------------------------------------------------------------
# Mesh files: Wavefront OBJ (positions + triangles) with a JSON sidecar.
#
# Sidecar keys:
#   "dimensions": {"wheelbase", "width", "height", "length"}   (meters)
#   "category_id": int
#   "groups": {"<usemtl or g name>": part_id, ...}     and/or
#   "ranges": [[first_face, last_face_exclusive, part_id], ...]
# Ranges override groups where both apply.
# --------------------------------------------------------------------------

def load_obj(path, sidecar=None) -> LabeledMesh:
    path = Path(path)
    sidecar = Path(sidecar) if sidecar else path.with_suffix(".json")
    meta = json.loads(sidecar.read_text())
    vertices, faces, face_groups = [], [], []
    group = None
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                vertices.append([float(x) for x in parts[1:4]])
            elif tag == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                if len(idx) != 3:
                    raise FormatError(f"{path}:{lineno}: only triangles are supported, got {len(idx)}-gon")
                faces.append([i - 1 if i > 0 else len(vertices) + i for i in idx])
                face_groups.append(group)
            elif tag in ("usemtl", "g", "o"):
                group = parts[1] if len(parts) > 1 else None
    if not faces:
        raise EmptyInput(f"{path}: no faces")
    labels = np.full(len(faces), -1, dtype=np.int64)
    for i, g in enumerate(face_groups):
        if g is not None and g in meta.get("groups", {}):
            labels[i] = int(meta["groups"][g])
    for first, last, pid in meta.get("ranges", []):
        labels[int(first):int(last)] = int(pid)
    if np.any(labels < 0):
        raise FormatError(f"{path}: {int(np.sum(labels < 0))} faces have no part label")
    v, f, lab = clean_mesh(np.array(vertices), np.array(faces), labels)
    dims = CarDimensions(**meta["dimensions"])
    return LabeledMesh(v, f, lab, dims, int(meta.get("category_id", 0)))


def save_obj(mesh: LabeledMesh, path) -> None:
    """Write ``mesh`` as OBJ plus a range-based sidecar JSON."""
    path = Path(path)
    order = np.argsort(mesh.face_part_labels, kind="stable")
    faces, labels = mesh.faces[order], mesh.face_part_labels[order]
    with path.open("w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
    ranges = []
    if len(labels):
        bounds = np.flatnonzero(np.diff(labels)) + 1
        starts = np.concatenate([[0], bounds])
        ends = np.concatenate([bounds, [len(labels)]])
        ranges = [[int(s), int(e), int(labels[s])] for s, e in zip(starts, ends)]
    meta = {"dimensions": mesh.dimensions.as_dict(), "category_id": mesh.category_id,
            "ranges": ranges}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1))
