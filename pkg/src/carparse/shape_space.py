"""Per-category PCA shape space over corresponded point sets.

Shape parameters are in standard-deviation units: component ``k`` of the
synthesized shape is ``basis[:, k] * std[k] * s[k]``, where ``std[k]`` is the
singular value of the centered data divided by ``sqrt(models - 1)``.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import FormatError, InconsistentTopology
from .geometry import LabeledMesh, CarDimensions, PointCloud

logger = logging.getLogger(__name__)

SHAPE_DIM = 22
MAGIC = b"CPSS"
VERSION = 1


@dataclass(frozen=True, eq=False)
class ShapeSpace:
    category_id: int
    mean_shape: np.ndarray      # (N, 3)
    basis: np.ndarray           # (3N, dim), orthonormal columns
    singular_values: np.ndarray  # (dim,) per-component standard deviation, descending
    n_effective: int            # components backed by data; the rest are padding
    point_labels: Optional[np.ndarray] = None
    faces: Optional[np.ndarray] = None
    face_part_labels: Optional[np.ndarray] = None

    @property
    def N(self) -> int:
        return len(self.mean_shape)

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    @property
    def padded(self) -> bool:
        return self.n_effective < self.dim

    def vertices(self, params) -> np.ndarray:
        s = np.asarray(params, dtype=np.float64)
        return self.mean_shape + (self.basis @ (s * self.singular_values)).reshape(-1, 3)

    def vertex_jacobian(self) -> np.ndarray:
        """d vertices / d params, shape (N, 3, dim)."""
        return (self.basis * self.singular_values).reshape(self.N, 3, self.dim)

    def mesh(self, params, dimensions: Optional[CarDimensions] = None) -> LabeledMesh:
        if self.faces is None:
            raise ValueError("shape space carries no template faces")
        v = self.vertices(params)
        if dimensions is None:
            ext = v.max(axis=0) - v.min(axis=0)
            dimensions = CarDimensions(wheelbase=0.62 * ext[2], width=ext[0], height=ext[1], length=ext[2])
        return LabeledMesh(v, self.faces, self.face_part_labels, dimensions, self.category_id)


def _orthonormal_completion(Q: np.ndarray, total: int, seed: int = 0) -> np.ndarray:
    """Extend orthonormal columns ``Q`` (D, r) to ``total`` orthonormal columns."""
    D, r = Q.shape
    if r >= total:
        return Q[:, :total]
    rng = np.random.default_rng(seed)
    extra = rng.normal(size=(D, total - r))
    extra -= Q @ (Q.T @ extra)
    extra -= Q @ (Q.T @ extra)
    E, _ = np.linalg.qr(extra)
    out = np.concatenate([Q, E], axis=1)
    # one more projection pass keeps ||B^T B - I|| at round-off level
    out, _ = np.linalg.qr(out)
    signs = np.sign(np.sum(out[:, :r] * Q, axis=0))
    out[:, :r] *= np.where(signs == 0, 1, signs)
    return out


def _as_points(m) -> np.ndarray:
    if isinstance(m, PointCloud):
        return m.points
    if isinstance(m, LabeledMesh):
        return m.vertices
    return np.asarray(m, dtype=np.float64).reshape(-1, 3)


def build_shape_space(models: Sequence, dim: int = SHAPE_DIM, category_id: int = 0,
                      point_labels=None, faces=None, face_part_labels=None,
                      rank_tol: float = 1e-10) -> ShapeSpace:
    """PCA over corresponded models (identical point count and ordering).

    With fewer than ``dim + 1`` models the data span only ``models - 1``
    directions; the basis is then completed with arbitrary orthonormal
    columns whose standard deviation is zero, and ``n_effective`` records how
    many columns carry data.
    """
    if len(models) < 2:
        raise ValueError("need at least two models")
    pts = [_as_points(m) for m in models]
    n = len(pts[0])
    if any(len(p) != n for p in pts):
        raise InconsistentTopology("models must share point count and ordering")
    if point_labels is None and isinstance(models[0], PointCloud):
        point_labels = models[0].labels
    X = np.stack([p.reshape(-1) for p in pts], axis=1)        # (3N, M)
    mean = X.mean(axis=1)
    C = X - mean[:, None]
    U, S, _ = np.linalg.svd(C, full_matrices=False)
    M = X.shape[1]
    cap = min(dim, M - 1)
    if cap < dim:
        logger.warning("only %d models: shape space clamped to %d components, padded to %d",
                       M, cap, dim)
    scale = S.max() if S.size else 0.0
    rank = int(np.sum(S > rank_tol * max(scale, 1e-300))) if scale > 0 else 0
    r = min(cap, rank)
    basis = _orthonormal_completion(U[:, :r], dim)
    std = np.zeros(dim)
    std[:r] = S[:r] / np.sqrt(M - 1)
    if r == 0:
        logger.warning("all models identical: shape space is degenerate")
    return ShapeSpace(category_id, mean.reshape(-1, 3), basis, std, r,
                      None if point_labels is None else np.asarray(point_labels),
                      None if faces is None else np.asarray(faces),
                      None if face_part_labels is None else np.asarray(face_part_labels))


def synthesize_shape(space: ShapeSpace, params) -> PointCloud:
    s = np.asarray(params, dtype=np.float64)
    if s.shape != (space.dim,) or not np.all(np.isfinite(s)):
        raise ValueError(f"shape params must be {space.dim} finite values")
    return PointCloud(space.vertices(s), space.point_labels)


def project_shape(space: ShapeSpace, cloud) -> Tuple[np.ndarray, float]:
    """Least-squares shape parameters for ``cloud`` and the RMS per-point residual."""
    p = _as_points(cloud)
    if len(p) != space.N:
        raise InconsistentTopology(f"expected {space.N} points, got {len(p)}")
    coeff = space.basis.T @ (p.reshape(-1) - space.mean_shape.reshape(-1))
    params = np.zeros(space.dim)
    live = space.singular_values > 0
    params[live] = coeff[live] / space.singular_values[live]
    recon = space.vertices(params)
    rms = float(np.sqrt(np.mean(np.sum((recon - p) ** 2, axis=1))))
    return params, rms


def truncated(space: ShapeSpace, k: int) -> ShapeSpace:
    """The same space restricted to its first ``k`` components."""
    return ShapeSpace(space.category_id, space.mean_shape, space.basis[:, :k],
                      space.singular_values[:k], min(k, space.n_effective),
                      space.point_labels, space.faces, space.face_part_labels)


# --------------------------------------------------------------------------
# Binary container (little endian):
#   magic "CPSS", version u16, category u32, N u32, dim u16,
#   f64 mean[N*3], f64 basis[3N*dim] column-major, f64 std[dim],
#   u16 n_effective,
#   u32 n_point_labels, i32 point_labels[...],
#   u32 n_faces, i32 faces[n_faces*3], i32 face_part_labels[n_faces]
# --------------------------------------------------------------------------

def save_shape_space(space: ShapeSpace, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HIIH", VERSION, space.category_id, space.N, space.dim))
        fh.write(space.mean_shape.astype("<f8").tobytes())
        fh.write(space.basis.astype("<f8").tobytes(order="F"))
        fh.write(space.singular_values.astype("<f8").tobytes())
        fh.write(struct.pack("<H", space.n_effective))
        pl = np.zeros(0, dtype="<i4") if space.point_labels is None else space.point_labels.astype("<i4")
        fh.write(struct.pack("<I", len(pl)))
        fh.write(pl.tobytes())
        if space.faces is None:
            fh.write(struct.pack("<I", 0))
        else:
            fh.write(struct.pack("<I", len(space.faces)))
            fh.write(space.faces.astype("<i4").tobytes())
            fh.write(space.face_part_labels.astype("<i4").tobytes())


def load_shape_space(path) -> ShapeSpace:
    data = open(path, "rb").read()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: not a shape-space container")
    version, category, n, dim = struct.unpack_from("<HIIH", data, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 4 + struct.calcsize("<HIIH")

    def take(count, dtype):
        nonlocal off
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr.copy()

    mean = take(n * 3, "<f8").reshape(n, 3)
    basis = take(3 * n * dim, "<f8").reshape(dim, 3 * n).T.copy()
    std = take(dim, "<f8")
    (n_eff,) = struct.unpack_from("<H", data, off)
    off += 2
    (n_pl,) = struct.unpack_from("<I", data, off)
    off += 4
    point_labels = take(n_pl, "<i4").astype(np.int64) if n_pl else None
    (n_faces,) = struct.unpack_from("<I", data, off)
    off += 4
    faces = labels = None
    if n_faces:
        faces = take(n_faces * 3, "<i4").reshape(-1, 3).astype(np.int64)
        labels = take(n_faces, "<i4").astype(np.int64)
    return ShapeSpace(int(category), mean, basis, std, int(n_eff), point_labels, faces, labels)


def family_shape_space(n_models: int = 40, seed: int = 0, template=None) -> ShapeSpace:
    """Shape space of the procedural car family (template topology, labeled faces)."""
    from .carmodel import default_template, sample_family

    template = template or default_template()
    _, verts = sample_family(n_models, seed=seed, template=template)
    point_labels = _vertex_labels(template.faces, template.face_part_labels, template.n_vertices)
    return build_shape_space(verts, SHAPE_DIM, 0, point_labels, template.faces,
                             template.face_part_labels)


def _vertex_labels(faces, face_labels, n_vertices) -> np.ndarray:
    """Label of the first face touching each vertex."""
    out = np.full(n_vertices, -1, dtype=np.int64)
    for f, lab in zip(faces[::-1], face_labels[::-1]):
        out[f] = lab
    return out
