"""Pose and shape from 2D part centroids.

The observation model for a part is the area-weighted centroid of its
camera-facing triangles after projection. For a convex car with planar parts
this is the centroid of the part's visible pixels, up to discretization.

Parameter vector for refinement: ``[theta (3), center_px (2), distance, shape (dim)]``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .errors import CarParseError, DegenerateConfiguration, NonConvergence, TooFewParts
from .pose import (Camera, CarPose, euler_jacobian, euler_to_matrix, ray_rotation)
from .scene import NEAR_PLANE, _zbuffer
from .shape_space import ShapeSpace

logger = logging.getLogger(__name__)

SHAPE_PRIOR = 1e-2
MIN_PART_PIXELS = 20
MIN_PART_THICKNESS = 3.0   # pixels; pixel count over the longer bounding-box side
PLANAR_TOLERANCE = 1e-3


@dataclass(frozen=True, eq=False)
class PartObservation:
    part_ids: np.ndarray        # (n,) full-taxonomy part ids
    centroids: np.ndarray       # (n, 2) pixels
    pixel_counts: np.ndarray    # (n,)
    instance_id: int = 0

    def __post_init__(self):
        if not (len(self.part_ids) == len(self.centroids) == len(self.pixel_counts)):
            raise ValueError("observation arrays differ in length")
        if np.any(np.asarray(self.pixel_counts) <= 0):
            raise ValueError("pixel counts must be positive")

    def __len__(self) -> int:
        return len(self.part_ids)

    def with_centroids(self, centroids) -> "PartObservation":
        return PartObservation(self.part_ids, np.asarray(centroids, float), self.pixel_counts,
                               self.instance_id)


@dataclass(frozen=True, eq=False)
class PoseEstimate:
    pose: CarPose
    shape: np.ndarray
    reprojection_rms: float
    converged: bool
    instance_id: int = 0
    iterations: int = 0
    planar_init: bool = False
    cost_trace: Tuple[float, ...] = ()
    translation_sigma: float = float("nan")   # meters, at the nominal centroid noise
    rotation_sigma: float = float("nan")      # radians

    def rotation(self, camera: Camera) -> np.ndarray:
        return self.pose.rotation(camera)

    def translation(self, camera: Camera) -> np.ndarray:
        return self.pose.translation(camera)

    def to_dict(self) -> dict:
        return {"instance_id": self.instance_id, "pose": self.pose.to_dict(),
                "shape": list(map(float, self.shape)), "reprojection_rms": self.reprojection_rms,
                "converged": self.converged, "iterations": self.iterations,
                "planar_init": self.planar_init, "translation_sigma": self.translation_sigma,
                "rotation_sigma": self.rotation_sigma}

    @property
    def score(self) -> float:
        """Confidence in (0, 1]: shrinks with the predicted translation spread."""
        return 1.0 / (1.0 + self.translation_sigma) if np.isfinite(self.translation_sigma) else 0.0


# --------------------------------------------------------------------------
# Observation extraction
# --------------------------------------------------------------------------

def extract_observations(part_map: np.ndarray, instance_map: np.ndarray,
                         depth_map: Optional[np.ndarray] = None,
                         min_pixels: int = MIN_PART_PIXELS,
                         min_thickness: float = MIN_PART_THICKNESS) -> Dict[int, PartObservation]:
    """Per-instance part centroids (pixel centers at +0.5) from label maps.

    Parts are dropped when they touch the image border, have fewer than
    ``min_pixels`` pixels, or border a different instance that is nearer
    (any different non-background instance when no depth is given); such
    regions are cut by truncation or occlusion and their centroids are biased.
    Parts thinner than ``min_thickness`` (pixel count over the longer side of
    the bounding box) are seen edge-on and their sampled centroids are
    unreliable, so they are dropped as well.
    ``part_map`` holds full part id + 1 with 0 for background.
    """
    part = np.asarray(part_map, dtype=np.int64)
    inst = np.asarray(instance_map, dtype=np.int64)
    H, W = part.shape
    n_part = int(part.max()) + 1 if part.size else 1
    key = inst * n_part + part
    valid = (inst > 0) & (part > 0)
    bad = np.zeros((H, W), dtype=bool)
    bad[0, :] = bad[-1, :] = bad[:, 0] = bad[:, -1] = True
    depth = None if depth_map is None else np.asarray(depth_map, dtype=np.float64)
    for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        src = (slice(max(dy, 0), H + min(dy, 0)), slice(max(dx, 0), W + min(dx, 0)))
        dst = (slice(max(-dy, 0), H + min(-dy, 0)), slice(max(-dx, 0), W + min(-dx, 0)))
        other = inst[src] != inst[dst]
        if depth is None:
            occl = other & (inst[src] > 0)
        else:
            occl = other & (depth[src] < depth[dst])
        bad[dst] |= occl
    ys, xs = np.nonzero(valid)
    keys = key[ys, xs]
    uniq, inv, counts = np.unique(keys, return_inverse=True, return_counts=True)
    sx = np.bincount(inv, weights=xs + 0.5)
    sy = np.bincount(inv, weights=ys + 0.5)
    flagged = np.bincount(inv, weights=bad[ys, xs].astype(float)) > 0
    extent = np.ones(len(uniq))
    order = np.argsort(inv, kind="stable")
    starts = np.r_[0, np.cumsum(counts)[:-1]]
    for coord in (xs, ys):
        srt = coord[order]
        lo = np.minimum.reduceat(srt, starts)
        hi = np.maximum.reduceat(srt, starts)
        extent = np.maximum(extent, hi - lo + 1)
    thin = counts / extent < min_thickness
    out: Dict[int, PartObservation] = {}
    groups: Dict[int, list] = {}
    for k, c, fx, fy, fl in zip(uniq, counts, sx, sy, flagged | thin):
        if fl or c < min_pixels:
            continue
        groups.setdefault(int(k // n_part), []).append((int(k % n_part) - 1, fx / c, fy / c, c))
    for i, rows in groups.items():
        arr = np.array(rows)
        out[i] = PartObservation(arr[:, 0].astype(np.int64), arr[:, 1:3], arr[:, 3].astype(np.int64), i)
    return out


# --------------------------------------------------------------------------
# Centroid model
# --------------------------------------------------------------------------

class CentroidModel:
    """Projected part centroids and their Jacobian for one shape space."""

    def __init__(self, space: ShapeSpace, camera: Camera):
        if space.faces is None:
            raise ValueError("shape space carries no template faces")
        self.space = space
        self.camera = camera
        self.faces = np.asarray(space.faces)
        self.labels = np.asarray(space.face_part_labels)
        self.J = space.vertex_jacobian()
        self.n_params = 6 + space.dim
        self._cache: Dict[tuple, tuple] = {}
        self._last_derivs: Tuple[Optional[tuple], List[np.ndarray]] = (None, [])

    def part_centroids_3d(self, part_ids, shape=None) -> np.ndarray:
        """Area-weighted 3D centroid of each part on the shape (mean shape by default)."""
        V = self.space.vertices(np.zeros(self.space.dim) if shape is None else shape)
        tri = V[self.faces]
        area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
        g = tri.mean(axis=1)
        out = []
        for pid in part_ids:
            m = self.labels == pid
            if not np.any(m):
                raise ValueError(f"part {pid} not on the template")
            out.append((area[m, None] * g[m]).sum(axis=0) / area[m].sum())
        return np.array(out)

    def camera_points(self, x: np.ndarray, index: Optional[np.ndarray] = None
                      ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Camera-frame vertices and their (N, 3, P) Jacobian, optionally for a vertex subset."""
        theta, c, d, s = x[:3], x[3:5], x[5], x[6:]
        Rc = ray_rotation(self.camera, c)
        Rv = euler_to_matrix(theta)
        V = self.space.vertices(s)
        Jv = self.J
        if index is not None:
            V, Jv = V[index], Jv[index]
        local = V @ Rv.T + np.array([0.0, 0.0, d])
        X = local @ Rc.T
        N = len(V)
        dX = np.empty((N, 3, self.n_params))
        dRv = euler_jacobian(theta)
        for k in range(3):
            dX[:, :, k] = V @ (Rc @ dRv[k]).T
        for m, dRc in enumerate(self._ray_rotation_derivs(c)):
            dX[:, :, 3 + m] = local @ dRc.T
        dX[:, :, 5] = Rc[:, 2]
        dX[:, :, 6:] = np.einsum("ij,njd->nid", Rc @ Rv, Jv)
        return X, dX, Rc

    def _ray_rotation_derivs(self, c: np.ndarray, h: float = 1e-4) -> List[np.ndarray]:
        key = (float(c[0]), float(c[1]))
        if self._last_derivs[0] != key:
            out = []
            for m in range(2):
                e = np.zeros(2)
                e[m] = h
                out.append((ray_rotation(self.camera, c + e) - ray_rotation(self.camera, c - e)) / (2 * h))
            self._last_derivs = (key, out)
        return self._last_derivs[1]

    def _subset(self, part_ids) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Faces of ``part_ids`` re-indexed onto their own vertices, with labels."""
        key = tuple(int(p) for p in part_ids)
        hit = self._cache.get(key)
        if hit is None:
            sel = np.isin(self.labels, key)
            verts, local = np.unique(self.faces[sel], return_inverse=True)
            hit = (verts, local.reshape(-1, 3), self.labels[sel])
            self._cache[key] = hit
        return hit

    def predict(self, x: np.ndarray, part_ids: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
        """Centroids (n, 2) and Jacobian (n, 2, P) for ``part_ids``."""
        cam = self.camera
        verts, faces, labels = self._subset(part_ids)
        X, dX, _ = self.camera_points(x, verts)
        Z = X[:, 2]
        u = np.stack([cam.fx * X[:, 0] / Z + cam.cx, cam.fy * X[:, 1] / Z + cam.cy], axis=1)
        du = np.empty((len(X), 2, self.n_params))
        du[:, 0] = cam.fx * (dX[:, 0] / Z[:, None] - X[:, 0, None] * dX[:, 2] / Z[:, None] ** 2)
        du[:, 1] = cam.fy * (dX[:, 1] / Z[:, None] - X[:, 1, None] * dX[:, 2] / Z[:, None] ** 2)
        f = faces
        p0, p1, p2 = u[f[:, 0]], u[f[:, 1]], u[f[:, 2]]
        d0, d1, d2 = du[f[:, 0]], du[f[:, 1]], du[f[:, 2]]
        a2 = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p2[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1])
        # with x right / y down, camera-facing outward triangles have negative signed area
        front = a2 < 0
        A = np.where(front, -0.5 * a2, 0.0)
        dA = -0.5 * ((p1[:, 1] - p2[:, 1])[:, None] * d0[:, 0] + (p2[:, 0] - p1[:, 0])[:, None] * d0[:, 1]
                     + (p2[:, 1] - p0[:, 1])[:, None] * d1[:, 0] + (p0[:, 0] - p2[:, 0])[:, None] * d1[:, 1]
                     + (p0[:, 1] - p1[:, 1])[:, None] * d2[:, 0] + (p1[:, 0] - p0[:, 0])[:, None] * d2[:, 1])
        dA[~front] = 0.0
        g = (p0 + p1 + p2) / 3.0
        dg = (d0 + d1 + d2) / 3.0
        ids = np.asarray(part_ids)
        C = np.empty((len(ids), 2))
        dC = np.empty((len(ids), 2, self.n_params))
        for r, pid in enumerate(ids):
            m = labels == pid
            S = A[m].sum()
            if S > 0:
                Mx = (A[m, None] * g[m]).sum(axis=0)
                dS = dA[m].sum(axis=0)
                dM = np.einsum("fp,fk->kp", dA[m], g[m]) + np.einsum("f,fkp->kp", A[m], dg[m])
                C[r] = Mx / S
                dC[r] = (dM - C[r][:, None] * dS[None]) / S
            else:
                # part faces away from the camera: fall back to its mean projected position
                C[r] = g[m].mean(axis=0)
                dC[r] = dg[m].mean(axis=0)
        return C, dC


def rendered_centroids(model: CentroidModel, x: np.ndarray, part_ids: Sequence[int]) -> np.ndarray:
    """Pixel centroids of ``part_ids`` in a solo z-buffer render of the car; NaN where unseen.

    Only the car's screen bounding box is rendered.
    """
    cam = model.camera
    theta, c, d, s = x[:3], x[3:5], x[5], x[6:]
    V = model.space.vertices(s)
    X = (V @ euler_to_matrix(theta).T + np.array([0.0, 0.0, d])) @ ray_rotation(cam, c).T
    out = np.full((len(part_ids), 2), np.nan)
    if np.any(X[:, 2] <= NEAR_PLANE):
        return out
    u = cam.fx * X[:, 0] / X[:, 2] + cam.cx
    v = cam.fy * X[:, 1] / X[:, 2] + cam.cy
    x0 = max(int(np.floor(u.min())) - 1, 0)
    y0 = max(int(np.floor(v.min())) - 1, 0)
    x1 = min(int(np.ceil(u.max())) + 1, cam.width)
    y1 = min(int(np.ceil(v.max())) + 1, cam.height)
    if x1 <= x0 or y1 <= y0:
        return out
    depth = np.full((y1 - y0, x1 - x0), np.inf)
    winner = np.full(depth.shape, -1, dtype=np.int64)
    _zbuffer(np.ascontiguousarray(X[model.faces]), cam.fx, cam.fy, cam.cx - x0, cam.cy - y0,
             x1 - x0, y1 - y0, depth, winner)
    ys, xs = np.nonzero(winner >= 0)
    lab = model.labels[winner[ys, xs]]
    n = int(model.labels.max()) + 1
    cnt = np.bincount(lab, minlength=n)
    sx = np.bincount(lab, weights=xs + 0.5 + x0, minlength=n)
    sy = np.bincount(lab, weights=ys + 0.5 + y0, minlength=n)
    for r, pid in enumerate(part_ids):
        if 0 <= pid < n and cnt[pid]:
            out[r] = sx[pid] / cnt[pid], sy[pid] / cnt[pid]
    return out


def pose_vector(pose: CarPose, shape) -> np.ndarray:
    return np.concatenate([pose.theta, pose.center_px, [pose.distance], np.asarray(shape, float)])


def vector_pose(x: np.ndarray) -> Tuple[CarPose, np.ndarray]:
    return CarPose(tuple(x[:3]), tuple(x[3:5]), float(x[5])), x[6:].copy()


# --------------------------------------------------------------------------
# Initialization
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PnPResult:
    pose: CarPose
    rotation: np.ndarray
    translation: np.ndarray
    planar: bool
    reprojection_rms: float


def _kabsch(src: np.ndarray, dst: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    U, _, Vt = np.linalg.svd((dst - md).T @ (src - ms))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    R = U @ D @ Vt
    return R, md - R @ ms


def _reproj_rms(R, t, pts, uv, camera) -> float:
    X = pts @ R.T + t
    if np.any(X[:, 2] <= 0):
        return np.inf
    proj = np.stack([camera.fx * X[:, 0] / X[:, 2] + camera.cx,
                     camera.fy * X[:, 1] / X[:, 2] + camera.cy], axis=1)
    return float(np.sqrt(np.mean(np.sum((proj - uv) ** 2, axis=1))))


_PAIRS6 = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))


def epnp(pts: np.ndarray, uv: np.ndarray, camera: Camera) -> Tuple[np.ndarray, np.ndarray]:
    """Closed-form pose from >= 4 non-coplanar 3D/2D pairs via four virtual control points."""
    n = len(pts)
    c0 = pts.mean(axis=0)
    A = pts - c0
    lam, vec = np.linalg.eigh(A.T @ A)
    ctrl = np.vstack([c0, c0 + (np.sqrt(np.maximum(lam, 0) / n) * vec).T])
    B = (ctrl[1:] - c0).T
    alpha_rest = np.linalg.solve(B, A.T).T
    alphas = np.c_[1.0 - alpha_rest.sum(axis=1), alpha_rest]
    M = np.zeros((2 * n, 12))
    for j in range(4):
        M[0::2, 3 * j] = alphas[:, j] * camera.fx
        M[0::2, 3 * j + 2] = alphas[:, j] * (camera.cx - uv[:, 0])
        M[1::2, 3 * j + 1] = alphas[:, j] * camera.fy
        M[1::2, 3 * j + 2] = alphas[:, j] * (camera.cy - uv[:, 1])
    _, evec = np.linalg.eigh(M.T @ M)
    kern = evec[:, :4]                               # smallest eigenvalue first
    dv = np.array([[kern[3 * a:3 * a + 3, k] - kern[3 * b:3 * b + 3, k] for k in range(4)]
                   for a, b in _PAIRS6])              # (6, 4, 3)
    rho = np.array([np.sum((ctrl[a] - ctrl[b]) ** 2) for a, b in _PAIRS6])

    def dot(i, j):
        return np.einsum("pk,pk->p", dv[:, i], dv[:, j])

    L = np.stack([dot(0, 0), 2 * dot(0, 1), dot(1, 1), 2 * dot(0, 2), 2 * dot(1, 2), dot(2, 2),
                  2 * dot(0, 3), 2 * dot(1, 3), 2 * dot(2, 3), dot(3, 3)], axis=1)

    def betas_1():
        x = np.linalg.lstsq(L[:, [0, 1, 3, 6]], rho, rcond=None)[0]
        b1 = np.sqrt(abs(x[0])) or 1e-12
        sgn = 1.0 if x[0] > 0 else -1.0
        return np.array([b1, sgn * x[1] / b1, sgn * x[2] / b1, sgn * x[3] / b1])

    def betas_2():
        x = np.linalg.lstsq(L[:, [0, 1, 2]], rho, rcond=None)[0]
        if x[0] < 0:
            b1, b2 = np.sqrt(-x[0]), (np.sqrt(-x[2]) if x[2] < 0 else 0.0)
        else:
            b1, b2 = np.sqrt(x[0]), (np.sqrt(x[2]) if x[2] > 0 else 0.0)
        if x[1] < 0:
            b1 = -b1
        return np.array([b1, b2, 0.0, 0.0])

    def betas_3():
        x = np.linalg.lstsq(L[:, [0, 1, 2, 3, 4]], rho, rcond=None)[0]
        if x[0] < 0:
            b1, b2 = np.sqrt(-x[0]), (np.sqrt(-x[2]) if x[2] < 0 else 0.0)
        else:
            b1, b2 = np.sqrt(x[0]), (np.sqrt(x[2]) if x[2] > 0 else 0.0)
        if x[1] < 0:
            b1 = -b1
        b3 = x[3] / b1 if b1 != 0 else 0.0
        return np.array([b1, b2, b3, 0.0])

    def gauss_newton(b):
        for _ in range(10):
            prods = np.array([b[0] * b[0], b[0] * b[1], b[1] * b[1], b[0] * b[2], b[1] * b[2],
                              b[2] * b[2], b[0] * b[3], b[1] * b[3], b[2] * b[3], b[3] * b[3]])
            r = rho - L @ prods
            Jm = np.stack([2 * L[:, 0] * b[0] + L[:, 1] * b[1] + L[:, 3] * b[2] + L[:, 6] * b[3],
                           L[:, 1] * b[0] + 2 * L[:, 2] * b[1] + L[:, 4] * b[2] + L[:, 7] * b[3],
                           L[:, 3] * b[0] + L[:, 4] * b[1] + 2 * L[:, 5] * b[2] + L[:, 8] * b[3],
                           L[:, 6] * b[0] + L[:, 7] * b[1] + L[:, 8] * b[2] + 2 * L[:, 9] * b[3]], axis=1)
            step = np.linalg.lstsq(Jm, r, rcond=None)[0]
            b = b + step
            if np.linalg.norm(step) < 1e-15 * max(np.linalg.norm(b), 1.0):
                break
        return b

    best = (np.inf, None, None)
    for guess in (betas_1(), betas_2(), betas_3()):
        b = gauss_newton(guess)
        ccam = (kern @ b).reshape(4, 3)
        pcam = alphas @ ccam
        if pcam[:, 2].mean() < 0:
            pcam = -pcam
        R, t = _kabsch(pts, pcam)
        err = _reproj_rms(R, t, pts, uv, camera)
        if err < best[0]:
            best = (err, R, t)
    if best[1] is None:
        raise DegenerateConfiguration("no EPnP candidate places the points in front of the camera")
    return best[1], best[2]


def planar_pnp(pts: np.ndarray, uv: np.ndarray, camera: Camera) -> Tuple[np.ndarray, np.ndarray]:
    """Pose from >= 4 coplanar 3D/2D pairs through a plane-to-image homography."""
    c0 = pts.mean(axis=0)
    _, S, Vt = np.linalg.svd(pts - c0)
    if S[1] <= PLANAR_TOLERANCE * S[0]:
        raise DegenerateConfiguration("points are collinear")
    e1, e2 = Vt[0], Vt[1]
    basis = np.stack([e1, e2, np.cross(e1, e2)], axis=1)
    q = (pts - c0) @ basis[:, :2]
    m = (np.linalg.inv(camera.K) @ np.c_[uv, np.ones(len(uv))].T).T[:, :2]

    def normalizer(p):
        mu = p.mean(axis=0)
        sc = np.sqrt(2) / np.mean(np.linalg.norm(p - mu, axis=1))
        return np.array([[sc, 0, -sc * mu[0]], [0, sc, -sc * mu[1]], [0, 0, 1.0]])

    Tq, Tm = normalizer(q), normalizer(m)
    qn = (Tq @ np.c_[q, np.ones(len(q))].T).T
    mn = (Tm @ np.c_[m, np.ones(len(m))].T).T
    rows = []
    for (x, y, w), (u, v, _) in zip(qn, mn):
        rows.append([0, 0, 0, -x, -y, -w, v * x, v * y, v * w])
        rows.append([x, y, w, 0, 0, 0, -u * x, -u * y, -u * w])
    _, _, Vh = np.linalg.svd(np.array(rows))
    Hn = Vh[-1].reshape(3, 3)
    H = np.linalg.inv(Tm) @ Hn @ Tq
    lam = 0.5 * (np.linalg.norm(H[:, 0]) + np.linalg.norm(H[:, 1]))
    if H[2, 2] < 0:
        lam = -lam
    r1, r2, t = H[:, 0] / lam, H[:, 1] / lam, H[:, 2] / lam
    U, _, Wt = np.linalg.svd(np.stack([r1, r2, np.cross(r1, r2)], axis=1))
    Rp = U @ np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Wt))]) @ Wt
    R = Rp @ basis.T
    return R, t - R @ c0


def pnp_init(obs: PartObservation, space: ShapeSpace, camera: Camera,
             model: Optional[CentroidModel] = None) -> PnPResult:
    """Pose from observed 2D part centroids against mean-shape 3D part centroids.

    Coplanar part sets use the homography route and set ``planar``.
    """
    if len(obs) < 4:
        raise TooFewParts(f"{len(obs)} parts visible, need 4")
    model = model or CentroidModel(space, camera)
    pts = model.part_centroids_3d(obs.part_ids)
    uv = np.asarray(obs.centroids, dtype=np.float64)
    S = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
    planar = S[2] <= PLANAR_TOLERANCE * S[0]
    if planar:
        logger.info("coplanar part centroids: homography initialization")
        R, t = planar_pnp(pts, uv, camera)
    else:
        R, t = epnp(pts, uv, camera)
    if t[2] <= 0:
        raise DegenerateConfiguration("initial pose puts the car behind the camera")
    return PnPResult(CarPose.from_egocentric(R, t, camera), R, t, bool(planar),
                     _reproj_rms(R, t, pts, uv, camera))


# --------------------------------------------------------------------------
# Refinement
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RefineConfig:
    shape_prior: float = SHAPE_PRIOR     # mu, on shape params in std units
    ground_weight: float = 100.0         # pixels per meter of ground-contact error
    upright_weight: float = 1000.0       # pixels per radian of tilt off the ground normal
    max_iterations: int = 100
    lambda_init: float = 1e-3
    tolerance: float = 1e-12             # relative cost decrease to stop
    render_passes: int = 3               # render-and-compare bias corrections after the first fit
    sigma_px: float = 1.0                # nominal centroid noise for the confidence gate
    max_translation_sigma: float = 1.0   # meters; larger predicted spread means "uncertain"
    max_rotation_sigma: float = float(np.radians(8.0))


def _residuals(model: CentroidModel, x, obs: PartObservation, cfg: RefineConfig, ground):
    C, dC = model.predict(x, obs.part_ids)
    r = [(C - obs.centroids).ravel()]
    J = [dC.reshape(-1, model.n_params)]
    dim = model.space.dim
    sq = np.sqrt(cfg.shape_prior)
    r.append(sq * x[6:])
    Js = np.zeros((dim, model.n_params))
    Js[:, 6:] = sq * np.eye(dim)
    J.append(Js)
    if ground is not None:
        n_up, h = ground
        theta, c, d = x[:3], x[3:5], x[5]
        Rc = ray_rotation(model.camera, c)
        Rv = euler_to_matrix(theta)
        X = (model.space.vertices(x[6:]) @ Rv.T + np.array([0.0, 0.0, d])) @ Rc.T
        heights = X @ n_up + h
        i = int(np.argmin(heights))
        _, dX, _ = model.camera_points(x, np.array([i]))
        r.append(np.array([cfg.ground_weight * heights[i]]))
        J.append(cfg.ground_weight * (n_up @ dX[0])[None])
        # car down axis (second column of R = R_c R_v) against the ground normal
        down = Rc @ Rv[:, 1]
        r.append(cfg.upright_weight * (down + n_up))
        Ju = np.zeros((3, model.n_params))
        dRv = euler_jacobian(theta)
        for k in range(3):
            Ju[:, k] = Rc @ dRv[k][:, 1]
        for mm, dRc in enumerate(model._ray_rotation_derivs(c)):
            Ju[:, 3 + mm] = dRc @ Rv[:, 1]
        J.append(cfg.upright_weight * Ju)
    return np.concatenate(r), np.vstack(J), C


def refine(init: PoseEstimate, obs: PartObservation, space: ShapeSpace, camera: Camera,
           cfg: Optional[RefineConfig] = None, ground: Optional[Tuple[np.ndarray, float]] = None,
           model: Optional[CentroidModel] = None, strict: bool = False) -> PoseEstimate:
    """Levenberg-Marquardt over (theta, center, distance, shape).

    Minimizes squared centroid reprojection error plus ``mu * |s|^2`` and,
    when ``ground`` = (up normal in camera frame, camera height) is given, the
    squared height of the car's lowest vertex above the ground and the squared
    tilt of the car's down axis away from the ground normal. The cost never
    increases between accepted steps.
    """
    cfg = cfg or RefineConfig()
    model = model or CentroidModel(space, camera)
    x = pose_vector(init.pose, init.shape)
    r, J, C = _residuals(model, x, obs, cfg, ground)
    cost = float(r @ r)
    trace = [cost]
    lam = cfg.lambda_init
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        H = J.T @ J
        g = J.T @ r
        improved = False
        while lam < 1e12:
            A = H + lam * np.diag(np.maximum(np.diag(H), 1e-9))
            try:
                step = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            x_new = x + step
            if x_new[5] <= 0:
                lam *= 10
                continue
            try:
                r_new, J_new, C_new = _residuals(model, x_new, obs, cfg, ground)
            except (ValueError, FloatingPointError):
                lam *= 10
                continue
            cost_new = float(r_new @ r_new)
            if cost_new <= cost:
                improved = True
                break
            lam *= 10
        if not improved:
            converged = True        # no descent direction left at machine precision
            break
        decrease = cost - cost_new
        x, r, J, C, cost = x_new, r_new, J_new, C_new, cost_new
        trace.append(cost)
        lam = max(lam / 10, 1e-12)
        if decrease <= cfg.tolerance * max(cost, 1e-300) or np.linalg.norm(step) < 1e-12:
            converged = True
            break
    pose, shape = vector_pose(x)
    rms = float(np.sqrt(np.mean(np.sum((C - obs.centroids) ** 2, axis=1))))
    if not converged:
        msg = f"refinement stopped after {it} iterations (cost {cost:.3g})"
        if strict:
            raise NonConvergence(msg)
        logger.warning(msg)
    return PoseEstimate(pose, shape, rms, converged, obs.instance_id, it, init.planar_init,
                        tuple(trace))


def correct_by_rendering(est: PoseEstimate, obs: PartObservation, space: ShapeSpace, camera: Camera,
                         cfg: Optional[RefineConfig] = None, ground=None,
                         model: Optional[CentroidModel] = None) -> PoseEstimate:
    """Remove the centroid model's bias by comparing it with a solo render of the estimate.

    The analytic model ignores self-occlusion and pixel sampling. Each pass
    renders the current estimate, takes the per-part offset between rendered
    and modelled centroids as a bias, and refits against the observations
    minus that bias. At the true pose the corrected observations are exactly
    the modelled centroids, so noiseless data becomes self-consistent.
    """
    cfg = cfg or RefineConfig()
    model = model or CentroidModel(space, camera)
    for _ in range(cfg.render_passes):
        x = pose_vector(est.pose, est.shape)
        bias = rendered_centroids(model, x, obs.part_ids) - model.predict(x, obs.part_ids)[0]
        bias = np.where(np.isfinite(bias), bias, 0.0)
        est = refine(est, obs.with_centroids(obs.centroids - bias), space, camera, cfg, ground, model)
    x = pose_vector(est.pose, est.shape)
    seen = rendered_centroids(model, x, obs.part_ids)
    ok = np.all(np.isfinite(seen), axis=1)
    rms = float(np.sqrt(np.mean(np.sum((seen[ok] - obs.centroids[ok]) ** 2, axis=1)))) if ok.any() else np.inf
    return replace(est, reprojection_rms=rms)


def pose_uncertainty(est: PoseEstimate, obs: PartObservation, model: CentroidModel,
                     cfg: Optional[RefineConfig] = None, ground=None,
                     sigma_px: float = 1.0) -> Tuple[float, float]:
    """Linearized standard deviations of translation (m) and rotation (rad).

    Uses ``sigma_px**2 * inv(J^T J)`` of the refinement residuals at the
    estimate and propagates it to the camera-frame translation and a
    rotation vector by central differences.
    """
    cfg = cfg or RefineConfig()
    x = pose_vector(est.pose, est.shape)
    _, J, _ = _residuals(model, x, obs, cfg, ground)
    cov = sigma_px ** 2 * np.linalg.pinv(J.T @ J)[:6, :6]
    cam = model.camera
    R0 = ray_rotation(cam, x[3:5]) @ euler_to_matrix(x[:3])
    G = np.zeros((6, 6))
    h = 1e-6
    for k in range(6):
        vals = []
        for sgn in (1.0, -1.0):
            xk = x[:6].copy()
            xk[k] += sgn * h
            Rc = ray_rotation(cam, xk[3:5])
            T = Rc[:, 2] * xk[5]
            W = Rc @ euler_to_matrix(xk[:3]) @ R0.T
            vals.append(np.r_[T, 0.5 * np.array([W[2, 1] - W[1, 2], W[0, 2] - W[2, 0], W[1, 0] - W[0, 1]])])
        G[:, k] = (vals[0] - vals[1]) / (2 * h)
    S = G @ cov @ G.T
    return float(np.sqrt(max(np.trace(S[:3, :3]), 0.0))), float(np.sqrt(max(np.trace(S[3:, 3:]), 0.0)))


def solve_instance(obs: PartObservation, space: ShapeSpace, camera: Camera,
                   ground=None, cfg: Optional[RefineConfig] = None,
                   model: Optional[CentroidModel] = None) -> PoseEstimate:
    model = model or CentroidModel(space, camera)
    init = pnp_init(obs, space, camera, model)
    start = PoseEstimate(init.pose, np.zeros(space.dim), init.reprojection_rms, False,
                         obs.instance_id, 0, init.planar)
    est = refine(start, obs, space, camera, cfg, ground, model)
    est = correct_by_rendering(est, obs, space, camera, cfg, ground, model)
    st, sr = pose_uncertainty(est, obs, model, cfg, ground, (cfg or RefineConfig()).sigma_px)
    return replace(est, translation_sigma=st, rotation_sigma=sr)


def is_confident(est: PoseEstimate, cfg: Optional[RefineConfig] = None) -> bool:
    """Converged, self-consistent under rendering, and well determined by the observed parts."""
    cfg = cfg or RefineConfig()
    return bool(est.converged and np.isfinite(est.reprojection_rms)
                and est.translation_sigma <= cfg.max_translation_sigma
                and est.rotation_sigma <= cfg.max_rotation_sigma)


def solve_observations(obs_all: Dict[int, PartObservation], instance_ids: Sequence[int],
                       space: ShapeSpace, camera: Camera, ground=None,
                       cfg: Optional[RefineConfig] = None, model: Optional[CentroidModel] = None
                       ) -> Tuple[List[PoseEstimate], List[dict]]:
    """Solve each listed instance; skipped, failed and uncertain ones become diagnostics."""
    model = model or CentroidModel(space, camera)
    estimates, diagnostics = [], []
    for i in instance_ids:
        obs = obs_all.get(i)
        n = 0 if obs is None else len(obs)
        if n < 4:
            diagnostics.append({"instance_id": i, "status": "skipped",
                                "reason": f"{n} usable parts, need 4"})
            continue
        try:
            est = solve_instance(obs, space, camera, ground, cfg, model)
        except CarParseError as exc:
            diagnostics.append({"instance_id": i, "status": "failed", "error": exc.code,
                                "reason": str(exc)})
            continue
        info = {"instance_id": i, "parts": n, "reprojection_rms": est.reprojection_rms,
                "converged": est.converged, "translation_sigma": est.translation_sigma,
                "rotation_sigma": est.rotation_sigma}
        if is_confident(est, cfg):
            estimates.append(est)
            diagnostics.append({"status": "solved", **info})
        else:
            diagnostics.append({"status": "uncertain", **info})
    return estimates, diagnostics


def solve_scene(part_map, instance_map, space: ShapeSpace, camera: Camera, depth_map=None,
                ground=None, cfg: Optional[RefineConfig] = None,
                min_pixels: int = MIN_PART_PIXELS,
                model: Optional[CentroidModel] = None) -> Tuple[List[PoseEstimate], List[dict]]:
    """Estimate every instance in the maps; failures become diagnostics, never exceptions.

    Only confident estimates are returned; the rest are reported as "uncertain".
    """
    obs_all = extract_observations(part_map, instance_map, depth_map, min_pixels)
    ids = sorted(int(i) for i in np.unique(instance_map) if i > 0)
    return solve_observations(obs_all, ids, space, camera, ground, cfg, model)
