"""Similarity ICP, embedded deformation and dense template correspondence."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components

from .errors import (DegenerateConfiguration, EmptyInput, FormatError, InsufficientNodes,
                     SingularNormalEquations)
from .geometry import PointCloud, _dart_throw

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimilarityTransform:
    """x -> scale * rotation @ x + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with det +1")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "scale", float(self.scale))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """self after other."""
        return SimilarityTransform(self.rotation @ other.rotation,
                                   self.scale * self.rotation @ other.translation + self.translation,
                                   self.scale * other.scale)

    def inverse(self) -> "SimilarityTransform":
        Rt = self.rotation.T
        return SimilarityTransform(Rt, -Rt @ self.translation / self.scale, 1.0 / self.scale)

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
                "scale": self.scale}

    @classmethod
    def from_dict(cls, d: dict) -> "SimilarityTransform":
        return cls(np.array(d["rotation"]), np.array(d["translation"]), float(d["scale"]))


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True) -> SimilarityTransform:
    """Closed-form least-squares similarity taking ``src`` onto ``dst`` (both (n, 3))."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    sv = np.linalg.svd(xs, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateConfiguration("matched points are collinear")
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_s = np.mean(np.sum(xs ** 2, axis=1))
    c = float(np.trace(np.diag(D) @ S) / var_s) if with_scale else 1.0
    t = mu_d - c * R @ mu_s
    return SimilarityTransform(R, t, c)


@dataclass
class IcpConfig:
    max_iterations: int = 200
    tolerance: float = 1e-8           # stop when the RMS improves by less than this (m)
    trim_fraction: float = 0.1        # worst residuals dropped before each update
    with_scale: bool = True
    stall_rate: float = 1e-4          # decrease per iteration still counted as "moving"
    coverage_threshold: Optional[float] = None


class IcpResult(NamedTuple):
    transform: SimilarityTransform
    final_rms: float
    iterations: int
    converged: bool
    coverage: float


def icp_align(source: PointCloud, target: PointCloud,
              init: Optional[SimilarityTransform] = None,
              config: Optional[IcpConfig] = None) -> IcpResult:
    """Trimmed point-to-point similarity ICP from ``source`` onto ``target``.

    ``final_rms`` is measured over the retained (untrimmed) matches and
    ``coverage`` is the fraction of source points whose match lies within
    ``config.coverage_threshold`` (default: 3x the target's median spacing).
    Hitting ``max_iterations`` while the RMS still drops faster than
    ``stall_rate`` per iteration is logged and flagged via ``converged``.
    """
    config = config or IcpConfig()
    init = init or SimilarityTransform()
    if len(source) < 10 or len(target) < 10:
        raise EmptyInput("ICP needs at least 10 points per cloud")
    src = source.points
    n_keep = max(3, int(np.ceil(len(src) * (1.0 - config.trim_fraction))))
    T = init
    prev = np.inf
    rms = np.inf
    converged = False
    last_drop = np.inf
    it = 0
    for it in range(1, config.max_iterations + 1):
        moved = T.apply(src)
        d, idx = target.query(moved)
        keep = np.argsort(d, kind="stable")[:n_keep]
        T_new = umeyama(src[keep], target.points[idx[keep]], config.with_scale)
        moved_new = T_new.apply(src[keep])
        rms = float(np.sqrt(np.mean(np.sum((moved_new - target.points[idx[keep]]) ** 2, axis=1))))
        T = T_new
        last_drop = prev - rms
        if last_drop < config.tolerance:
            converged = True
            break
        prev = rms
    if not converged:
        converged = last_drop <= config.stall_rate
        if not converged:
            logger.warning("ICP hit %d iterations with RMS still dropping %.2e m/iter",
                           config.max_iterations, last_drop)
    d, _ = target.query(T.apply(src))
    thr = config.coverage_threshold
    if thr is None:
        thr = 3.0 * median_spacing(target)
    return IcpResult(T, rms, it, converged, float(np.mean(d <= thr)))


def median_spacing(cloud: PointCloud, sample: int = 2000, seed: int = 0) -> float:
    pts = cloud.points
    if len(pts) < 2:
        return 0.0
    rng = np.random.default_rng(seed)
    sel = pts if len(pts) <= sample else pts[rng.choice(len(pts), sample, replace=False)]
    d, _ = cloud.query(sel, k=2)
    return float(np.median(d[:, 1]))


# --------------------------------------------------------------------------
# Embedded deformation
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DeformationGraph:
    nodes: np.ndarray                  # (m, 3)
    node_A: np.ndarray                 # (m, 3, 3)
    node_t: np.ndarray                 # (m, 3)
    edges: np.ndarray                  # (e, 2) undirected pairs, j < k
    skin_index: np.ndarray             # (n, k) node indices per source point
    skin_weight: np.ndarray            # (n, k), rows sum to 1

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def with_transforms(self, A: np.ndarray, t: np.ndarray) -> "DeformationGraph":
        return DeformationGraph(self.nodes, A, t, self.edges, self.skin_index, self.skin_weight)

    def deform(self, points: np.ndarray) -> np.ndarray:
        """Apply the node transforms to the skinned source points."""
        g = self.nodes[self.skin_index]                       # (n, k, 3)
        A = self.node_A[self.skin_index]                      # (n, k, 3, 3)
        t = self.node_t[self.skin_index]
        local = np.einsum("nkij,nkj->nki", A, points[:, None, :] - g) + g + t
        return np.einsum("nk,nki->ni", self.skin_weight, local)


def skinning_weights(points: np.ndarray, nodes: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """k nearest nodes per point with weights (1 - d / d_max)^2, normalized.

    ``d_max`` is the distance to the (k+1)-th nearest node. A point that
    coincides with a node takes that node's full weight.
    """
    from scipy.spatial import cKDTree

    m = len(nodes)
    kq = min(k + 1, m)
    d, idx = cKDTree(nodes).query(points, k=kq)
    d = d.reshape(len(points), kq)
    idx = idx.reshape(len(points), kq)
    if kq > k:
        d_max = d[:, k]
    else:
        d_max = 1.5 * d[:, -1]
    d, idx = d[:, :k], idx[:, :k]
    d_max = np.maximum(d_max, 1e-12)
    w = np.clip(1.0 - d / d_max[:, None], 0.0, None) ** 2
    coincide = d[:, 0] <= 1e-12
    w[coincide] = 0.0
    w[coincide, 0] = 1.0
    zero = w.sum(axis=1) <= 0
    w[zero, 0] = 1.0
    w /= w.sum(axis=1, keepdims=True)
    return idx, w


def build_deformation_graph(cloud: PointCloud, node_spacing: float = 0.15, k: int = 4,
                            seed: int = 0) -> DeformationGraph:
    if node_spacing <= 0:
        raise ValueError("node_spacing must be positive")
    if k < 2:
        raise ValueError("k must be at least 2")
    pts = cloud.points
    if len(pts) == 0:
        raise InsufficientNodes("empty cloud")
    order = np.random.default_rng(seed).permutation(len(pts))
    kept = _dart_throw(np.ascontiguousarray(pts[order]), node_spacing, len(pts))
    nodes = pts[order][kept]
    if len(nodes) < k:
        raise InsufficientNodes(f"{len(nodes)} nodes at spacing {node_spacing}, need >= {k}")
    idx, w = skinning_weights(pts, nodes, k)
    pairs = set()
    for row, wrow in zip(idx, w):
        live = row[wrow > 0]
        for a in range(len(live)):
            for b in range(a + 1, len(live)):
                j, l = int(live[a]), int(live[b])
                pairs.add((min(j, l), max(j, l)))
    edges = _connect_components(nodes, np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2))
    m = len(nodes)
    return DeformationGraph(nodes, np.tile(np.eye(3), (m, 1, 1)), np.zeros((m, 3)), edges, idx, w)


def _connect_components(nodes: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Add nearest-node bridges until the node graph is connected."""
    m = len(nodes)
    edges = [tuple(e) for e in edges]
    while True:
        if edges:
            e = np.array(edges)
            adj = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(m, m))
        else:
            adj = sp.coo_matrix((m, m))
        n_comp, comp = connected_components(adj, directed=False)
        if n_comp <= 1:
            return np.array(sorted(set(edges)), dtype=np.int64).reshape(-1, 2)
        a = np.flatnonzero(comp == comp[0])
        b = np.flatnonzero(comp != comp[0])
        d = np.linalg.norm(nodes[a][:, None] - nodes[b][None], axis=2)
        i, j = np.unravel_index(np.argmin(d), d.shape)
        edges.append((min(a[i], b[j]), max(a[i], b[j])))


@dataclass
class DeformConfig:
    w_fit: float = 1.0
    w_rot: float = 1.0
    w_reg: float = 10.0
    max_outer: int = 30
    inner_iterations: int = 3
    plateau: float = 1e-3          # relative energy drop that counts as a plateau
    min_weight_ratio: float = 1.0 / 64  # stop once w_rot, w_reg fell below this fraction
    damping: float = 1e-8


class DeformResult(NamedTuple):
    deformed: PointCloud
    energy_trace: List[float]
    graph: DeformationGraph


def _param_vector(A: np.ndarray, t: np.ndarray) -> np.ndarray:
    return np.concatenate([A.reshape(-1, 9), t], axis=1).reshape(-1)


def _unpack(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    x = x.reshape(-1, 12)
    return x[:, :9].reshape(-1, 3, 3), x[:, 9:].copy()


def _fit_operator(points, graph: DeformationGraph):
    """Sparse F and offset c with deformed = (F x + c).reshape(n, 3)."""
    n, k = graph.skin_index.shape
    rows, cols, vals = [], [], []
    base_row = np.arange(n) * 3
    for slot in range(k):
        j = graph.skin_index[:, slot]
        w = graph.skin_weight[:, slot]
        d = points - graph.nodes[j]
        for r in range(3):
            for c in range(3):
                rows.append(base_row + r)
                cols.append(j * 12 + r * 3 + c)
                vals.append(w * d[:, c])
            rows.append(base_row + r)
            cols.append(j * 12 + 9 + r)
            vals.append(w)
    F = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(3 * n, 12 * graph.n_nodes))
    c = np.einsum("nk,nki->ni", graph.skin_weight, graph.nodes[graph.skin_index]).reshape(-1)
    return F, c


def _reg_operator(graph: DeformationGraph):
    """Sparse G and offset e for the directed edge residuals."""
    e = graph.edges
    directed = np.concatenate([e, e[:, ::-1]]) if len(e) else e.reshape(0, 2)
    n_e = len(directed)
    rows, cols, vals = [], [], []
    off = np.zeros(3 * n_e)
    for idx, (j, k) in enumerate(directed):
        d = graph.nodes[k] - graph.nodes[j]
        for r in range(3):
            row = 3 * idx + r
            for c in range(3):
                rows.append(row); cols.append(j * 12 + r * 3 + c); vals.append(d[c])
            rows.append(row); cols.append(j * 12 + 9 + r); vals.append(1.0)
            rows.append(row); cols.append(k * 12 + 9 + r); vals.append(-1.0)
            off[row] = graph.nodes[j, r] - graph.nodes[k, r]
    G = sp.csr_matrix((vals, (rows, cols)), shape=(3 * n_e, 12 * graph.n_nodes))
    return G, off


_PAIRS = ((0, 1), (0, 2), (1, 2))


def _rot_residual(A: np.ndarray) -> np.ndarray:
    cols = A.transpose(0, 2, 1)                       # (m, 3 columns, 3)
    off = [np.sum(cols[:, p] * cols[:, q], axis=1) for p, q in _PAIRS]
    diag = [np.sum(cols[:, p] ** 2, axis=1) - 1.0 for p in range(3)]
    return np.stack(off + diag, axis=1).reshape(-1)


def _rot_jacobian(A: np.ndarray) -> sp.csr_matrix:
    m = len(A)
    rows, cols, vals = [], [], []
    for j in range(m):
        base = 12 * j
        for ri, (p, q) in enumerate(_PAIRS):
            row = 6 * j + ri
            for r in range(3):
                rows += [row, row]
                cols += [base + r * 3 + p, base + r * 3 + q]
                vals += [A[j, r, q], A[j, r, p]]
        for p in range(3):
            row = 6 * j + 3 + p
            for r in range(3):
                rows.append(row); cols.append(base + r * 3 + p); vals.append(2.0 * A[j, r, p])
    return sp.csr_matrix((vals, (rows, cols)), shape=(6 * m, 12 * m))


class _NormalSolver:
    """Preconditioned CG for the Gauss-Newton normal equations.

    Fit and regularization residuals touch one row of each node matrix at a
    time, so their Hessian is three identical blocks (one per row of A plus
    the matching entry of t). The preconditioner factors that block once per
    weight setting, with the rotation term approximated by ``2 * w_rot`` on
    the A entries. A direct solve is the fallback.
    """

    def __init__(self, FtF, GtG, n_nodes: int):
        self.FtF, self.GtG, self.m = FtF, GtG, n_nodes
        j = np.arange(n_nodes)[:, None]
        self.rows = [np.concatenate([j * 12 + r * 3 + np.arange(3)[None, :], j * 12 + 9 + r], axis=1).reshape(-1)
                     for r in range(3)]
        self.is_A = np.tile([1.0, 1.0, 1.0, 0.0], n_nodes)
        self.key = None
        self.lu = None

    def set_weights(self, w_fit, w_rot, w_reg):
        key = (w_fit, w_rot, w_reg)
        if key == self.key:
            return
        self.key = key
        r0 = self.rows[0]
        K = (w_fit * self.FtF + w_reg * self.GtG)[r0][:, r0]
        K = K + sp.diags(2.0 * w_rot * self.is_A + 1e-9 * (1.0 + K.diagonal()))
        try:
            self.lu = spla.splu(K.tocsc(), permc_spec="COLAMD")
        except RuntimeError:
            self.lu = None

    def _precondition(self, v):
        out = np.empty_like(v)
        for r in self.rows:
            out[r] = self.lu.solve(v[r])
        return out

    def solve(self, H, b):
        if self.lu is not None:
            M = spla.LinearOperator(H.shape, self._precondition)
            x, info = spla.cg(H, b, M=M, rtol=1e-10, maxiter=400)
            if info == 0 and np.all(np.isfinite(x)):
                return x
        try:
            x = spla.spsolve(H.tocsc(), b, permc_spec="COLAMD")
        except RuntimeError:
            return None
        return x if np.all(np.isfinite(x)) else None


def embedded_deform(source: PointCloud, target: PointCloud, graph: DeformationGraph,
                    weights: Optional[Tuple[float, float, float]] = None,
                    config: Optional[DeformConfig] = None,
                    fixed_matches: Optional[np.ndarray] = None) -> DeformResult:
    """Non-rigidly pull ``source`` onto ``target`` through the node transforms of ``graph``.

    Each outer iteration re-matches every deformed point to its nearest
    target point (unless ``fixed_matches`` gives target indices), then runs
    damped Gauss-Newton steps on the fit + rotation + regularization energy.
    Steps that do not lower the energy are rejected and the damping raised,
    so the recorded trace never increases. When the relative drop over an
    outer iteration falls below ``config.plateau`` the rotation and
    regularization weights are halved.
    """
    config = config or DeformConfig()
    if weights is not None:
        config = DeformConfig(**{**config.__dict__, "w_fit": weights[0], "w_rot": weights[1],
                                 "w_reg": weights[2]})
    if len(target) == 0:
        raise EmptyInput("empty target cloud")
    pts = source.points
    F, c0 = _fit_operator(pts, graph)
    G, e0 = _reg_operator(graph)
    FtF = (F.T @ F).tocsc()
    GtG = (G.T @ G).tocsc()
    x = _param_vector(graph.node_A, graph.node_t)
    w_fit, w_rot, w_reg = config.w_fit, config.w_rot, config.w_reg
    w_rot0, w_reg0 = w_rot, w_reg

    def match(x):
        if fixed_matches is not None:
            return target.points[fixed_matches].reshape(-1)
        _, idx = target.query((F @ x + c0).reshape(-1, 3))
        return target.points[idx].reshape(-1)

    def energy(x, m):
        A, _ = _unpack(x)
        rf = F @ x + c0 - m
        rg = G @ x + e0
        rr = _rot_residual(A)
        return w_fit * rf @ rf + w_rot * rr @ rr + w_reg * rg @ rg

    trace: List[float] = []
    m = match(x)
    E = energy(x, m)
    trace.append(float(E))
    lam = config.damping
    solver = _NormalSolver(FtF, GtG, graph.n_nodes)
    for outer in range(config.max_outer):
        E_start = E
        solver.set_weights(w_fit, w_rot, w_reg)
        for _ in range(config.inner_iterations):
            A, _ = _unpack(x)
            rf = F @ x + c0 - m
            rg = G @ x + e0
            rr = _rot_residual(A)
            Jr = _rot_jacobian(A)
            grad = w_fit * (F.T @ rf) + w_reg * (G.T @ rg) + w_rot * (Jr.T @ rr)
            H = (w_fit * FtF + w_reg * GtG + w_rot * (Jr.T @ Jr)).tocsc()
            diag = H.diagonal()
            accepted = False
            for _attempt in range(12):
                Hd = H + sp.diags(lam * np.maximum(diag, 1e-12) + lam, format="csc")
                step = solver.solve(Hd, -grad)
                if step is None:
                    lam *= 10.0
                    continue
                x_new = x + step
                E_new = energy(x_new, m)
                if E_new <= E:
                    x, E = x_new, E_new
                    trace.append(float(E))
                    lam = max(lam / 10.0, 1e-12)
                    accepted = True
                    break
                lam *= 10.0
            if not accepted:
                if lam > 1e6:
                    logger.warning("embedded deformation: no descent step at damping %.1e", lam)
                break
        if not np.all(np.isfinite(x)):
            raise SingularNormalEquations("embedded deformation diverged")
        # nearest-point re-matching never raises the fit term
        m = match(x)
        E = energy(x, m)
        trace.append(float(E))
        rel = (E_start - E) / max(E_start, 1e-300)
        if rel < config.plateau:
            if w_rot <= w_rot0 * config.min_weight_ratio and w_reg <= w_reg0 * config.min_weight_ratio:
                break
            w_rot *= 0.5
            w_reg *= 0.5
            E = energy(x, m)
            trace.append(float(E))
    A, t = _unpack(x)
    out_graph = graph.with_transforms(A, t)
    deformed = (F @ x + c0).reshape(-1, 3)
    return DeformResult(PointCloud(deformed, source.labels), trace, out_graph)


# --------------------------------------------------------------------------
# Dense correspondence and label transfer
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CorrespondenceMap:
    """For each template point: matched model index and residual distance (m)."""

    indices: np.ndarray
    residuals: np.ndarray
    coverage: float
    threshold: float
    model_points: Optional[np.ndarray] = None
    deformed_template: Optional[np.ndarray] = None

    def __post_init__(self):
        if np.any(np.asarray(self.residuals) < 0):
            raise ValueError("residuals must be non-negative")
        if not 0.0 <= self.coverage <= 1.0:
            raise ValueError("coverage must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.indices)


def initial_alignment(source: PointCloud, target: PointCloud) -> SimilarityTransform:
    """Centroid + RMS-radius similarity used to seed ICP between unrelated clouds."""
    ms, mt = source.points.mean(axis=0), target.points.mean(axis=0)
    rs = np.sqrt(np.mean(np.sum((source.points - ms) ** 2, axis=1)))
    rt = np.sqrt(np.mean(np.sum((target.points - mt) ** 2, axis=1)))
    s = rt / rs if rs > 0 else 1.0
    return SimilarityTransform(np.eye(3), mt - s * ms, s)


def dense_correspond(template: PointCloud, model: PointCloud, spacing: Optional[float] = None,
                     node_spacing: float = 0.15, k: int = 4,
                     icp_config: Optional[IcpConfig] = None,
                     deform_config: Optional[DeformConfig] = None) -> CorrespondenceMap:
    """Template-to-model correspondence via similarity ICP then embedded deformation.

    Coverage counts template points whose final residual is below twice the
    sample spacing (estimated from the model when ``spacing`` is None).
    """
    if spacing is None:
        spacing = median_spacing(model)
    icp = icp_align(template, model, initial_alignment(template, model), icp_config)
    aligned = PointCloud(icp.transform.apply(template.points), template.labels)
    graph = build_deformation_graph(aligned, node_spacing, k)
    deformed = embedded_deform(aligned, model, graph, config=deform_config).deformed
    d, idx = model.query(deformed.points)
    thr = 2.0 * spacing
    return CorrespondenceMap(idx.astype(np.int64), d, float(np.mean(d <= thr)), thr,
                             model.points, deformed.points)


def transfer_labels(cmap: CorrespondenceMap, template_labels, model_points=None) -> np.ndarray:
    """Part label per model point.

    A model point takes the majority label of the template points matched to
    it within ``cmap.threshold`` (ties go to the smaller id); points with no
    such match copy the label of their nearest labeled model point.
    """
    from scipy.spatial import cKDTree

    model_points = cmap.model_points if model_points is None else np.asarray(model_points)
    if model_points is None:
        raise ValueError("model points are required")
    template_labels = np.asarray(template_labels, dtype=np.int64)
    n_model = len(model_points)
    ok = cmap.residuals <= cmap.threshold
    if not np.any(ok):
        raise ValueError("no template point is matched within the threshold")
    alphabet, lab_idx = np.unique(template_labels, return_inverse=True)
    counts = np.zeros((n_model, len(alphabet)), dtype=np.int64)
    np.add.at(counts, (cmap.indices[ok], lab_idx[ok]), 1)
    matched = counts.sum(axis=1) > 0
    out = np.full(n_model, -1, dtype=np.int64)
    out[matched] = alphabet[np.argmax(counts[matched], axis=1)]
    if not np.all(matched):
        labeled = np.flatnonzero(matched)
        _, nn = cKDTree(model_points[labeled]).query(model_points[~matched])
        out[~matched] = out[labeled[nn]]
    return out


# correspondence table: u32 count, then count x (u32 index, f32 residual), little endian
_PAIR = np.dtype([("index", "<u4"), ("residual", "<f4")])


def save_correspondences(cmap: CorrespondenceMap, path) -> None:
    table = np.empty(len(cmap), dtype=_PAIR)
    table["index"] = cmap.indices
    table["residual"] = cmap.residuals
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(table)))
        fh.write(table.tobytes())


def load_correspondences(path) -> Tuple[np.ndarray, np.ndarray]:
    data = open(path, "rb").read()
    if len(data) < 4:
        raise FormatError("truncated correspondence table")
    (n,) = struct.unpack_from("<I", data, 0)
    if len(data) != 4 + n * _PAIR.itemsize:
        raise FormatError("correspondence table length mismatch")
    table = np.frombuffer(data, dtype=_PAIR, count=n, offset=4)
    return table["index"].astype(np.int64), table["residual"].astype(np.float64)
