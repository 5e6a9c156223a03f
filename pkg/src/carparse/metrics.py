"""Evaluation: joint 3D precision (A3DP), orientation scores and part IoU."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, EmptyGroundTruth, ShapeMismatch
from .pose import Camera, CarPose, geodesic_distance, wrap_angle
from .shape_space import ShapeSpace
from .taxonomy import PartTaxonomy

# --------------------------------------------------------------------------
# A3DP
# --------------------------------------------------------------------------

_N_TUPLES = 10
_SCALE = tuple(np.linspace(1.0, 0.1, _N_TUPLES))


@dataclass(frozen=True)
class A3dpConfig:
    """Threshold tuples (translation, rotation, shape similarity), loosest first.

    ``translation`` is in meters for absolute mode; ``relative`` holds the
    fractions of ground-truth distance used in relative mode. The c-l and c-s
    criteria are the tuples at ``loose_index`` and ``strict_index``.
    """

    translation: Tuple[float, ...] = tuple(2.8 * k for k in _SCALE)
    relative: Tuple[float, ...] = tuple(0.1 * k for k in _SCALE)
    rotation: Tuple[float, ...] = tuple(math.pi / 6 * k for k in _SCALE)
    shape: Tuple[float, ...] = tuple(np.linspace(0.5, 0.95, _N_TUPLES))
    loose_index: int = 0
    strict_index: int = 5

    def __post_init__(self):
        n = len(self.translation)
        if n < 2 or not (len(self.relative) == len(self.rotation) == len(self.shape) == n):
            raise ConfigError("threshold lists must share one length of at least 2")
        for name, seq, sign in (("translation", self.translation, -1), ("relative", self.relative, -1),
                                ("rotation", self.rotation, -1), ("shape", self.shape, 1)):
            if np.any(np.diff(seq) * sign < 0):
                raise ConfigError(f"{name} thresholds must tighten monotonically")
        for idx in (self.loose_index, self.strict_index):
            if not 0 <= idx < n:
                raise ConfigError(f"criterion index {idx} outside 0..{n - 1}")
        if self.loose_index == self.strict_index:
            raise ConfigError("loose and strict criteria must differ")

    def tuples(self, mode: str = "abs") -> List[Tuple[float, float, float]]:
        trans = self.translation if mode == "abs" else self.relative
        return list(zip(trans, self.rotation, self.shape))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v
                for k, v in ((k, getattr(self, k)) for k in self.__dataclass_fields__)}

    @classmethod
    def from_dict(cls, d: dict) -> "A3dpConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown A3DP config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True, eq=False)
class Car3D:
    """A car hypothesis or ground truth in one image."""

    pose: CarPose
    shape: np.ndarray
    score: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError("scores must be finite")


@dataclass(frozen=True, eq=False)
class EvalRecord:
    camera: Camera
    preds: List[Car3D]
    gts: List[Car3D]


@dataclass(frozen=True)
class A3dpResult:
    mean: float
    c_l: float
    c_s: float
    per_tuple: Tuple[float, ...]
    n_preds: int
    n_gts: int
    recall: Tuple[float, ...] = ()


def shape_similarity(space: ShapeSpace, s_pred, s_gt) -> float:
    """``1 - mean vertex distance / gt bounding-box diagonal`` in the car frame."""
    Vp = space.vertices(s_pred)
    Vg = space.vertices(s_gt)
    diag = float(np.linalg.norm(Vg.max(axis=0) - Vg.min(axis=0)))
    return 1.0 - float(np.mean(np.linalg.norm(Vp - Vg, axis=1))) / diag


def _pair_errors(rec: EvalRecord, space: ShapeSpace):
    """Greedy score-ordered assignment to the nearest unmatched ground truth.

    The assignment does not depend on thresholds, so loosening any threshold
    can only turn false positives into true positives.
    """
    order = sorted(range(len(rec.preds)), key=lambda i: -rec.preds[i].score)
    gt_T = [g.pose.translation(rec.camera) for g in rec.gts]
    gt_R = [g.pose.rotation(rec.camera) for g in rec.gts]
    free = set(range(len(rec.gts)))
    out = []
    for i in order:
        p = rec.preds[i]
        if not free:
            out.append(None)
            continue
        T = p.pose.translation(rec.camera)
        j = min(free, key=lambda k: (float(np.linalg.norm(T - gt_T[k])), k))
        free.discard(j)
        g = rec.gts[j]
        out.append((float(np.linalg.norm(T - gt_T[j])), g.pose.distance,
                    geodesic_distance(p.pose.rotation(rec.camera), gt_R[j]),
                    shape_similarity(space, p.shape, g.shape)))
    return out


def a3dp(records: Sequence[EvalRecord], space: ShapeSpace, cfg: Optional[A3dpConfig] = None,
         mode: str = "abs") -> A3dpResult:
    """Precision at each threshold tuple, their mean, and the c-l / c-s tuples."""
    cfg = cfg or A3dpConfig()
    if mode not in ("abs", "rel"):
        raise ValueError("mode must be 'abs' or 'rel'")
    n_gt = sum(len(r.gts) for r in records)
    if n_gt == 0:
        raise EmptyGroundTruth("no ground-truth cars: precision is undefined")
    pairs = [e for r in records for e in _pair_errors(r, space)]
    n_pred = len(pairs)

    def precision_recall(tup):
        t, rot, shp = tup
        tp = 0
        for e in pairs:
            if e is None:
                continue
            terr, dist, rerr, sim = e
            limit = t if mode == "abs" else t * dist
            if terr <= limit and rerr <= rot and sim >= shp:
                tp += 1
        return (tp / n_pred if n_pred else 0.0), tp / n_gt

    pr = [precision_recall(t) for t in cfg.tuples(mode)]
    prec = tuple(p for p, _ in pr)
    return A3dpResult(float(np.mean(prec)), prec[cfg.loose_index], prec[cfg.strict_index], prec,
                      n_pred, n_gt, tuple(r for _, r in pr))


# --------------------------------------------------------------------------
# Detection AP, AOS and OS
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Box2D:
    box: Tuple[float, float, float, float]      # x0, y0, x1, y1
    azimuth: float
    score: float = 1.0


def box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _interpolated(recall: np.ndarray, values: np.ndarray, points: int = 11) -> float:
    """Mean over recall levels 0, 0.1, ..., 1 of the best value at recall >= level."""
    total = 0.0
    for r in np.linspace(0.0, 1.0, points):
        mask = recall >= r - 1e-12
        total += values[mask].max() if np.any(mask) else 0.0
    return total / points


def aos_os(preds: Sequence[Sequence[Box2D]], gts: Sequence[Sequence[Box2D]],
           iou_threshold: float = 0.7) -> Tuple[float, float, float]:
    """(AP, AOS, OS) over images; OS = AOS / AP (0 when AP is 0)."""
    if len(preds) != len(gts):
        raise ShapeMismatch("prediction and ground-truth image counts differ")
    n_gt = sum(len(g) for g in gts)
    if n_gt == 0:
        raise EmptyGroundTruth("no ground-truth boxes: AP is undefined")
    dets = []  # (score, is_tp, similarity)
    for P, G in zip(preds, gts):
        taken = set()
        for p in sorted(P, key=lambda d: -d.score):
            best, best_iou = None, iou_threshold
            for j, g in enumerate(G):
                if j in taken:
                    continue
                iou = box_iou(p.box, g.box)
                if iou >= best_iou:
                    best, best_iou = j, iou
            if best is None:
                dets.append((p.score, 0, 0.0))
            else:
                taken.add(best)
                delta = wrap_angle(p.azimuth - G[best].azimuth)
                dets.append((p.score, 1, (1.0 + math.cos(delta)) / 2.0))
    if not dets:
        return 0.0, 0.0, 0.0
    dets.sort(key=lambda d: -d[0])
    tp = np.cumsum([d[1] for d in dets])
    sim = np.cumsum([d[2] for d in dets])
    k = np.arange(1, len(dets) + 1)
    recall = tp / n_gt
    ap = _interpolated(recall, tp / k)
    aos = _interpolated(recall, sim / k)
    return ap, aos, orientation_score(ap, aos)


def orientation_score(ap: float, aos: float) -> float:
    return aos / ap if ap > 0 else 0.0


# --------------------------------------------------------------------------
# Part IoU
# --------------------------------------------------------------------------

def part_iou(pred_map, gt_map, taxonomy: Union[PartTaxonomy, int], ignore_label: Optional[int] = None
             ) -> Tuple[np.ndarray, float]:
    """Per-class IoU for labels 1..n (part id + 1; 0 is background) and their mean.

    ``taxonomy`` gives the class count n, directly or as ``len(taxonomy)``.

    Classes absent from both maps get NaN and are left out of the mean.
    Pixels where the ground truth equals ``ignore_label`` are not scored.
    """
    n_classes = taxonomy if isinstance(taxonomy, (int, np.integer)) else len(taxonomy)
    pred = np.asarray(pred_map)
    gt = np.asarray(gt_map)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")
    keep = np.ones(gt.shape, bool) if ignore_label is None else gt != ignore_label
    p = np.where(keep, pred, -1).ravel().astype(np.int64)
    g = np.where(keep, gt, -1).ravel().astype(np.int64)
    size = n_classes + 1
    valid = (p >= 0) & (p < size) & (g >= 0) & (g < size)
    conf = np.bincount(p[valid] * size + g[valid], minlength=size * size).reshape(size, size)
    inter = np.diag(conf).astype(float)
    union = conf.sum(axis=0) + conf.sum(axis=1) - np.diag(conf)
    # predicted labels outside the class range still count against the gt class
    out_of_range = np.bincount(g[(p >= size) & (g >= 0) & (g < size)], minlength=size)
    union = union + out_of_range
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, np.nan)[1:]
    present = ~np.isnan(iou)
    miou = float(np.mean(iou[present])) if np.any(present) else float("nan")
    return iou, miou


def format_a3dp_table(rows: Dict[str, A3dpResult]) -> str:
    lines = ["method,abs_mean,abs_c-l,abs_c-s"]
    for name, r in rows.items():
        lines.append(f"{name},{100 * r.mean:.2f},{100 * r.c_l:.2f},{100 * r.c_s:.2f}")
    return "\n".join(lines)
