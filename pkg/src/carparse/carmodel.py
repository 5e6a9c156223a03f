"""Procedural car family with a fixed, part-labeled surface topology.

Every member shares one triangulation of a subdivided box, so vertex ``i``
means the same surface location on every car and the family can be fed
straight into PCA. The body is a prism below the belt line topped by a
frustum (the cabin), which keeps the whole solid convex: a face that points
toward the camera is never hidden by another face of the same car.

Every part label covers one edge-connected planar region, so a part that is
partly hidden always borders whatever hides it.

Car frame: x to the right, y down, z forward, origin at the bounding-box center.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Dict, Tuple

import numpy as np

from .geometry import CarDimensions, LabeledMesh
from .taxonomy import full_taxonomy

# grid resolution: lateral, lower band, upper band, longitudinal
GRID = (10, 6, 6, 24)

WHEEL_CENTER_W = 0.62  # normalized longitudinal position of the axles


@dataclass(frozen=True)
class CarParams:
    length: float = 4.5
    width: float = 1.8
    height: float = 1.5
    belt: float = 0.52        # belt-line height as a fraction of height
    side_taper: float = 0.12  # fractional narrowing of the roof relative to the body
    front_run: float = 1.3    # meters the cabin recedes from the front face
    rear_run: float = 0.7     # meters the cabin recedes from the rear face

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)])

    def dimensions(self) -> CarDimensions:
        return CarDimensions(wheelbase=2 * WHEEL_CENTER_W * self.length / 2,
                             width=self.width, height=self.height, length=self.length)


PARAM_RANGES: Dict[str, Tuple[float, float]] = {
    "length": (3.9, 5.1),
    "width": (1.65, 2.0),
    "height": (1.35, 1.8),
    "belt": (0.45, 0.6),
    "side_taper": (0.05, 0.2),
    "front_run": (0.9, 1.6),
    "rear_run": (0.3, 1.1),
}


def sample_params(rng: np.random.Generator) -> CarParams:
    return CarParams(**{k: float(rng.uniform(lo, hi)) for k, (lo, hi) in PARAM_RANGES.items()})


def _box_grid(nu: int, nl: int, nq: int, nw: int):
    """Surface grid of the unit box in (u, band coordinate, w) with welded vertices.

    The vertical coordinate ``h`` runs 0..2: 0..1 is the lower band, 1..2 the
    upper band, so a vertex row always sits exactly on the belt line.
    """
    us = np.linspace(-1, 1, nu + 1)
    hs = np.concatenate([np.linspace(0, 1, nl + 1), np.linspace(1, 2, nq + 1)[1:]])
    ws = np.linspace(-1, 1, nw + 1)
    key_index: Dict[Tuple[int, int, int], int] = {}
    verts, faces = [], []

    def vid(iu, ih, iw):
        k = (iu, ih, iw)
        if k not in key_index:
            key_index[k] = len(verts)
            verts.append((us[iu], hs[ih], ws[iw]))
        return key_index[k]

    def grid(points, n_a, n_b, flip):
        for a in range(n_a):
            for b in range(n_b):
                q = [points(a, b), points(a + 1, b), points(a + 1, b + 1), points(a, b + 1)]
                if flip:
                    q = q[::-1]
                faces.append((q[0], q[1], q[2]))
                faces.append((q[0], q[2], q[3]))

    nh = len(hs) - 1
    iu_max, iw_max = nu, nw
    # orientation flags chosen so that normals point outward (checked in tests)
    grid(lambda a, b: vid(0, a, b), nh, nw, False)            # left   (x = -1)
    grid(lambda a, b: vid(iu_max, a, b), nh, nw, True)        # right  (x = +1)
    grid(lambda a, b: vid(a, 0, b), nu, nw, True)             # bottom
    grid(lambda a, b: vid(a, nh, b), nu, nw, False)           # top
    grid(lambda a, b: vid(a, b, 0), nu, nh, False)            # rear   (w = -1)
    grid(lambda a, b: vid(a, b, iw_max), nu, nh, True)        # front  (w = +1)
    return np.array(verts), np.array(faces, dtype=np.int64)


def _label_face(u: float, h: float, w: float, side: str, tax) -> int:
    """Part id for a face whose centroid has box coordinates (u, h, w) on ``side``."""
    lower = h < 1.0
    t = h if lower else None          # 0..1 within the lower band
    q = None if lower else h - 1.0    # 0..1 within the upper band
    lr = "left" if u < 0 else "right"
    if side == "bottom":
        return tax.id_of("chassis")
    if side == "top":
        if abs(u) < 0.45 and -0.45 < w < 0.05:
            return tax.id_of("roof rack/taxi display")
        if abs(u) < 0.25 and w > 0.6:
            return tax.id_of("antenna") if w > 0.85 else tax.id_of("roof")
        return tax.id_of("roof")
    if side == "front":
        if lower:
            if t < 0.3:
                if abs(u) > 0.6:
                    return tax.id_of(f"{lr} fog light")
                return tax.id_of("front bumper")
            if t > 0.6 and abs(u) > 0.55:
                return tax.id_of(f"{lr} headlight")
            if abs(u) < 0.45 and t > 0.45:
                if abs(u) < 0.25 and t < 0.7:
                    return tax.id_of("front car logo")
                return tax.id_of("grilles")
            return tax.id_of("front bumper")
        if q < 0.4:
            return tax.id_of("hood")
        if abs(u) > 0.8 or q > 0.9:
            return tax.id_of("A/B pillar")
        if q < 0.55:
            return tax.id_of("windscreen wiper")
        return tax.id_of("windscreen")
    if side == "rear":
        if lower:
            if t < 0.3:
                if 0.3 < u < 0.8 and t < 0.2:
                    return tax.id_of("exhaust(pipe)")
                return tax.id_of("rear bumper")
            if t > 0.6 and abs(u) > 0.55:
                return tax.id_of(f"{lr} tail light")
            if abs(u) < 0.25 and 0.45 < t < 0.7:
                return tax.id_of("rear car logo")
            if abs(u) < 0.4 and t < 0.5:
                return tax.id_of("spare tire")
            return tax.id_of("tailgate")
        if q < 0.3:
            return tax.id_of(f"rear {lr} spoiler")
        if abs(u) > 0.8 or q > 0.9:
            return tax.id_of("rear heat sink")
        if abs(u) < 0.3 and q < 0.5:
            return tax.id_of("rear window wiper")
        return tax.id_of("rear window")
    # left / right side
    if lower:
        if t < 0.2:
            return tax.id_of(f"{lr} side sill")
        for wc, name in ((WHEEL_CENTER_W, "front"), (-WHEEL_CENTER_W, "rear")):
            if ((w - wc) / 0.2) ** 2 + ((t - 0.3) / 0.45) ** 2 < 1.0:
                return tax.id_of(f"{name} {lr} wheel/tire")
        if w > 0.4:
            return tax.id_of(f"front {lr} fender")
        if w < -0.4:
            if lr == "left" and 0.55 < t < 0.85 and -0.93 < w < -0.84:
                return tax.id_of("fuel door")
            return tax.id_of(f"rear {lr} fender")
        if t > 0.7 and (0.15 < w < 0.3 or -0.3 < w < -0.15):
            return tax.id_of(f"{'front' if w > 0 else 'rear'} {lr} door handle")
        if w >= 0:
            return tax.id_of(f"front {lr} door")
        return tax.id_of(f"rear {lr} door")
    if q < 0.2:
        if 0.45 < w < 0.75:
            return tax.id_of(f"{lr} mirror")
        return tax.id_of(f"{lr} A pillar II")
    # frame around the side glass; end columns keep it one connected region
    if q > 0.85 or abs(w) > 0.9:
        return tax.id_of(f"{lr} A pillar II")
    if w > 0.1:
        return tax.id_of(f"front {lr} door window")
    if w > -0.5:
        return tax.id_of(f"rear {lr} side window")
    return tax.id_of(f"rear {lr} quarter glass")


class CarTemplate:
    """Shared topology and labels of the procedural family."""

    def __init__(self, grid: Tuple[int, int, int, int] = GRID):
        nu, nl, nq, nw = grid
        self.grid = grid
        self.box_vertices, self.faces = _box_grid(nu, nl, nq, nw)
        self.taxonomy = full_taxonomy()
        self.face_part_labels = self._labels()

    def _labels(self) -> np.ndarray:
        # faces come in quad pairs; label both triangles by the quad center
        quads = np.c_[self.faces[0::2], self.faces[1::2, 2]]
        c = np.repeat(self.box_vertices[quads].mean(axis=1), 2, axis=0)
        corners = self.box_vertices[self.faces]
        labels = np.empty(len(self.faces), dtype=np.int64)
        for i, (u, h, w) in enumerate(c):
            cu, ch, cw = corners[i, :, 0], corners[i, :, 1], corners[i, :, 2]
            if np.all(cu == -1):
                side = "left"
            elif np.all(cu == 1):
                side = "right"
            elif np.all(ch == 0):
                side = "bottom"
            elif np.all(ch == 2):
                side = "top"
            elif np.all(cw == -1):
                side = "rear"
            else:
                side = "front"
            labels[i] = _label_face(u, h, w, side, self.taxonomy)
        return labels

    @property
    def n_vertices(self) -> int:
        return len(self.box_vertices)

    def vertices(self, p: CarParams) -> np.ndarray:
        u, h, w = self.box_vertices.T
        belt_h = p.belt * p.height
        s = np.clip(h - 1.0, 0.0, 1.0)          # progress through the cabin
        height_above = np.where(h <= 1.0, h * belt_h, belt_h + s * (p.height - belt_h))
        half_w = 0.5 * p.width * (1.0 - p.side_taper * s)
        z_front = 0.5 * p.length - p.front_run * s
        z_rear = -0.5 * p.length + p.rear_run * s
        x = u * half_w
        z = z_rear + (w + 1.0) * 0.5 * (z_front - z_rear)
        y = 0.5 * p.height - height_above       # y points down, origin mid-height
        return np.stack([x, y, z], axis=1)

    def mesh(self, p: CarParams, category_id: int = 0) -> LabeledMesh:
        return LabeledMesh(self.vertices(p), self.faces, self.face_part_labels,
                           p.dimensions(), category_id)


_DEFAULT_TEMPLATE = None


def default_template() -> CarTemplate:
    global _DEFAULT_TEMPLATE
    if _DEFAULT_TEMPLATE is None:
        _DEFAULT_TEMPLATE = CarTemplate()
    return _DEFAULT_TEMPLATE


def sample_family(count: int, seed: int = 0, template: CarTemplate = None):
    """``count`` random family members as (params, vertices) lists."""
    template = template or default_template()
    rng = np.random.default_rng(seed)
    params = [sample_params(rng) for _ in range(count)]
    return params, [template.vertices(p) for p in params]
