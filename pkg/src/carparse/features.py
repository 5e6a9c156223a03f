"""Per-instance part features: gating, ROI sampling and coordinate channels."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import EmptyBox, FormatError, ShapeMismatch

ROI_SIZE = 14


@dataclass(frozen=True, eq=False)
class FeatureStack:
    """``channels`` is (C, H, W); ``layout`` maps group name to a [start, stop) channel range."""

    channels: np.ndarray
    layout: Dict[str, Tuple[int, int]]
    roi: Tuple[float, float, float, float]  # x0, y0, x1, y1 in image pixels

    def __post_init__(self):
        c = np.asarray(self.channels)
        if c.ndim != 3:
            raise ShapeMismatch("channels must be (C, H, W)")
        stops = sorted(self.layout.values())
        pos = 0
        for a, b in stops:
            if a != pos or b <= a:
                raise ValueError(f"layout is not a contiguous partition: {self.layout}")
            pos = b
        if pos != c.shape[0]:
            raise ValueError(f"layout covers {pos} channels, stack has {c.shape[0]}")

    @property
    def C(self) -> int:
        return self.channels.shape[0]

    def group(self, name: str) -> np.ndarray:
        a, b = self.layout[name]
        return self.channels[a:b]

    def layout_json(self) -> str:
        order = sorted(self.layout.items(), key=lambda kv: kv[1][0])
        return json.dumps({"shape": list(self.channels.shape), "roi": list(self.roi),
                           "groups": [{"name": k, "start": a, "stop": b} for k, (a, b) in order]})

    def save(self, stem) -> None:
        """Write ``<stem>.f32`` (C-order float32) and ``<stem>.json`` (layout)."""
        np.ascontiguousarray(self.channels, dtype="<f4").tofile(f"{stem}.f32")
        with open(f"{stem}.json", "w") as fh:
            fh.write(self.layout_json())

    @classmethod
    def load(cls, stem) -> "FeatureStack":
        try:
            meta = json.load(open(f"{stem}.json"))
            data = np.fromfile(f"{stem}.f32", dtype="<f4")
            shape = tuple(meta["shape"])
            layout = {g["name"]: (g["start"], g["stop"]) for g in meta["groups"]}
        except (KeyError, ValueError) as exc:
            raise FormatError(f"{stem}: bad feature stack ({exc})") from exc
        if data.size != int(np.prod(shape)):
            raise FormatError(f"{stem}: expected {np.prod(shape)} values, found {data.size}")
        return cls(data.reshape(shape).astype(np.float64), layout, tuple(meta["roi"]))


def _check_box(box, width: int, height: int):
    x0, y0, x1, y1 = map(float, box)
    if not (x1 > x0 and y1 > y0):
        raise EmptyBox(f"box {box} has no area")
    if x0 < 0 or y0 < 0 or x1 > width or y1 > height:
        raise EmptyBox(f"box {box} leaves the {width}x{height} image")
    return x0, y0, x1, y1


def sample_points(box, out: int = ROI_SIZE) -> Tuple[np.ndarray, np.ndarray]:
    """Pixel-space sample positions at cell centers: (out,) x values and (out,) y values."""
    x0, y0, x1, y1 = box
    k = np.arange(out) + 0.5
    return x0 + k * (x1 - x0) / out, y0 + k * (y1 - y0) / out


def bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample an (H, W, C) map at continuous positions, pixel centers at integer + 0.5.

    Positions outside the outermost pixel centers clamp to the border value.
    """
    H, W = img.shape[:2]
    fx = np.clip(np.asarray(xs, float) - 0.5, 0, W - 1)
    fy = np.clip(np.asarray(ys, float) - 0.5, 0, H - 1)
    ix = np.minimum(np.floor(fx).astype(int), max(W - 2, 0))
    iy = np.minimum(np.floor(fy).astype(int), max(H - 2, 0))
    ax = (fx - ix)[..., None]
    ay = (fy - iy)[..., None]
    ix1 = np.minimum(ix + 1, W - 1)
    iy1 = np.minimum(iy + 1, H - 1)
    return ((1 - ay) * ((1 - ax) * img[iy, ix] + ax * img[iy, ix1])
            + ay * ((1 - ax) * img[iy1, ix] + ax * img[iy1, ix1]))


def roi_align_coords(maps: np.ndarray, box, out: int = ROI_SIZE,
                     image_size: Optional[Tuple[int, int]] = None) -> FeatureStack:
    """Bilinearly sample ``maps`` (H, W, C) inside ``box`` on an ``out`` x ``out`` grid.

    Two channels are appended with each sample's image position normalized to
    [-1, 1], origin at the image center. ``image_size`` is (width, height) and
    defaults to the map size.
    """
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim == 2:
        maps = maps[..., None]
    H, W, C = maps.shape
    width, height = image_size or (W, H)
    x0, y0, x1, y1 = _check_box(box, width, height)
    xs, ys = sample_points((x0, y0, x1, y1), out)
    # map size may differ from image size (e.g. downsampled predictions)
    gx, gy = np.meshgrid(xs * W / width, ys * H / height)
    sampled = bilinear(maps, gx, gy)                         # (out, out, C)
    cx, cy = np.meshgrid(2 * xs / width - 1, 2 * ys / height - 1)
    stack = np.concatenate([sampled.transpose(2, 0, 1), cx[None], cy[None]], axis=0)
    layout = {"maps": (0, C), "coord_x": (C, C + 1), "coord_y": (C + 1, C + 2)}
    return FeatureStack(stack, layout, (x0, y0, x1, y1))


def gate_parts(part_probs: np.ndarray, instance_prob: np.ndarray, mode: str = "multiply") -> np.ndarray:
    """Constrain part maps (..., H, W) channel-first by an instance map (H, W).

    ``multiply`` scales every part channel by the instance probability;
    ``concat`` appends the instance map as one extra channel instead.
    """
    parts = np.asarray(part_probs, dtype=np.float64)
    inst = np.asarray(instance_prob, dtype=np.float64)
    if parts.shape[-2:] != inst.shape:
        raise ShapeMismatch(f"part maps {parts.shape[-2:]} vs instance map {inst.shape}")
    if mode == "multiply":
        return parts * inst
    if mode == "concat":
        return np.concatenate([parts, inst[None]], axis=0)
    raise ValueError(f"unknown gating mode {mode!r}")


def assemble_part_features(instance_prob: np.ndarray, part_probs: np.ndarray,
                           coords: np.ndarray, learned: Optional[np.ndarray] = None,
                           roi=(0.0, 0.0, 0.0, 0.0), include_probs: Optional[bool] = None) -> FeatureStack:
    """Concatenate channel groups in the order learned, instance_prob, part_probs, coord_x, coord_y.

    When a learned block is supplied it stands for everything the convolutional
    blocks derive from the probability maps, so the raw probability maps are
    left out unless ``include_probs`` is set; the stack is then learned + 2.
    """
    inst = np.asarray(instance_prob, dtype=np.float64)
    if inst.ndim == 2:
        inst = inst[None]
    parts = np.asarray(part_probs, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    size = inst.shape[-2:]
    if include_probs is None:
        include_probs = learned is None
    groups: List[Tuple[str, np.ndarray]] = []
    if learned is not None:
        groups.append(("learned", np.asarray(learned, dtype=np.float64)))
    if include_probs:
        groups += [("instance_prob", inst), ("part_probs", parts)]
    if coords.shape[0] != 2:
        raise ShapeMismatch("coords must hold two channels")
    groups += [("coord_x", coords[:1]), ("coord_y", coords[1:2])]
    layout, pos = {}, 0
    for name, g in groups:
        if g.ndim != 3 or g.shape[-2:] != size:
            raise ShapeMismatch(f"group {name} has shape {g.shape}, expected (*, {size[0]}, {size[1]})")
        layout[name] = (pos, pos + g.shape[0])
        pos += g.shape[0]
    return FeatureStack(np.concatenate([g for _, g in groups], axis=0), layout, tuple(roi))


def instance_features(instance_prob_map: np.ndarray, part_prob_map: np.ndarray, box,
                      learned: Optional[np.ndarray] = None, mode: str = "multiply",
                      out: int = ROI_SIZE) -> FeatureStack:
    """Full-image maps (H, W) and (H, W, P) to one ROI feature stack."""
    gated = gate_parts(np.moveaxis(part_prob_map, -1, 0), instance_prob_map, mode)
    both = np.concatenate([instance_prob_map[None], gated], axis=0)
    roi = roi_align_coords(np.moveaxis(both, 0, -1), box, out)
    maps = roi.group("maps")
    return assemble_part_features(maps[0], maps[1:], np.concatenate([roi.group("coord_x"),
                                                                      roi.group("coord_y")]),
                                  learned, roi.roi)
