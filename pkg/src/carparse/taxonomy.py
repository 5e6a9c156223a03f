"""Semantic car-part taxonomies: the full annotated list and the reduced
evaluation set used for segmentation scoring.

Part ids are contiguous from 0 within each taxonomy. Rendered label maps
reserve 0 for background, so a part with id ``k`` is written as ``k + 1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

CATEGORIES = ("light", "body", "window", "others")

# Value in a reduction map for parts that have no counterpart in the
# reduced set (scored as background).
IGNORE = -1

_FULL_NAMES = {
    "light": [
        "left headlight", "left fog light", "right headlight", "right fog light",
        "left tail light", "right tail light",
    ],
    "body": [
        "front left door", "front right door", "rear left door", "rear right door",
        "left side sill", "right side sill", "roof", "hood", "tailgate",
        "front bumper", "rear bumper", "fuel door", "left mirror", "right mirror",
        "front left fender", "front right fender", "rear left fender",
        "rear right fender", "front left door handle", "front right door handle",
        "rear left door handle", "rear right door handle", "front car logo",
        "rear car logo", "A/B pillar", "chassis", "grilles",
    ],
    "window": [
        "windscreen wiper", "rear window wiper", "windscreen", "rear window",
        "front left door window", "rear left side window", "rear left quarter glass",
        "rear right side window", "front right door window",
        "rear right quarter glass", "rear left quarter glass on door",
        "rear right quarter glass on door",
    ],
    "others": [
        "front left wheel/tire", "rear left wheel/tire", "front right wheel/tire",
        "rear right wheel/tire", "antenna", "exhaust(pipe)", "spare tire",
        "roof rack/taxi display", "left side step pedal", "right side step pedal",
        "rear left fender II", "rear left door II", "rear left spoiler",
        "rear right spoiler", "rear right fender II", "rear right door II",
        "rear heat sink", "left A pillar II", "right A pillar II",
    ],
}

REDUCED_NAMES = (
    "front light", "front part", "tail light", "rear part", "door", "roof",
    "roof rack", "hood", "mirror", "side window", "front window", "rear window",
    "wheel/tire",
)

_REDUCTION = {
    "left headlight": "front light", "left fog light": "front light",
    "right headlight": "front light", "right fog light": "front light",
    "left tail light": "tail light", "right tail light": "tail light",
    "front left door": "door", "front right door": "door",
    "rear left door": "door", "rear right door": "door",
    "left side sill": "door", "right side sill": "door",
    "roof": "roof", "hood": "hood", "tailgate": "rear part",
    "front bumper": "front part", "rear bumper": "rear part",
    "fuel door": "rear part", "left mirror": "mirror", "right mirror": "mirror",
    "front left fender": "front part", "front right fender": "front part",
    "rear left fender": "rear part", "rear right fender": "rear part",
    "front left door handle": "door", "front right door handle": "door",
    "rear left door handle": "door", "rear right door handle": "door",
    "front car logo": "front part", "rear car logo": "rear part",
    "A/B pillar": "roof", "chassis": None, "grilles": "front part",
    "windscreen wiper": "front window", "rear window wiper": "rear window",
    "windscreen": "front window", "rear window": "rear window",
    "front left door window": "side window", "rear left side window": "side window",
    "rear left quarter glass": "side window", "rear right side window": "side window",
    "front right door window": "side window",
    "rear right quarter glass": "side window",
    "rear left quarter glass on door": "side window",
    "rear right quarter glass on door": "side window",
    "front left wheel/tire": "wheel/tire", "rear left wheel/tire": "wheel/tire",
    "front right wheel/tire": "wheel/tire", "rear right wheel/tire": "wheel/tire",
    "antenna": "roof", "exhaust(pipe)": "rear part", "spare tire": "rear part",
    "roof rack/taxi display": "roof rack", "left side step pedal": "door",
    "right side step pedal": "door", "rear left fender II": "rear part",
    "rear left door II": "door", "rear left spoiler": "rear part",
    "rear right spoiler": "rear part", "rear right fender II": "rear part",
    "rear right door II": "door", "rear heat sink": "rear part",
    "left A pillar II": "side window", "right A pillar II": "side window",
}


@dataclass(frozen=True)
class PartTaxonomy:
    """Ordered part list with an optional map onto a reduced taxonomy."""

    parts: Tuple[Tuple[int, str, str], ...]
    reduction_map: Optional[Dict[int, int]] = None
    reduced: Optional["PartTaxonomy"] = field(default=None, compare=False)

    def __post_init__(self):
        ids = [p[0] for p in self.parts]
        if ids != list(range(len(ids))):
            raise ValueError("part ids must be contiguous from 0")
        names = [p[1] for p in self.parts]
        if len(set(names)) != len(names):
            raise ValueError("duplicate part names")
        for _, _, cat in self.parts:
            if cat not in CATEGORIES and cat != "reduced":
                raise ValueError(f"unknown part category {cat!r}")
        if self.reduction_map is not None:
            if set(self.reduction_map) != set(ids):
                raise ValueError("reduction map must cover every part id")

    def __len__(self) -> int:
        return len(self.parts)

    @property
    def names(self) -> List[str]:
        return [p[1] for p in self.parts]

    def id_of(self, name: str) -> int:
        for pid, pname, _ in self.parts:
            if pname == name:
                return pid
        raise KeyError(name)

    def name_of(self, part_id: int) -> str:
        return self.parts[part_id][1]

    def category_of(self, part_id: int) -> str:
        return self.parts[part_id][2]

    def reduce_ids(self, ids):
        """Map full-taxonomy part ids (array-like) to reduced ids; IGNORE passes through."""
        import numpy as np

        if self.reduction_map is None:
            raise ValueError("taxonomy has no reduction map")
        lut = np.array([self.reduction_map[i] for i in range(len(self))], dtype=np.int64)
        ids = np.asarray(ids, dtype=np.int64)
        out = np.full(ids.shape, IGNORE, dtype=np.int64)
        ok = ids >= 0
        out[ok] = lut[ids[ok]]
        return out

    def reduce_label_map(self, label_map):
        """Convert a background-0 label map in full ids to a background-0 map in reduced ids."""
        import numpy as np

        label_map = np.asarray(label_map)
        reduced = self.reduce_ids(label_map.astype(np.int64) - 1)
        return np.where(reduced >= 0, reduced + 1, 0).astype(label_map.dtype)


def reduced_taxonomy() -> PartTaxonomy:
    return PartTaxonomy(tuple((i, n, "reduced") for i, n in enumerate(REDUCED_NAMES)))


def full_taxonomy() -> PartTaxonomy:
    parts = []
    for cat in CATEGORIES:
        for name in _FULL_NAMES[cat]:
            parts.append((len(parts), name, cat))
    red = reduced_taxonomy()
    rmap = {}
    for pid, name, _ in parts:
        target = _REDUCTION[name]
        rmap[pid] = IGNORE if target is None else red.id_of(target)
    return PartTaxonomy(tuple(parts), rmap, red)


def label_lookup(taxonomy: PartTaxonomy, names: Sequence[str]) -> List[int]:
    return [taxonomy.id_of(n) for n in names]
