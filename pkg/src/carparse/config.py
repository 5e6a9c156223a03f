"""Versioned pipeline configuration, seed substreams and run manifests."""
from __future__ import annotations

import hashlib
import json
import platform
import zlib
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict

import numpy as np

from .errors import ConfigError
from .losses import LossWeights
from .metrics import A3dpConfig
from .scene import SceneConfig
from .solver import RefineConfig

CONFIG_VERSION = 1
MANIFEST_VERSION = 1


def _from_section(cls, d: Any, section: str):
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {section!r} section: {exc}") from exc


@dataclass(frozen=True)
class CodecConfig:
    angle_bins: int = 8
    distance_bins: int = 32
    distance_min: float = 3.0
    distance_max: float = 150.0

    def __post_init__(self):
        if self.angle_bins < 1 or self.distance_bins < 1:
            raise ConfigError("bin counts must be positive")
        if not 0 < self.distance_min < self.distance_max:
            raise ConfigError("need 0 < distance_min < distance_max")


@dataclass(frozen=True)
class SpaceConfig:
    family_models: int = 40         # procedural models used when no model clouds are given
    dim: int = 22

    def __post_init__(self):
        if self.family_models < 2:
            raise ConfigError("need at least two models")


@dataclass(frozen=True)
class PipelineConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    remesh_spacing: float = 0.01
    space: SpaceConfig = field(default_factory=SpaceConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    a3dp: A3dpConfig = field(default_factory=A3dpConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    codecs: CodecConfig = field(default_factory=CodecConfig)

    def to_dict(self) -> dict:
        return {"version": self.version, "seed": self.seed, "remesh_spacing": self.remesh_spacing,
                "space": asdict(self.space), "scene": self.scene.to_dict(),
                "refine": asdict(self.refine), "a3dp": self.a3dp.to_dict(),
                "loss_weights": asdict(self.loss_weights), "codecs": asdict(self.codecs)}

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        version = d.get("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"configuration version {version} is not supported "
                              f"(expected {CONFIG_VERSION})")
        kw: Dict[str, Any] = {"version": version}
        if "seed" in d:
            if not isinstance(d["seed"], int) or d["seed"] < 0:
                raise ConfigError("seed must be a non-negative integer")
            kw["seed"] = d["seed"]
        if "remesh_spacing" in d:
            kw["remesh_spacing"] = float(d["remesh_spacing"])
        if "scene" in d:
            kw["scene"] = SceneConfig.from_dict(d["scene"])
        if "a3dp" in d:
            kw["a3dp"] = A3dpConfig.from_dict(d["a3dp"])
        for name, sub in (("space", SpaceConfig), ("refine", RefineConfig),
                          ("loss_weights", LossWeights), ("codecs", CodecConfig)):
            if name in d:
                kw[name] = _from_section(sub, d[name], name)
        return cls(**kw)

    def with_seed(self, seed: int) -> "PipelineConfig":
        d = self.to_dict()
        d["seed"] = int(seed)
        return PipelineConfig.from_dict(d)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def load_config(path) -> PipelineConfig:
    """Read a configuration file, or the configuration recorded in a run manifest."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: cannot read configuration ({exc})") from exc
    if isinstance(data, dict) and "manifest_version" in data:
        data = data.get("config", {})
    return PipelineConfig.from_dict(data)


def substream_seed(master: int, name: str) -> int:
    """Independent 32-bit seed for the named substream of ``master``."""
    ss = np.random.SeedSequence([int(master), zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


def versions() -> Dict[str, str]:
    import numba
    import PIL
    import scipy

    from . import __version__

    return {"artifact": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__, "pillow": PIL.__version__}


def manifest(command: str, argv, cfg: PipelineConfig, outputs) -> dict:
    """Run record: no timestamps or host data, so identical runs give identical manifests."""
    return {"manifest_version": MANIFEST_VERSION, "command": command, "argv": list(argv),
            "seed": cfg.seed, "config_hash": cfg.digest(), "versions": versions(),
            "config": cfg.to_dict(), "outputs": sorted(map(str, outputs))}
