"""Pipeline configuration: file paths, global scale and per-stage settings."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .contact import ContactConfig
from .io import canonical, digest_bytes
from .metrics import CD_MODES
from .refine import EnergyWeights, RefineConfig
from .retarget import RetargetConfig


class ConfigError(ValueError):
    pass


@dataclass
class MetricsOptions:
    cd_mode: str = "bidirectional"
    bins: int = 50
    acc_space: str = "joint"

    def __post_init__(self):
        if self.cd_mode not in CD_MODES:
            raise ConfigError(f"cd_mode must be one of {CD_MODES}")
        if self.acc_space not in ("joint", "keypoint"):
            raise ConfigError("acc_space must be 'joint' or 'keypoint'")
        if self.bins < 1:
            raise ConfigError("bins must be positive")


@dataclass
class PipelineConfig:
    chain: Path
    mesh: Path
    human: Path
    output_dir: Path = Path("handxfer_out")
    scale_s: float = 10 / 9
    seed: int = 0
    retarget: RetargetConfig = field(default_factory=RetargetConfig)
    contact: ContactConfig = field(default_factory=ContactConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    metrics: MetricsOptions = field(default_factory=MetricsOptions)

    def __post_init__(self):
        for name in ("chain", "mesh", "human", "output_dir"):
            setattr(self, name, Path(getattr(self, name)))
        if not self.scale_s > 0:
            raise ConfigError("scale_s must be positive")
        self.retarget.seed = self.seed

    def validate(self):
        """Every referenced input exists (checked before any compute)."""
        for name in ("chain", "mesh", "human"):
            p = getattr(self, name)
            if not p.is_file():
                raise ConfigError(f"{name} file not found: {p}")
        return self

    def snapshot(self):
        """Result-relevant settings as plain JSON (paths by name only, no output dir)."""
        def plain(x):
            if dataclasses.is_dataclass(x):
                return {f.name: plain(getattr(x, f.name)) for f in dataclasses.fields(x)}
            if isinstance(x, np.ndarray):
                return x.tolist()
            if isinstance(x, (tuple, list)):
                return [plain(v) for v in x]
            if isinstance(x, Path):
                return x.name
            return x

        snap = plain(self)
        snap.pop("output_dir")
        return snap

    def digest(self):
        return digest_bytes(canonical(self.snapshot()).encode())[:16]


_SECTIONS = {"retarget": RetargetConfig, "contact": ContactConfig, "metrics": MetricsOptions}


def _build(cls, data, where):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


def config_from_dict(data, base_dir=".", overrides=None):
    """Build a config; input paths are relative to ``base_dir``, the output dir to the CWD."""
    data = dict(data)
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    base = Path(base_dir)
    for key in ("chain", "mesh", "human"):
        if key not in data:
            raise ConfigError(f"missing required key {key!r}")
        data[key] = base / data[key]
    kw = {}
    for key, cls in _SECTIONS.items():
        if key in data:
            kw[key] = _build(cls, data.pop(key), key)
    if "refine" in data:
        ref = dict(data.pop("refine"))
        if "weights" in ref:
            ref["weights"] = _build(EnergyWeights, ref["weights"], "refine.weights")
        kw["refine"] = _build(RefineConfig, ref, "refine")
    try:
        return PipelineConfig(**data, **kw)
    except TypeError as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


def load_config(path, overrides=None):
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(data, path.parent, overrides)
