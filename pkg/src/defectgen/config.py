"""Pipeline configuration: schema, YAML round-trip, and hashing.

One nested config drives every stage.  Unknown keys are rejected so a
typo cannot silently fall back to a default.  config_hash canonicalizes
to JSON and digests it; reports and cache directories are keyed by it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .boxes import BoxConfig
from .detector import DetectorTrainConfig
from .diffusion import BackboneTrainConfig
from .embedding import InversionConfig
from .errors import ConfigError
from .generation import GenerationConfig
from .toyworld import ToyWorldConfig


@dataclass
class EvalConfig:
    smooth_kernel: int = 21
    dump_curves: bool = False
    render_figures: bool = True
    extras: dict = field(default_factory=dict)


@dataclass
class PipelineConfig:
    data_root: str = ""
    categories: Optional[list[str]] = None
    channels: int = 3
    seed: int = 0
    backbone_kind: str = "toy"  # "toy" or an adapter spec "name:location"
    backbone: BackboneTrainConfig = field(default_factory=BackboneTrainConfig)
    inversion: InversionConfig = field(default_factory=InversionConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    detector: DetectorTrainConfig = field(default_factory=DetectorTrainConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    toy: ToyWorldConfig = field(default_factory=ToyWorldConfig)


_SECTION_TYPES = {
    "backbone": BackboneTrainConfig,
    "inversion": InversionConfig,
    "generation": GenerationConfig,
    "detector": DetectorTrainConfig,
    "evaluation": EvalConfig,
    "toy": ToyWorldConfig,
}

_TUPLE_FIELDS = {"size_range", "categories", "anomaly_types"}


def _build_section(cls, data: dict, path: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in {path}: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {path}: {exc}") from exc


def config_from_dict(data: dict) -> PipelineConfig:
    data = dict(data or {})
    top = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = set(data) - top
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be a mapping")
            kwargs[key] = _build_section(_SECTION_TYPES[key], value, key)
        else:
            kwargs[key] = value
    if kwargs.get("categories") is not None:
        kwargs["categories"] = [str(c) for c in kwargs["categories"]]
    return PipelineConfig(**kwargs)


def _plain(value):
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: _plain(getattr(value, f.name))
                for f in dataclasses.fields(value)}
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    return value


def config_to_dict(config) -> dict:
    return _plain(config)


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"config root in {path} must be a mapping")
    return config_from_dict(data)


def save_config(path: str | Path, config: PipelineConfig) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config_to_dict(config), sort_keys=True))


def config_hash(config_or_dict, *extra: str) -> str:
    """Short stable digest of a config (or any JSON-serializable dict)."""
    payload = config_to_dict(config_or_dict)
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    h = hashlib.sha256(blob.encode("utf-8"))
    for item in extra:
        h.update(b"|")
        h.update(str(item).encode("utf-8"))
    return h.hexdigest()[:16]


def toy_profile(data_root: str = "toy_data", seed: int = 0) -> PipelineConfig:
    """Desk-scale settings: minutes on a CPU, directionally meaningful."""
    cfg = PipelineConfig(data_root=data_root, seed=seed)
    cfg.backbone = BackboneTrainConfig(ae_iters=500, denoise_iters=1200)
    cfg.inversion = InversionConfig(iterations=500, lr=0.02)
    cfg.generation = GenerationConfig(n_steps=25, foreground_method="full")
    cfg.detector = DetectorTrainConfig(iters=400, base=24, smooth_kernel=11)
    cfg.evaluation = EvalConfig(smooth_kernel=11)
    return cfg


def default_box_table() -> dict:
    """Per-category box size ranges; single published point plus default."""
    return {
        "default": {"size_range": [0.1, 0.5], "min_overlap": 0.5},
        "hazelnut": {"size_range": [0.1, 0.5], "min_overlap": 0.5},
    }


__all__ = [
    "BoxConfig",
    "EvalConfig",
    "PipelineConfig",
    "config_from_dict",
    "config_to_dict",
    "config_hash",
    "load_config",
    "save_config",
    "toy_profile",
    "default_box_table",
]
