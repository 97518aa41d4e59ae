"""Structured run configuration, YAML IO, flag overrides and run manifests."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import platform
import sys
import time
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .model import ModelConfig
from .mmfe import MmfeConfig
from .scene import SceneConfig
from .tfe import TemporalConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    train_scenes: int = 200
    test_scenes: int = 50
    objects: tuple[int, int] = (3, 8)
    motion: bool = False
    seed: int = 0
    test_seed: int = 1
    scene: SceneConfig = field(default_factory=SceneConfig)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)


def full_scale() -> RunConfig:
    """Full-size settings (nuScenes scale); far too heavy for a CPU run."""
    return RunConfig(
        model=ModelConfig(bev_hw=(150, 150), roi=51.2, voxel_size=0.075, voxel_z=(-5.0, 3.0),
                          image_hw=(640, 1600), n_cams=6, image_channels=256,
                          mmfe=MmfeConfig(num_layers=6, embed_dim=256, heads=8, points_per_head=4),
                          temporal=TemporalConfig(num_layers=3, frames=8)),
        data=DataConfig(scene=SceneConfig(roi=51.2, image_hw=(640, 1600), n_cams=6, frames=8)),
    )


# ---------------------------------------------------------------------------
# dict <-> dataclass


def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [to_dict(v) for v in obj]
    if isinstance(obj, frozenset):
        return sorted(obj)
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _coerce(tp, val):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, val)
    if origin is typing.Union or type(tp).__name__ == "UnionType":
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return None if val is None else _coerce(args[0], val)
    if origin is tuple:
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v) for v in val)
        return tuple(_coerce(a, v) for a, v in zip(args, val))
    if tp is frozenset or origin is frozenset:
        return frozenset(val)
    if tp is float:
        return float(val)
    if tp is int:
        return int(val)
    return val


def from_dict(cls, data: dict | None):
    """Build ``cls`` from a (possibly partial) nested dict; unknown keys are errors."""
    data = dict(data or {})
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise KeyError(f"{cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {k: _coerce(hints[k], v) for k, v in data.items()}
    return cls(**kwargs)


def merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """``key.sub=value`` strings; values are parsed as YAML scalars/lists."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        key, _, raw = item.partition("=")
        if not _:
            raise ValueError(f"override {item!r} is not key=value")
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return data


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> RunConfig:
    data = to_dict(RunConfig())
    if path is not None:
        text = Path(path).read_text()
        data = merge(data, yaml.safe_load(text) or {})
    data = apply_overrides(data, list(overrides))
    return from_dict(RunConfig, data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def config_hash(cfg) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# manifest


def versions() -> dict[str, str]:
    from . import __version__
    return {"python": platform.python_version(), "numpy": np.__version__, "pyyaml": yaml.__version__, "bevfuse": __version__}


def write_manifest(out_dir: str | Path, command: str, cfg, seed: int, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": sys.argv,
        "config_hash": config_hash(cfg),
        "seed": seed,
        "versions": versions(),
        "time": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "config": to_dict(cfg),
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return path
