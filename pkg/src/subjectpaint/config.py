"""Run configuration profiles and the versioned checkpoint format."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Optional

import torch

from .encoders import SubjectAugmentConfig
from .layoutgen import LayoutModelConfig, LayoutTrainConfig
from .paintnet import PaintModelConfig, PaintTrainConfig

CHECKPOINT_FORMAT = "subjectpaint-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class DataConfig:
    train_count: int = 2000
    val_count: int = 200
    test_count: int = 200
    image_size: int = 32
    grammar: Optional[str] = None


@dataclass
class EvalConfig:
    k: int = 5
    max_samples: int = 200
    detect_tolerance: float = 0.1
    layout_source: str = "gt"  # images painted from "gt" or "generated" layouts
    chunk_size: int = 50


@dataclass
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    layout_model: LayoutModelConfig = field(default_factory=LayoutModelConfig)
    layout_train: LayoutTrainConfig = field(default_factory=LayoutTrainConfig)
    paint_model: PaintModelConfig = field(default_factory=PaintModelConfig)
    base_pretrain: PaintTrainConfig = field(default_factory=lambda: PaintTrainConfig(steps=1000, lr=1e-3))
    paint_train: PaintTrainConfig = field(default_factory=PaintTrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    checkpoint_every: int = 500

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=list).encode()).hexdigest()[:16]


def _paper_profile() -> RunConfig:
    """Hyperparameters reported for the full-scale system, kept for reference only."""
    return RunConfig(
        profile="paper",
        data=DataConfig(train_count=65000, val_count=3400, test_count=2800, image_size=64),
        layout_model=LayoutModelConfig(text_dim=512, vision_dim=768, T=1000),
        layout_train=LayoutTrainConfig(steps=400_000, batch_size=64, lr=1e-5,
                                       augment=SubjectAugmentConfig(canvas_size=512)),
        paint_model=PaintModelConfig(image_size=64, channels=(64, 128), text_dim=512, T=1000),
        base_pretrain=PaintTrainConfig(steps=0),
        paint_train=PaintTrainConfig(steps=102_000, batch_size=8, lr=5e-5),
    )


PROFILES = {"desk": RunConfig, "paper": _paper_profile}


def _merge(obj, overrides: dict):
    for key, value in overrides.items():
        if not hasattr(obj, key):
            raise KeyError(f"unknown config key {key!r} for {type(obj).__name__}")
        current = getattr(obj, key)
        if is_dataclass(current) and isinstance(value, dict):
            _merge(current, value)
        elif isinstance(current, tuple) and isinstance(value, list):
            setattr(obj, key, tuple(value))
        else:
            setattr(obj, key, value)
    return obj


def from_dict(d: dict) -> RunConfig:
    cfg = PROFILES[d.get("profile", "desk")]()
    return _merge(cfg, {k: v for k, v in d.items() if k != "profile"})


def load_config(path: Optional[str] = None, profile: Optional[str] = None, seed: Optional[int] = None) -> RunConfig:
    overrides: dict[str, Any] = {}
    if path is not None:
        text = Path(path).read_text()
        if str(path).endswith((".yaml", ".yml")):
            import yaml
            overrides = yaml.safe_load(text) or {}
        else:
            overrides = json.loads(text)
    if profile is not None:
        overrides["profile"] = profile
    cfg = from_dict(overrides)
    if seed is not None:
        cfg.seed = seed
    return cfg


def save_checkpoint(path, kind: str, model: torch.nn.Module, cfg: RunConfig, **extra) -> None:
    header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "kind": kind,
              "config_hash": cfg.hash()}
    payload = {"header": header, "config": cfg.to_dict(), "state_dict": model.state_dict(), **extra}
    tmp = Path(str(path) + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path, kind: str) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    header = payload.get("header", {})
    if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint header {header}")
    if header.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {header.get('kind')}")
    if config_hash(payload["config"]) != header["config_hash"]:
        raise CheckpointError(f"{path}: config hash mismatch")
    payload["run_config"] = from_dict(copy.deepcopy(payload["config"]))
    return payload
