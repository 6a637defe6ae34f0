"""Run configuration: named profiles, layered JSON files and ``key=value`` overrides."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Iterable

from .attention import FUSION_MODES, ModelConfig
from .streams import SceneConfig


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    lr_decay: float = 0.9
    warmup_ratio: float = 0.1
    epochs: int = 10
    box_weight: float = 5.0
    alpha: float = 0.125
    n_agents: int = 4
    heads: int = 1
    frames: int = 8
    n_tokens: int = 16
    dim: int = 64
    fusion: str = "alsaf"
    caaf: bool = True
    catf: bool = True
    lsas: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion!r}")
        for name in ("lr", "batch_size", "lr_decay", "epochs", "n_agents", "heads", "frames",
                     "n_tokens", "dim", "alpha"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must lie in [0, 1)")
        if self.box_weight < 0:
            raise ValueError("box_weight must be non-negative")

    def model_config(self, n_classes: int) -> ModelConfig:
        return ModelConfig(n_tokens=self.n_tokens, dim=self.dim, n_agents=self.n_agents, heads=self.heads,
                           n_classes=n_classes, alpha=self.alpha, fusion=self.fusion, caaf=self.caaf,
                           catf=self.catf, lsas=self.lsas, box_weight=self.box_weight)


PROFILES: dict[str, dict[str, Any]] = {
    "desk": {},
    "paper": {"batch_size": 128, "epochs": 40},
}


def config_hash(*parts: Any) -> str:
    """SHA-256 over the canonical JSON of the given dataclasses / dicts."""
    blob = json.dumps([asdict(p) if hasattr(p, "__dataclass_fields__") else p for p in parts],
                      sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _coerce(cls, key: str, raw: str):
    ftype = {f.name: f.type for f in fields(cls)}.get(key)
    if ftype is None:
        raise KeyError(f"{cls.__name__} has no field {key!r}")
    current = getattr(cls(), key)
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(type(current[0])(v) for v in raw.split(","))
    return raw


def parse_overrides(cls, items: Iterable[str]) -> dict[str, Any]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        out[key.strip()] = _coerce(cls, key.strip(), raw.strip())
    return out


def load_layers(cls, files: Iterable[str | Path] = (), overrides: Iterable[str] = (),
                base: dict[str, Any] | None = None):
    """``cls`` defaults <- ``base`` <- each JSON file in order <- ``key=value`` overrides."""
    values: dict[str, Any] = dict(base or {})
    for f in files:
        values.update(json.loads(Path(f).read_text()))
    values.update(parse_overrides(cls, overrides))
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise KeyError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    for k, v in values.items():
        if isinstance(v, list):
            values[k] = tuple(v)
    return cls(**values)


def train_config(profile: str = "desk", files=(), overrides=()) -> TrainConfig:
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    return load_layers(TrainConfig, files, overrides, PROFILES[profile])


def scene_config(files=(), overrides=()) -> SceneConfig:
    return load_layers(SceneConfig, files, overrides)


def write_resolved(path: str | Path, **configs) -> None:
    body = {k: asdict(v) for k, v in configs.items()}
    body["config_hash"] = config_hash(*configs.values())
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=True))

