"""Run configuration: flat key=value settings shared by every subcommand.

Config files hold one ``key = value`` per line (``#`` starts a comment).
Ranges are written ``lo,hi``; block counts ``3,4,6,3``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .embed_net import NetworkConfig, TrainSchedule
from .errors import ConfigError
from .room_sim import RoomConfig


@dataclass
class RunConfig:
    seed: int = 0
    feature_kind: str = "logmel"
    # network
    network: str = "resnet34"
    width_multiplier: float = 1.0
    block_counts: str = ""
    embedding_dim: int = 0
    # schedule
    epochs: int = 50
    initial_lr: float = 0.1
    decay_every: int = 20
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    crop_frames: int = 300
    finetune_epochs: int = 5
    finetune_lr: float = 0.001
    # room simulation
    room_width: str = "6,8"
    room_depth: str = "6,8"
    room_height: str = "2.7,3.5"
    absorption: str = "0.2,0.7"
    max_order: int = 6
    snr: str = "0,20"
    n_mics: int = 1
    sim_copies: int = 1
    # vad
    vad_trees: int = 100
    vad_depth: int = 3
    vad_shrinkage: float = 0.1
    # backend
    backend: str = "cosine"
    plda_iters: int = 20
    fusion: str = "multi"
    eda: bool = False
    eda_snr: str = "5,15"
    # metrics
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, _coerce(f.name, f.type, getattr(self, f.name)))
        if self.feature_kind not in ("logmel", "mfcc"):
            raise ConfigError(f"feature_kind must be logmel or mfcc, got {self.feature_kind!r}")
        if self.network not in ("resnet34", "resnet50"):
            raise ConfigError(f"network must be resnet34 or resnet50, got {self.network!r}")
        if self.backend not in ("cosine", "plda"):
            raise ConfigError(f"backend must be cosine or plda, got {self.backend!r}")
        for key in ("room_width", "room_depth", "room_height", "absorption", "snr", "eda_snr"):
            self.range(key)

    def range(self, key: str) -> tuple[float, float]:
        text = getattr(self, key)
        try:
            lo, hi = (float(v) for v in text.split(","))
        except ValueError:
            raise ConfigError(f"{key} must be 'lo,hi', got {text!r}") from None
        if lo > hi:
            raise ConfigError(f"{key}: lower bound exceeds upper bound")
        return lo, hi

    def network_config(self, n_classes: int) -> NetworkConfig:
        make = NetworkConfig.resnet34 if self.network == "resnet34" else NetworkConfig.resnet50
        overrides: dict = dict(width_multiplier=self.width_multiplier, n_classes=n_classes)
        if self.block_counts:
            try:
                overrides["block_counts"] = tuple(int(b) for b in self.block_counts.split(","))
            except ValueError:
                raise ConfigError(f"block_counts must be four integers, got {self.block_counts!r}") from None
        if self.embedding_dim:
            overrides["embedding_dim"] = self.embedding_dim
        if self.network == "resnet50" or self.feature_kind == "mfcc":
            overrides["input_dim"] = 64 if self.feature_kind == "logmel" else 30
        try:
            return make(**overrides)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(self.initial_lr, self.epochs, self.decay_every, self.decay_factor,
                             self.momentum, self.weight_decay, self.batch_size, self.crop_frames)

    def room(self) -> RoomConfig:
        return RoomConfig(self.range("room_width"), self.range("room_depth"), self.range("room_height"),
                          self.range("absorption"), self.max_order, self.range("snr"), self.n_mics)

    def lines(self) -> list[str]:
        return [f"{f.name}={_format(getattr(self, f.name))}" for f in fields(self)]

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_pairs(cls, pairs: dict[str, str], base: "RunConfig | None" = None) -> "RunConfig":
        unknown = sorted(set(pairs) - set(cls.keys()))
        if unknown:
            raise ConfigError("unknown config key(s): " + ", ".join(unknown))
        values = {f.name: getattr(base, f.name) for f in fields(cls)} if base else {}
        values.update(pairs)
        return cls(**values)


def _coerce(name, type_name, value):
    kind = type_name if isinstance(type_name, str) else type_name.__name__
    if kind == "str":
        return str(value).strip()
    if isinstance(value, str):
        value = value.strip()
    try:
        if kind == "bool":
            if isinstance(value, bool):
                return value
            if str(value).lower() in ("1", "true", "yes", "on"):
                return True
            if str(value).lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if kind == "int":
            return int(value)
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot read {value!r} as {kind}") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs[key] = value
    return pairs


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    base = RunConfig()
    if path is not None:
        base = RunConfig.from_pairs(parse_config_text(Path(path).read_text(encoding="utf-8"), str(path)), base)
    return RunConfig.from_pairs(overrides or {}, base)
