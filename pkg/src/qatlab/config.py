"""Experiment configuration: TOML sections mapped onto dataclasses with strict key checking.

Every section and key is optional; anything not given takes the default
below. Unknown sections or keys are rejected.

    seed = 0

    [model]      ModelConfig fields
    [pretrain]   teacher pretraining schedule
    [train]      KD-QAT schedule
    [kd]         alpha_ce, beta_kl, temperature
    [quant]      bitwidth, calibration, grid_points, policy, act_bitwidth, act_calib_batches
    [freeze]     preset
    [eval]       context_length, stride, batch_size, max_windows
    [paths]      corpus, out_dir, teacher, ptq
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from qatlab.evaluation import EvalConfig
from qatlab.model import EXTRA_QUANT_ROLES, ROLES, ModelConfig

FREEZE_PRESETS = {
    "none": (),
    "o": ("o",),
    "v": ("v",),
    "ov": ("o", "v"),
    "qkv": ("q", "k", "v"),
    "oqkv": ("o", "q", "k", "v"),
}
FREEZE_ROLES = ("q", "k", "v", "o", "mlp")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    seq_len: int = 128
    learning_rate: float = 3e-4
    warmup_steps: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    trace_every: int = 10
    eval_every: int = 500
    eval_windows: int | None = 32

    def validate(self) -> None:
        for name in ("steps", "batch_size", "seq_len", "trace_every", "eval_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name} must be positive")
        if self.learning_rate < 0 or self.warmup_steps < 0 or self.grad_clip <= 0:
            raise ConfigError("train: learning_rate/warmup_steps must be >= 0 and grad_clip > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("train: invalid Adam betas/eps")


@dataclass
class PretrainConfig(TrainConfig):
    steps: int = 2500
    batch_size: int = 8
    learning_rate: float = 2e-3
    warmup_steps: int = 100
    eval_every: int = 500
    final_lr_ratio: float = 0.1  # cosine decay target; 1.0 keeps the rate constant

    def validate(self) -> None:
        super().validate()
        if not 0.0 <= self.final_lr_ratio <= 1.0:
            raise ConfigError("pretrain.final_lr_ratio must be in [0, 1]")


@dataclass
class KDLossConfig:
    alpha_ce: float = 1.0
    beta_kl: float = 1.0
    temperature: float = 1.0

    def validate(self) -> None:
        if self.alpha_ce < 0 or self.beta_kl < 0 or self.alpha_ce + self.beta_kl <= 0:
            raise ConfigError("kd: weights must be >= 0 with a positive sum")
        if self.temperature <= 0:
            raise ConfigError("kd.temperature must be positive")


@dataclass
class QuantConfig:
    bitwidth: int = 4
    calibration: str = "mse"
    grid_points: int = 101
    policy: list[str] = field(default_factory=lambda: list(ROLES))
    act_bitwidth: int = 16
    act_calib_batches: int = 8

    def validate(self) -> None:
        if not 2 <= self.bitwidth <= 16 or not 2 <= self.act_bitwidth <= 16:
            raise ConfigError("quant bitwidths must be in [2, 16]")
        if self.calibration not in ("mse", "minmax"):
            raise ConfigError(f"quant.calibration must be 'mse' or 'minmax', got {self.calibration!r}")
        if self.grid_points < 2:
            raise ConfigError("quant.grid_points must be >= 2")
        bad = [r for r in self.policy if r not in ROLES + EXTRA_QUANT_ROLES]
        if bad:
            raise ConfigError(f"quant.policy has unknown roles {bad}")


@dataclass
class FreezeConfig:
    preset: str = "none"

    def validate(self) -> None:
        if self.preset not in FREEZE_PRESETS:
            raise ConfigError(f"freeze.preset must be one of {sorted(FREEZE_PRESETS)}")


@dataclass
class PathsConfig:
    corpus: list[str] | None = None
    out_dir: str = "runs"
    teacher: str | None = None
    ptq: str | None = None

    def teacher_path(self) -> Path:
        return Path(self.teacher) if self.teacher else Path(self.out_dir) / "teacher.qatf"

    def ptq_path(self, method: str) -> Path:
        return Path(self.ptq) if self.ptq else Path(self.out_dir) / f"ptq-{method}.qatf"


@dataclass
class ExperimentConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    kd: KDLossConfig = field(default_factory=KDLossConfig)
    quant: QuantConfig = field(default_factory=QuantConfig)
    freeze: FreezeConfig = field(default_factory=FreezeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> "ExperimentConfig":
        for section in (self.pretrain, self.train, self.kd, self.quant, self.freeze):
            section.validate()
        if self.eval.context_length > self.model.max_seq_len:
            raise ConfigError("eval.context_length exceeds model.max_seq_len")
        for t in (self.train, self.pretrain):
            if t.seq_len > self.model.max_seq_len:
                raise ConfigError("seq_len exceeds model.max_seq_len")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


_SECTIONS = {
    "model": ModelConfig,
    "pretrain": PretrainConfig,
    "train": TrainConfig,
    "kd": KDLossConfig,
    "quant": QuantConfig,
    "freeze": FreezeConfig,
    "eval": EvalConfig,
    "paths": PathsConfig,
}


def from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    kwargs = {}
    if "seed" in raw:
        seed = raw.pop("seed")
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        kwargs["seed"] = seed
    for name, value in raw.items():
        cls = _SECTIONS.get(name)
        if cls is None:
            raise ConfigError(f"unknown config section {name!r}")
        if not isinstance(value, dict):
            raise ConfigError(f"section {name!r} must be a table")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(value) - known)
        if unknown:
            raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
        try:
            kwargs[name] = cls(**value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[{name}]: {e}") from None
    return ExperimentConfig(**kwargs).validate()


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    with open(path, "rb") as f:
        try:
            raw = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
    return from_dict(raw)
