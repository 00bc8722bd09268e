"""Run configuration: nested sections flattened to ``section.key`` text entries."""

from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from typing import Dict

from .data import ConfigError, parse_key_values

logger = logging.getLogger(__name__)

SEED_ENV = "COATTN_SEED"


@dataclass
class ModelConfig:
    emb_dim: int = 16
    hidden: int = 16
    residual_coattention: bool = True


@dataclass
class DecoderConfig:
    t_max: int = 4
    moe_enabled: bool = True
    moe_experts: int = 16
    moe_topk: int = 2
    maxout_pool: int = 16
    early_stop: bool = True


@dataclass
class ObjectiveConfig:
    ce_enabled: bool = True
    rl_enabled: bool = True
    # -1: derive the sampling seed from the run seed
    seed: int = -1
    rl_warmup_steps: int = 0


@dataclass
class OptimConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 10
    word_dropout: float = 0.075
    min_count: int = 1
    eval_batch_size: int = 128


@dataclass
class DataConfig:
    train: str = ""
    dev: str = ""
    out_dir: str = "runs/default"


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    @property
    def sample_seed(self) -> int:
        return self.objective.seed if self.objective.seed >= 0 else self.seed + 7919

    def flat(self) -> Dict[str, object]:
        out = {"seed": self.seed}
        for f in dataclasses.fields(self):
            section = getattr(self, f.name)
            if dataclasses.is_dataclass(section):
                for g in dataclasses.fields(section):
                    out[f"{f.name}.{g.name}"] = getattr(section, g.name)
        return out

    def key_types(self) -> Dict[str, type]:
        return {k: type(v) for k, v in self.flat().items()}

    def set(self, key: str, value) -> None:
        types = self.key_types()
        if key not in types:
            raise ConfigError(f"unknown config key '{key}'")
        value = _coerce(value, types[key], key)
        if "." in key:
            section, name = key.split(".", 1)
            setattr(getattr(self, section), name, value)
        else:
            setattr(self, key, value)

    def to_text(self) -> str:
        return "".join(f"{k} = {_render(v)}\n" for k, v in self.flat().items())

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cfg = cls()
        for key, value in parse_key_values(text).items():
            cfg.set(key, value)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def apply_env(self) -> None:
        raw = os.environ.get(SEED_ENV)
        if raw is not None:
            self.seed = _coerce(raw, int, SEED_ENV)
            logger.info("seed overridden by %s=%d", SEED_ENV, self.seed)

    def validate(self) -> None:
        checks = [
            (self.model.emb_dim >= 1 and self.model.hidden >= 1, "model sizes must be positive"),
            (self.decoder.t_max >= 1, "decoder.t_max must be >= 1"),
            (self.decoder.maxout_pool >= 1, "decoder.maxout_pool must be >= 1"),
            (self.decoder.moe_experts >= 2, "decoder.moe_experts must be >= 2"),
            (1 <= self.decoder.moe_topk <= self.decoder.moe_experts, "decoder.moe_topk must lie in [1, moe_experts]"),
            (self.objective.ce_enabled or self.objective.rl_enabled, "at least one objective must be enabled"),
            (self.objective.rl_warmup_steps >= 0, "objective.rl_warmup_steps must be >= 0"),
            (self.optim.lr > 0 and self.optim.epsilon > 0, "optim.lr and optim.epsilon must be positive"),
            (0 <= self.optim.beta1 < 1 and 0 <= self.optim.beta2 < 1, "optim betas must lie in [0, 1)"),
            (self.train.batch_size >= 1 and self.train.epochs >= 0, "train.batch_size >= 1 and train.epochs >= 0"),
            (0 <= self.train.word_dropout < 1, "train.word_dropout must lie in [0, 1)"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)


def _coerce(value, kind, key):
    if isinstance(value, kind) and not (kind is int and isinstance(value, bool)):
        return value
    text = str(value).strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r} (expected {kind.__name__})") from None


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)
