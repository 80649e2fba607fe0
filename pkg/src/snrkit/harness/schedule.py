"""Training configuration, learning-rate schedule and the Adam update."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..diffcore import Parameter


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


@dataclass
class TrainConfig:
    scheme: str = "Baseline-SNR"
    lr: float = 8e-4
    lr_start: float = 8e-6
    weight_decay: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    warmup_epochs: int = 20
    decay_every: int = 40
    decay_factor: float = 0.5
    epochs: int = 60
    P: int = 4
    K: int = 4
    seed: int = 0
    dataset: str = ""
    out_dir: str = ""
    # dual causality loss toggles (loss ablation rows)
    use_snr_loss: bool = True
    use_plus: bool = True
    use_minus: bool = True
    triplet_policy: str = "random"
    checkpoint_every: int = 0
    eval_every: int = 10
    target_domain: int | None = None
    model: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.epochs < self.warmup_epochs:
            raise ConfigError("epochs must be at least the warmup length")
        if min(self.lr, self.lr_start) <= 0 or self.weight_decay < 0:
            raise ConfigError("learning rates must be positive and weight decay non-negative")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.decay_every < 1 or not 0 < self.decay_factor <= 1:
            raise ConfigError("decay_every must be positive and decay_factor in (0, 1]")
        if self.P < 2 or self.K < 2:
            raise ConfigError("P x K batches need P >= 2 and K >= 2 for triplets")
        if self.triplet_policy not in ("random", "batch_hard"):
            raise ConfigError(f"unknown triplet policy {self.triplet_policy!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys {sorted(unknown)}")
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as e:
            raise ConfigError(f"cannot read train config {path}: {e}") from e


def lr_schedule(epoch: float, config: TrainConfig | None = None) -> float:
    """Linear warmup from ``lr_start`` to ``lr``, then step decay."""
    c = TrainConfig() if config is None else config
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if epoch < c.warmup_epochs:
        return c.lr_start + (c.lr - c.lr_start) * epoch / c.warmup_epochs
    return c.lr * c.decay_factor ** ((epoch - c.warmup_epochs) // c.decay_every)


class Adam:
    """Adam with decoupled weight decay (p <- p * (1 - lr * wd) before the step)."""

    def __init__(self, params: dict[str, Parameter], betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data, dtype=np.float64) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data, dtype=np.float64) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, p in self.params.items():
            if not p.trainable or p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            upd = lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            new = p.data.astype(np.float64) * (1 - lr * self.wd) - upd
            p.data = new.astype(p.dtype)
