"""Scalar schedules: warmup learning rate, layer-wise multipliers, decaying MPC weight."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError


@dataclass(frozen=True)
class WarmupConfig:
    """lrate = k * d_model**dmodel_exponent * min(n**-0.5, n * warmup_n**-1.5).

    The exponent defaults to +0.5, the printed form used for the
    published runs; the classic Transformer schedule uses -0.5.
    """

    k: float = 0.5
    warmup_n: int = 5000
    d_model: int = 256
    dmodel_exponent: float = 0.5

    def __post_init__(self):
        if self.k <= 0:
            raise ConfigError(f"k must be > 0, got {self.k}")
        if self.warmup_n < 1:
            raise ConfigError(f"warmup_n must be >= 1, got {self.warmup_n}")
        if self.d_model < 1:
            raise ConfigError(f"d_model must be >= 1, got {self.d_model}")


PRETRAIN_WARMUP = WarmupConfig(k=0.5, warmup_n=5000)
FINETUNE_WARMUP = WarmupConfig(k=1.0, warmup_n=25000)


def lrate(cfg: WarmupConfig, n: int) -> float:
    if n < 1:
        raise ValueError(f"step number must be >= 1, got {n}")
    return cfg.k * cfg.d_model ** cfg.dmodel_exponent * min(n ** -0.5, n * cfg.warmup_n ** -1.5)


@dataclass(frozen=True)
class LayerwiseConfig:
    lam: float = 0.95
    theta: float = 5.5

    def __post_init__(self):
        if not 0.0 < self.lam < 1.0:
            raise ConfigError(f"lambda must lie in (0, 1), got {self.lam}")


def layer_multiplier(cfg: LayerwiseConfig, l: int, num_layers: int | None = None) -> float:
    """lam ** |l - theta| for encoder layer l (1-based)."""
    if l < 1 or (num_layers is not None and l > num_layers):
        raise ValueError(f"layer {l} outside 1..{num_layers}")
    return cfg.lam ** abs(l - cfg.theta)


@dataclass(frozen=True)
class MpcWeightSchedule:
    gamma0: float = 0.2
    halve_every: int = 5

    def __post_init__(self):
        if self.gamma0 < 0:
            raise ConfigError(f"gamma0 must be >= 0, got {self.gamma0}")
        if self.halve_every < 1:
            raise ConfigError(f"halve_every must be >= 1, got {self.halve_every}")


def gamma_mpc(sched: MpcWeightSchedule, epoch: int) -> float:
    """gamma0 halved once per completed ``halve_every`` epochs (epoch counts from 0)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return sched.gamma0 * math.ldexp(1.0, -(epoch // sched.halve_every))
