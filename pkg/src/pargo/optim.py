"""Adam optimizer over named parameter collections."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .tensor import Tensor


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0.0 < self.lr):
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")


@dataclass
class AdamState:
    """First/second moment estimates keyed by parameter name."""

    config: AdamConfig
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_init(config: AdamConfig | None = None) -> AdamState:
    return AdamState(config=config or AdamConfig())


def adam_step(state: AdamState, params: dict[str, Tensor]) -> None:
    """Apply one in-place update; parameters with grad=None are skipped.

    Moments are bias-corrected, so the first step moves each coordinate by
    nearly lr * sign(grad). Updates run in sorted name order so a rerun
    with identical grads is bit-identical.
    """
    cfg = state.config
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name in sorted(params):
        p = params[name]
        if p.grad is None:
            continue
        g = p.grad.astype(np.float64, copy=False)
        m = state.m.get(name)
        if m is None:
            m = np.zeros(p.data.shape, dtype=np.float64)
            state.m[name] = m
            state.v[name] = np.zeros(p.data.shape, dtype=np.float64)
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        upd = (cfg.lr * (m / c1)) / (np.sqrt(v / c2) + cfg.eps)
        p.data -= upd.astype(p.data.dtype)


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def grad_norm(params: dict[str, Tensor]) -> float:
    """Global L2 norm over all present gradients."""
    total = 0.0
    for name in sorted(params):
        g = params[name].grad
        if g is not None:
            total += float(np.square(g.astype(np.float64)).sum())
    return float(np.sqrt(total))
