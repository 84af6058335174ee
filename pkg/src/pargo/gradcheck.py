"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, ShapeError
from .rng import Rng
from .tensor import Tensor, backward, mul, scale, sum_all

# Scale of the projector verification loss. Central differences carry a
# roundoff term of roughly eps_machine * |loss| / eps; the loss scale
# keeps that term far below the 1e-8 relative-error denominator floor,
# so the check measures gradient correctness, not float64 cancellation.
PROJECTOR_LOSS_SCALE = 1e-6


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    worst_index: tuple[int, ...]
    checked: int

    def ok(self, tol: float = 1e-5) -> bool:
        return self.max_rel_err < tol


def grad_check(
    fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
    max_entries_per_param: int | None = None,
) -> GradCheckReport:
    """Compare analytic grads of a scalar fn against central differences.

    Every parameter must be float64; float32 rounding would swamp the
    O(eps^2) truncation error and make the comparison meaningless. The
    relative error is |a - n| / max(|a|, |n|, 1e-8) per coordinate.

    fn must be a pure function of the current parameter values: it is
    re-evaluated many times with coordinates nudged by +/- eps.
    """
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise ShapeError(f"grad_check requires float64 parameters, {name} is {p.data.dtype}")

    for p in params.values():
        p.grad = None
    loss = fn()
    backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()}

    max_rel = 0.0
    worst = ("", ())
    checked = 0
    for name in sorted(params):
        p = params[name]
        flat = p.data.reshape(-1)
        idxs = range(flat.size)
        if max_entries_per_param is not None and flat.size > max_entries_per_param:
            idxs = np.linspace(0, flat.size - 1, max_entries_per_param).astype(int)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = fn().item()
            flat[i] = orig - eps
            f_minus = fn().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = analytic[name].reshape(-1)[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            checked += 1
            if rel > max_rel:
                max_rel = rel
                worst = (name, np.unravel_index(i, p.data.shape))
    return GradCheckReport(max_rel_err=float(max_rel), worst_param=worst[0], worst_index=tuple(int(j) for j in worst[1]), checked=checked)


def projector_gradcheck(
    config,
    seed: int = 0,
    eps: float = 1e-5,
    max_entries_per_param: int | None = None,
) -> GradCheckReport:
    """Check the full projector: loss = scaled sum of squared outputs.

    The quadratic loss keeps every parameter (final normalization
    included) on a nonlinear path to the scalar; see
    PROJECTOR_LOSS_SCALE for why it is scaled down.
    """
    from .projector import build_masks, forward, init_projector

    if config.dtype != "float64":
        raise ConfigError(f"gradient checking requires a float64 config, got dtype {config.dtype!r}")
    r_init, r_data = Rng(seed).split(2)
    params = init_projector(config, r_init)
    masks = build_masks(config)
    f_v = Tensor(r_data.normal((config.n_v, config.c), dtype=np.float64))

    def loss_fn() -> Tensor:
        out = forward(f_v, params, masks)
        return scale(sum_all(mul(out, out)), PROJECTOR_LOSS_SCALE)

    return grad_check(loss_fn, params.as_dict(), eps=eps, max_entries_per_param=max_entries_per_param)
