"""Masked cross-attention kernels: dense reference and block fast path.

The partition mask gives every partial token a contiguous window of n_s
keys, so the partial half of the cross-attention never needs the full
(n_p x n_v) score matrix. The block kernel batches all partial windows
as one (n_p, n_s) strided view and runs the global half densely; the
dense kernel materializes everything and is the correctness oracle.

Both paths share the projection weights, so they can only differ in
score/AV summation order; equivalence is checked to a dtype-dependent
tolerance. FLOP counts are exact functions of the geometry (one
multiply-add counted as 2 FLOPs).

These kernels run on raw arrays outside the autodiff tape. Timing
numbers are wall-clock and machine-dependent: report them, never assert
them. For stable medians, pin BLAS threading (OMP_NUM_THREADS=1).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .masks import AttentionMask, PartitionSpec, build_pg_mask
from .rng import Rng
from .tensor import AttentionWeights, Tensor, as_dtype


def _arr(x) -> np.ndarray:
    return x.data if hasattr(x, "data") and isinstance(getattr(x, "data"), np.ndarray) else np.asarray(x)


def _weight_arrays(weights: AttentionWeights) -> tuple[np.ndarray, ...]:
    return tuple(_arr(getattr(weights, f)) for f in ("wq", "bq", "wk", "wv", "bv", "wo", "bo"))


def _masked_softmax_rows(scores: np.ndarray, bits: np.ndarray) -> np.ndarray:
    s = np.where(bits, scores, -np.inf)
    m = s.max(axis=-1, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=-1, keepdims=True)


def dense_masked_xattn(tokens, f_v, weights: AttentionWeights, mask, heads: int) -> np.ndarray:
    """Reference path: full score matrix, mask, softmax, AV, projection."""
    t, f = _arr(tokens), _arr(f_v)
    wq, bq, wk, wv, bv, wo, bo = _weight_arrays(weights)
    c = t.shape[1]
    if c % heads != 0:
        raise ConfigError(f"width {c} is not divisible by {heads} heads")
    bits = mask.bits if isinstance(mask, AttentionMask) else np.asarray(mask)
    if bits.shape != (t.shape[0], f.shape[0]):
        raise ShapeError(f"mask shape {bits.shape} does not match ({t.shape[0]}, {f.shape[0]})")
    q = t @ wq + bq
    k = f @ wk
    v = f @ wv + bv
    dh = c // heads
    inv = 1.0 / math.sqrt(dh)
    outs = []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        scores = (q[:, lo:hi] @ k[:, lo:hi].T) * inv
        outs.append(_masked_softmax_rows(scores, bits) @ v[:, lo:hi])
    return np.concatenate(outs, axis=1) @ wo + bo


def block_partial_xattn(tokens, f_v, weights: AttentionWeights, spec: PartitionSpec, heads: int) -> np.ndarray:
    """Fast path: per-window local attention for partial tokens.

    Numerically equivalent to dense_masked_xattn under the partition
    mask; only floating-point summation order differs.
    """
    t, f = _arr(tokens), _arr(f_v)
    wq, bq, wk, wv, bv, wo, bo = _weight_arrays(weights)
    c = t.shape[1]
    if c % heads != 0:
        raise ConfigError(f"width {c} is not divisible by {heads} heads")
    if t.shape[0] != spec.n_tokens or f.shape[0] != spec.n_v:
        raise ShapeError(f"tokens {t.shape} / features {f.shape} do not match partition {spec}")
    q = t @ wq + bq
    k = f @ wk
    v = f @ wv + bv
    dh = c // heads
    inv = 1.0 / math.sqrt(dh)
    n_p, n_g = spec.n_p, spec.n_g
    halves = []
    if n_p > 0:
        n_s = spec.n_s
        kw = k.reshape(n_p, n_s, c)
        vw = v.reshape(n_p, n_s, c)
        qp = q[:n_p]
        outs = []
        for h in range(heads):
            lo, hi = h * dh, (h + 1) * dh
            # (n_p, 1, dh) @ (n_p, dh, n_s) -> per-token local scores
            scores = (qp[:, None, lo:hi] @ kw[:, :, lo:hi].transpose(0, 2, 1)) * inv
            m = scores.max(axis=-1, keepdims=True)
            e = np.exp(scores - m)
            attn = e / e.sum(axis=-1, keepdims=True)
            outs.append((attn @ vw[:, :, lo:hi])[:, 0, :])
        halves.append(np.concatenate(outs, axis=1))
    if n_g > 0:
        qg = q[n_p:]
        outs = []
        for h in range(heads):
            lo, hi = h * dh, (h + 1) * dh
            scores = (qg[:, lo:hi] @ k[:, lo:hi].T) * inv
            m = scores.max(axis=-1, keepdims=True)
            e = np.exp(scores - m)
            attn = e / e.sum(axis=-1, keepdims=True)
            outs.append(attn @ v[:, lo:hi])
        halves.append(np.concatenate(outs, axis=1))
    merged = halves[0] if len(halves) == 1 else np.concatenate(halves, axis=0)
    return merged @ wo + bo


def flops_scoreav_dense(spec: PartitionSpec, c: int, heads: int) -> int:
    """QK^T plus AV for the fully materialized path."""
    dh = c // heads
    return 2 * heads * (spec.n_p + spec.n_g) * spec.n_v * dh * 2


def flops_scoreav_block(spec: PartitionSpec, c: int, heads: int) -> int:
    """QK^T plus AV with partial tokens confined to their n_s windows."""
    dh = c // heads
    local = spec.n_p * spec.n_s if spec.n_p > 0 else 0
    return 2 * heads * (local + spec.n_g * spec.n_v) * dh * 2


def flops_projection(spec: PartitionSpec, c: int) -> int:
    """q/k/v/output projections; identical for both kernel variants."""
    n_t = spec.n_p + spec.n_g
    return 2 * c * c * (2 * n_t + 2 * spec.n_v)


def partial_scoreav_ratio(spec: PartitionSpec) -> int:
    """dense/block score-FLOP ratio for the partial half: n_v / n_s."""
    if spec.n_p == 0:
        raise ConfigError("ratio undefined without partial tokens")
    return spec.n_v // spec.n_s


@dataclass(frozen=True)
class BenchConfig:
    n_v: int = 576
    n_p: int = 288
    n_g: int = 16
    c: int = 64
    heads: int = 4
    dtype: str = "float32"
    seed: int = 0

    def partition(self) -> PartitionSpec:
        return PartitionSpec(self.n_v, self.n_p, self.n_g)


@dataclass(frozen=True)
class KernelReport:
    variant: str
    ns_per_call_median: float
    calls: int
    flops_scoreav: int
    flops_projection: int
    gflops_per_s: float


def _random_inputs(config: BenchConfig):
    spec = config.partition()
    dt = as_dtype(config.dtype)
    rng = Rng(config.seed)
    t = rng.normal((spec.n_tokens, config.c), dtype=dt)
    f = rng.normal((spec.n_v, config.c), dtype=dt)
    ws = [rng.normal((config.c, config.c), std=0.05, dtype=dt) for _ in range(4)]
    zeros = np.zeros(config.c, dtype=dt)
    weights = AttentionWeights(
        wq=Tensor(ws[0]), bq=Tensor(zeros), wk=Tensor(ws[1]),
        wv=Tensor(ws[2]), bv=Tensor(zeros), wo=Tensor(ws[3]), bo=Tensor(zeros),
    )
    return spec, t, f, weights


def _time_median(fn, iters: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(iters):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return float(np.median(times))


def bench(config: BenchConfig, iters: int = 20, warmup: int = 3) -> dict:
    """Time both kernels on identical inputs; returns the report document.

    The document carries both per-variant reports, the exact FLOP
    accounting, the config echo, and the observed max abs difference
    between the two outputs (the equivalence check; timing itself is
    machine-dependent and never gated on).
    """
    if iters < 1:
        raise ConfigError(f"iters must be at least 1, got {iters}")
    spec, t, f, weights = _random_inputs(config)
    mask = build_pg_mask(spec)
    dense_out = dense_masked_xattn(t, f, weights, mask, config.heads)
    block_out = block_partial_xattn(t, f, weights, spec, config.heads)
    max_abs_diff = float(np.abs(dense_out - block_out).max()) if dense_out.size else 0.0

    proj = flops_projection(spec, config.c)
    reports = []
    for variant, fn, scoreav in (
        ("dense", lambda: dense_masked_xattn(t, f, weights, mask, config.heads), flops_scoreav_dense(spec, config.c, config.heads)),
        ("block", lambda: block_partial_xattn(t, f, weights, spec, config.heads), flops_scoreav_block(spec, config.c, config.heads)),
    ):
        ns = _time_median(fn, iters, warmup)
        gflops = (scoreav + proj) / ns if ns > 0 else 0.0
        reports.append(
            KernelReport(
                variant=variant,
                ns_per_call_median=ns,
                calls=iters,
                flops_scoreav=scoreav,
                flops_projection=proj,
                gflops_per_s=gflops,
            )
        )
    return {
        "config": asdict(config),
        "reports": [asdict(r) for r in reports],
        "max_abs_diff": max_abs_diff,
    }


def bench_json(config: BenchConfig, iters: int = 20, warmup: int = 3) -> str:
    return json.dumps(bench(config, iters=iters, warmup=warmup), indent=2, sort_keys=True)
