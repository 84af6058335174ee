"""Partial-global token projector.

A fixed budget of learnable query tokens compresses a variable number of
visual features. Partial tokens each own one contiguous window of the
feature sequence; global tokens see the whole sequence. Every layer runs
two sublayers: a masked self-attention over the partial tokens whose
visible window widens with depth, then a masked cross-attention from all
tokens onto the visual features, followed by a shared feed-forward block.

Sublayers use the pre-norm residual recipe. Queries are normalized going
into attention; encoder features are consumed as-is (they arrive frozen
and already scaled). Global tokens skip the partial self-attention
entirely and rejoin for cross-attention.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .checkpoint import load_checkpoint_file, save_checkpoint_file
from .errors import CheckpointError, ConfigError, ShapeError
from .masks import AttentionMask, CascadeSpec, PartitionSpec, build_cpp_mask, build_pg_mask, saturated_cpp_mask
from .rng import Rng
from .tensor import (
    AttentionWeights,
    Tensor,
    add,
    as_dtype,
    concat,
    gelu,
    layer_norm,
    linear,
    multi_head_attention,
    parameter,
    slice_rows,
)

INIT_STD = 0.02
INIT_CUT = 2.0


@dataclass(frozen=True)
class ParGoConfig:
    """Geometry and width of the projector stack."""

    n_v: int
    n_p: int = 288
    n_g: int = 16
    c: int = 64
    d: int = 6
    heads: int = 4
    ffn_mult: int = 4
    dtype: str = "float32"
    cascade: bool = True

    def __post_init__(self):
        self.partition()
        if self.n_p > 0:
            self.cascade_spec()
        if self.c < 1 or self.c % self.heads != 0:
            raise ConfigError(f"width {self.c} must be a positive multiple of heads={self.heads}")
        if self.d < 1:
            raise ConfigError(f"depth must be at least 1, got {self.d}")
        if self.ffn_mult < 1:
            raise ConfigError(f"ffn_mult must be at least 1, got {self.ffn_mult}")
        as_dtype(self.dtype)

    def partition(self) -> PartitionSpec:
        return PartitionSpec(self.n_v, self.n_p, self.n_g)

    def cascade_spec(self) -> CascadeSpec:
        return CascadeSpec(self.n_p, self.d)

    @property
    def n_tokens(self) -> int:
        return self.n_p + self.n_g

    def to_dict(self) -> dict:
        return {
            "n_v": self.n_v,
            "n_p": self.n_p,
            "n_g": self.n_g,
            "c": self.c,
            "d": self.d,
            "heads": self.heads,
            "ffn_mult": self.ffn_mult,
            "dtype": self.dtype,
            "cascade": self.cascade,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ParGoConfig":
        known = {"n_v", "n_p", "n_g", "c", "d", "heads", "ffn_mult", "dtype", "cascade"}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown projector config keys {sorted(extra)}")
        if "n_v" not in data:
            raise ConfigError("projector config requires n_v")
        return cls(**data)


@dataclass
class NormParams:
    gain: Tensor
    bias: Tensor

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.bias", self.bias


@dataclass
class LayerParams:
    """One projector layer; the cpp pair is absent when n_p == 0."""

    cpp_ln: NormParams | None
    cpp_attn: AttentionWeights | None
    pgp_ln: NormParams
    pgp_attn: AttentionWeights
    ffn_ln: NormParams
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        if self.cpp_ln is not None:
            yield from self.cpp_ln.named(f"{prefix}.cpp.ln")
            yield from self.cpp_attn.named(f"{prefix}.cpp.attn")
        yield from self.pgp_ln.named(f"{prefix}.pgp.ln")
        yield from self.pgp_attn.named(f"{prefix}.pgp.attn")
        yield from self.ffn_ln.named(f"{prefix}.ffn.ln")
        yield f"{prefix}.ffn.w1", self.ffn_w1
        yield f"{prefix}.ffn.b1", self.ffn_b1
        yield f"{prefix}.ffn.w2", self.ffn_w2
        yield f"{prefix}.ffn.b2", self.ffn_b2


@dataclass
class ProjectorParams:
    config: ParGoConfig
    q_p: Tensor
    q_g: Tensor
    layers: list[LayerParams]
    final_ln: NormParams

    def named(self) -> Iterator[tuple[str, Tensor]]:
        yield "q_p", self.q_p
        yield "q_g", self.q_g
        for i, layer in enumerate(self.layers):
            yield from layer.named(f"layers.{i:02d}")
        yield from self.final_ln.named("final_ln")

    def as_dict(self) -> dict[str, Tensor]:
        return dict(self.named())


def _build_params(config: ParGoConfig, draw: Callable[[tuple[int, ...]], np.ndarray]) -> ProjectorParams:
    """Assemble the parameter tree; `draw` supplies weight values.

    Biases start at zero and normalization at identity regardless of the
    draw source; draw order is fixed so seeded builds are reproducible.
    """
    dt = as_dtype(config.dtype)
    c = config.c

    def w(shape):
        return parameter(draw(shape))

    def zeros(shape):
        return parameter(np.zeros(shape, dtype=dt))

    def norm():
        return NormParams(gain=parameter(np.ones(c, dtype=dt)), bias=zeros((c,)))

    def attn():
        return AttentionWeights(
            wq=w((c, c)), bq=zeros((c,)),
            wk=w((c, c)),
            wv=w((c, c)), bv=zeros((c,)),
            wo=w((c, c)), bo=zeros((c,)),
        )

    q_p = w((config.n_p, c))
    q_g = w((config.n_g, c))
    layers = []
    for _ in range(config.d):
        if config.n_p > 0:
            cpp_ln, cpp_attn = norm(), attn()
        else:
            cpp_ln, cpp_attn = None, None
        layers.append(
            LayerParams(
                cpp_ln=cpp_ln,
                cpp_attn=cpp_attn,
                pgp_ln=norm(),
                pgp_attn=attn(),
                ffn_ln=norm(),
                ffn_w1=w((c, config.ffn_mult * c)),
                ffn_b1=zeros((config.ffn_mult * c,)),
                ffn_w2=w((config.ffn_mult * c, c)),
                ffn_b2=zeros((c,)),
            )
        )
    return ProjectorParams(config=config, q_p=q_p, q_g=q_g, layers=layers, final_ln=norm())


def init_projector(config: ParGoConfig, rng: Rng) -> ProjectorParams:
    """Draw all weights truncated-normal (std 0.02, cut at 2 std)."""
    dt = as_dtype(config.dtype)
    return _build_params(config, lambda shape: rng.truncated_normal(shape, std=INIT_STD, cut=INIT_CUT, dtype=dt))


def empty_projector(config: ParGoConfig) -> ProjectorParams:
    """All-zero weights; a shape skeleton for checkpoint loading."""
    dt = as_dtype(config.dtype)
    return _build_params(config, lambda shape: np.zeros(shape, dtype=dt))


def build_masks(config: ParGoConfig) -> tuple[AttentionMask, list[AttentionMask]]:
    """Partition mask plus the per-layer cascade masks (empty if n_p == 0).

    With the cascade disabled, every layer gets the all-true mask; the
    block and its parameters stay in place so ablations compare equals.
    """
    pg = build_pg_mask(config.partition())
    if config.n_p == 0:
        return pg, []
    if not config.cascade:
        sat = saturated_cpp_mask(config.n_p)
        return pg, [sat] * config.d
    spec = config.cascade_spec()
    return pg, [build_cpp_mask(spec, l) for l in range(1, config.d + 1)]


def cpp_block(partial: Tensor, layer: LayerParams, mask, heads: int) -> Tensor:
    """partial + MHSA(LN(partial)) under the layer's cascade mask."""
    if layer.cpp_attn is None:
        raise ConfigError("cpp_block called on a layer without partial-attention weights")
    x = layer_norm(partial, layer.cpp_ln.gain, layer.cpp_ln.bias)
    return add(partial, multi_head_attention(x, x, x, mask, layer.cpp_attn, heads))


def pgp_block(tokens: Tensor, f_v: Tensor, layer: LayerParams, pg_mask, heads: int) -> Tensor:
    """Masked cross-attention onto f_v, then the shared FFN, both residual."""
    q = layer_norm(tokens, layer.pgp_ln.gain, layer.pgp_ln.bias)
    y = add(tokens, multi_head_attention(q, f_v, f_v, pg_mask, layer.pgp_attn, heads))
    h = layer_norm(y, layer.ffn_ln.gain, layer.ffn_ln.bias)
    h = linear(gelu(linear(h, layer.ffn_w1, layer.ffn_b1)), layer.ffn_w2, layer.ffn_b2)
    return add(y, h)


def forward(
    f_v: Tensor,
    params: ProjectorParams,
    masks: tuple[AttentionMask, list[AttentionMask]] | None = None,
) -> Tensor:
    """Project n_v visual features to n_p + n_g output tokens.

    The token count is fixed by the config; n_v only has to match the
    partition geometry the masks were built for.
    """
    config = params.config
    if f_v.shape != (config.n_v, config.c):
        raise ShapeError(f"f_v shape {f_v.shape} does not match config ({config.n_v}, {config.c})")
    if f_v.data.dtype != as_dtype(config.dtype):
        raise ShapeError(f"f_v dtype {f_v.data.dtype} does not match config dtype {config.dtype}")
    pg_mask, cpp_masks = masks if masks is not None else build_masks(config)
    n_p = config.n_p
    tokens = concat([params.q_p, params.q_g], axis=0) if n_p and config.n_g else (params.q_p if n_p else params.q_g)
    for l, layer in enumerate(params.layers):
        if n_p > 0:
            partial = slice_rows(tokens, 0, n_p) if config.n_g else tokens
            partial = cpp_block(partial, layer, cpp_masks[l], config.heads)
            tokens = concat([partial, slice_rows(tokens, n_p, config.n_tokens)], axis=0) if config.n_g else partial
        tokens = pgp_block(tokens, f_v, layer, pg_mask, config.heads)
    return layer_norm(tokens, params.final_ln.gain, params.final_ln.bias)


def save_projector(path: str | Path, params: ProjectorParams) -> None:
    save_checkpoint_file(path, params.config.to_dict(), {k: v.data for k, v in params.named()})


def load_projector(path: str | Path) -> ProjectorParams:
    cfg_dict, tensors = load_checkpoint_file(path)
    try:
        config = ParGoConfig.from_dict(cfg_dict)
    except ConfigError as e:
        raise CheckpointError(f"checkpoint config invalid: {e}") from None
    params = empty_projector(config)
    expected = params.as_dict()
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise CheckpointError(f"checkpoint tensors do not match config: missing {missing}, unexpected {extra}")
    for name, p in expected.items():
        arr = tensors[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(f"tensor {name!r} has shape {arr.shape}, config implies {p.data.shape}")
        p.data = np.ascontiguousarray(arr)
    return params
