"""Attention mask construction and serialization.

Two mask families drive the projector. The partition mask routes each
partial token to one contiguous window of visual features while global
tokens see everything; it is the same at every layer. The cascade mask
limits partial-token self-attention to a window that widens linearly
with depth until it saturates at full visibility.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, MaskError


@dataclass(frozen=True)
class AttentionMask:
    """Boolean attend/ignore matrix; true means the query may attend."""

    bits: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2 or bits.dtype != np.bool_:
            raise MaskError(f"mask bits must be a 2-D bool matrix, got ndim {bits.ndim}, dtype {bits.dtype}")
        if bits.shape[0] > 0 and not bits.any(axis=1).all():
            empty = np.flatnonzero(~bits.any(axis=1))
            raise MaskError(f"mask row(s) {empty.tolist()} are fully masked; softmax would be undefined")
        bits = np.ascontiguousarray(bits)
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    @property
    def rows(self) -> int:
        return self.bits.shape[0]

    @property
    def cols(self) -> int:
        return self.bits.shape[1]


@dataclass(frozen=True)
class PartitionSpec:
    """Token/feature partition geometry for cross-attention."""

    n_v: int
    n_p: int
    n_g: int

    def __post_init__(self):
        if self.n_v < 1:
            raise ConfigError(f"n_v must be at least 1, got {self.n_v}")
        if self.n_p < 0 or self.n_g < 0:
            raise ConfigError(f"token counts must be non-negative, got n_p={self.n_p}, n_g={self.n_g}")
        if self.n_p + self.n_g < 1:
            raise ConfigError("need at least one token: n_p + n_g >= 1")
        if self.n_p > 0 and self.n_v % self.n_p != 0:
            raise ConfigError(f"partition error: n_v={self.n_v} is not divisible by n_p={self.n_p}")

    @property
    def n_s(self) -> int:
        """Visual features per partial token."""
        if self.n_p == 0:
            raise ConfigError("n_s is undefined when n_p == 0")
        return self.n_v // self.n_p

    @property
    def n_tokens(self) -> int:
        return self.n_p + self.n_g


@dataclass(frozen=True)
class CascadeSpec:
    """Depth schedule for the widening partial self-attention window."""

    n_p: int
    d: int

    def __post_init__(self):
        if self.n_p < 1 or self.d < 1:
            raise ConfigError(f"cascade needs n_p >= 1 and d >= 1, got n_p={self.n_p}, d={self.d}")
        if self.n_p % self.d != 0:
            raise ConfigError(f"cascade divisibility error: n_p={self.n_p} is not divisible by d={self.d}")

    @property
    def k(self) -> int:
        """Per-layer window increment."""
        return self.n_p // self.d

    def n_vis(self, layer: int) -> int:
        """Visible token count at 1-based layer index."""
        if not (1 <= layer <= self.d):
            raise ConfigError(f"layer {layer} out of range 1..{self.d}")
        return self.k * layer


def build_pg_mask(spec: PartitionSpec) -> AttentionMask:
    """Cross-attention mask of shape (n_p + n_g, n_v).

    Partial row i sees exactly columns [i*n_s, (i+1)*n_s); together the
    partial rows cover every column exactly once. Global rows see all
    columns. The same mask applies at every layer.
    """
    bits = np.zeros((spec.n_tokens, spec.n_v), dtype=np.bool_)
    if spec.n_p > 0:
        n_s = spec.n_s
        for i in range(spec.n_p):
            bits[i, i * n_s : (i + 1) * n_s] = True
    bits[spec.n_p :, :] = True
    return AttentionMask(bits, kind="partition")


def cpp_window(spec: CascadeSpec, layer: int, i: int) -> tuple[int, int]:
    """Half-open visible range [start, stop) for token i at a layer.

    The window has length n_vis(layer), is centered on i where possible,
    and is clamped so it stays inside [0, n_p). It always contains i.
    """
    w = spec.n_vis(layer)
    start = min(max(i - (w - 1) // 2, 0), spec.n_p - w)
    return start, start + w


def build_cpp_mask(spec: CascadeSpec, layer: int) -> AttentionMask:
    """Self-attention mask of shape (n_p, n_p) for a 1-based layer index.

    Windows only widen with depth and the final layer is all-true.
    """
    bits = np.zeros((spec.n_p, spec.n_p), dtype=np.bool_)
    for i in range(spec.n_p):
        start, stop = cpp_window(spec, layer, i)
        bits[i, start:stop] = True
    return AttentionMask(bits, kind="cascade")


def saturated_cpp_mask(n_p: int) -> AttentionMask:
    """All-true n_p x n_p mask (the cascade disabled, full visibility)."""
    if n_p < 1:
        raise ConfigError(f"saturated mask needs n_p >= 1, got {n_p}")
    return AttentionMask(np.ones((n_p, n_p), dtype=np.bool_), kind="cascade")


MASK_FORMATS = ("csv", "pgm")


def export_mask(mask: AttentionMask, fmt: str) -> bytes:
    """Serialize a mask: CSV of 0/1 rows, or binary PGM (P5).

    PGM maps visible to 255 and masked to 0; the header width is the
    column (key) count and the height is the row (query) count.
    """
    if fmt == "csv":
        lines = []
        for row in mask.bits:
            lines.append(",".join("1" if b else "0" for b in row))
            lines.append("\n")
        return "".join(lines).encode("ascii")
    if fmt == "pgm":
        header = f"P5\n{mask.cols} {mask.rows}\n255\n".encode("ascii")
        body = np.where(mask.bits, 255, 0).astype(np.uint8).tobytes()
        return header + body
    raise ConfigError(f"unknown mask format {fmt!r}; expected one of {MASK_FORMATS}")


def parse_mask(data: bytes, fmt: str) -> AttentionMask:
    """Inverse of export_mask for both formats."""
    if fmt == "csv":
        text = data.decode("ascii")
        rows = []
        for ln, line in enumerate(text.splitlines()):
            cells = line.split(",")
            try:
                vals = [int(c) for c in cells]
            except ValueError as e:
                raise MaskError(f"CSV mask line {ln}: {e}") from None
            if any(v not in (0, 1) for v in vals):
                raise MaskError(f"CSV mask line {ln}: values must be 0 or 1")
            rows.append(vals)
        if not rows:
            raise MaskError("CSV mask is empty")
        widths = {len(r) for r in rows}
        if len(widths) != 1:
            raise MaskError(f"CSV mask rows have inconsistent widths {sorted(widths)}")
        return AttentionMask(np.array(rows, dtype=np.bool_))
    if fmt == "pgm":
        if not data.startswith(b"P5\n"):
            raise MaskError("not a binary PGM: missing P5 magic")
        try:
            nl1 = data.index(b"\n", 3)
            nl2 = data.index(b"\n", nl1 + 1)
            dims = data[3:nl1].split()
            cols, rows = int(dims[0]), int(dims[1])
            maxval = int(data[nl1 + 1 : nl2])
        except (ValueError, IndexError) as e:
            raise MaskError(f"malformed PGM header: {e}") from None
        if maxval != 255:
            raise MaskError(f"PGM maxval must be 255, got {maxval}")
        body = data[nl2 + 1 :]
        if len(body) != rows * cols:
            raise MaskError(f"PGM payload is {len(body)} bytes, expected {rows * cols}")
        pix = np.frombuffer(body, dtype=np.uint8)
        if not np.isin(pix, (0, 255)).all():
            raise MaskError("PGM mask pixels must be 0 or 255")
        return AttentionMask((pix == 255).reshape(rows, cols))
    raise ConfigError(f"unknown mask format {fmt!r}; expected one of {MASK_FORMATS}")
