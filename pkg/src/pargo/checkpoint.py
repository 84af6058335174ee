"""Binary checkpoint container for named float tensors plus a JSON config.

Layout, all integers little-endian:

    magic   4 bytes  "PARG"
    version u32      currently 1
    config  u32 byte length, then canonical JSON (sorted keys, no spaces)
    records repeated until EOF:
        name   u32 byte length, then UTF-8 bytes
        rank   u8
        dims   rank x u64
        data   raw little-endian floats, row-major

The float width comes from the config's "dtype" entry, so every tensor
in one file shares it. Records are written in sorted name order, which
makes saving a loaded checkpoint reproduce the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"PARG"
VERSION = 1

_WIRE_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


def _wire_dtype(config: dict) -> np.dtype:
    name = config.get("dtype")
    if name not in _WIRE_DTYPES:
        raise CheckpointError(f"config dtype must be one of {sorted(_WIRE_DTYPES)}, got {name!r}")
    return _WIRE_DTYPES[name]


def checkpoint_bytes(config: dict, tensors: dict[str, np.ndarray]) -> bytes:
    dtype = _wire_dtype(config)
    try:
        cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"config is not JSON-serializable: {e}") from None
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(cfg)), cfg]
    for name in sorted(tensors):
        arr = tensors[name]
        if not name:
            raise CheckpointError("tensor names must be non-empty")
        if arr.dtype != dtype:
            raise CheckpointError(f"tensor {name!r} has dtype {arr.dtype}, config says {config['dtype']}")
        if arr.ndim > 255:
            raise CheckpointError(f"tensor {name!r} rank {arr.ndim} exceeds format limit 255")
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: needed {n} bytes for {what} at offset {self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u64s(self, n: int, what: str) -> tuple[int, ...]:
        return struct.unpack(f"<{n}Q", self.take(8 * n, what))

    def done(self) -> bool:
        return self.pos == len(self.data)


def parse_checkpoint(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {VERSION}")
    cfg_len = r.u32("config length")
    try:
        config = json.loads(r.take(cfg_len, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt config block: {e}") from None
    if not isinstance(config, dict):
        raise CheckpointError(f"config block must be a JSON object, got {type(config).__name__}")
    dtype = _wire_dtype(config)
    tensors: dict[str, np.ndarray] = {}
    while not r.done():
        name_len = r.u32("name length")
        try:
            name = r.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"corrupt tensor name: {e}") from None
        if name in tensors:
            raise CheckpointError(f"duplicate tensor record {name!r}")
        rank = r.u8("rank")
        shape = r.u64s(rank, f"dims of {name!r}")
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        raw = r.take(count * dtype.itemsize, f"payload of {name!r}")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return config, tensors


def save_checkpoint_file(path: str | Path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(checkpoint_bytes(config, tensors))


def load_checkpoint_file(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"checkpoint file not found: {p}")
    return parse_checkpoint(p.read_bytes())
