"""Desk-scale training harness around the projector.

Synthetic g x g symbol grids stand in for images. A frozen stub encoder
turns a grid into per-cell features (symbol embedding plus a sinusoidal
position code), the projector compresses them to its token budget, and a
linear head reads the task answer from pooled token features. Three
tasks probe different abilities:

    detail    which symbol sits at a queried cell
    global    the majority symbol of the whole grid
    relation  whether two queried cells hold the same symbol

The head stays linear over its feature vector: mean-pooled tokens, the
query's position code, and a per-query attention-pooled context over the
tokens (for the relation task also the elementwise product of the two
contexts, so "same symbol" is linearly readable).

Everything is deterministic in (config, seed): dataset, init, batch
order, metrics, checkpoints.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint_file, save_checkpoint_file
from .errors import CheckpointError, ConfigError, ShapeError, TrainingDivergedError
from .optim import AdamConfig, adam_init, adam_step, zero_grads
from .projector import ParGoConfig, ProjectorParams, build_masks, empty_projector, forward, init_projector
from .rng import Rng
from .tensor import (
    Tensor,
    add,
    as_dtype,
    backward,
    concat,
    linear,
    masked_softmax,
    matmul,
    mean_rows,
    mul,
    no_tape,
    parameter,
    scale,
    softmax_cross_entropy,
    transpose,
)

TASKS = ("detail", "global", "relation")


@dataclass(frozen=True)
class GridSample:
    """One synthetic grid with all three task labels precomputed."""

    grid: np.ndarray
    detail_query: tuple[int, int]
    detail_label: int
    global_label: int
    relation_query: tuple[tuple[int, int], tuple[int, int]]
    relation_label: int


def majority_symbol(grid: np.ndarray, n_symbols: int) -> int:
    """Most frequent symbol id; ties break toward the lowest id."""
    return int(np.bincount(grid.reshape(-1), minlength=n_symbols).argmax())


def gen_dataset(seed: int, count: int, g: int, n_symbols: int) -> list[GridSample]:
    """Uniform random grids with uniform queries, deterministic per seed.

    Relation queries are two distinct cells drawn uniformly.
    """
    if g < 2 or n_symbols < 2:
        raise ConfigError(f"need g >= 2 and n_symbols >= 2, got g={g}, K={n_symbols}")
    if count < 1:
        raise ConfigError(f"count must be positive, got {count}")
    rng = Rng(seed)
    grids = rng.integers(0, n_symbols, (count, g, g))
    detail_rc = rng.integers(0, g, (count, 2))
    p1 = rng.integers(0, g * g, (count,))
    p2 = rng.integers(0, g * g - 1, (count,))
    p2 = p2 + (p2 >= p1)
    samples = []
    for i in range(count):
        grid = grids[i]
        r, c = int(detail_rc[i, 0]), int(detail_rc[i, 1])
        a, b = int(p1[i]), int(p2[i])
        qa, qb = (a // g, a % g), (b // g, b % g)
        samples.append(
            GridSample(
                grid=grid,
                detail_query=(r, c),
                detail_label=int(grid[r, c]),
                global_label=majority_symbol(grid, n_symbols),
                relation_query=(qa, qb),
                relation_label=int(grid[qa] == grid[qb]),
            )
        )
    return samples


def split_dataset(samples: list[GridSample]) -> tuple[list[GridSample], list[GridSample]]:
    """90/10 train/val split by index."""
    n_train = (len(samples) * 9) // 10
    return samples[:n_train], samples[n_train:]


def _sincos(positions: np.ndarray, width: int) -> np.ndarray:
    pairs = width // 2
    div = np.power(10000.0, np.arange(pairs) * 2.0 / width)
    ang = positions[:, None] / div[None, :]
    out = np.empty((len(positions), width))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


class StubEncoder:
    """Frozen per-cell featurizer: symbol embedding + 2-D position code.

    The embedding table is seeded once and never updated; the position
    table encodes row in the first half of the channels and column in
    the second half, sinusoidally. Feature row order is raster order.
    """

    def __init__(self, g: int, n_symbols: int, c: int, seed: int = 0, dtype: str = "float32"):
        if c % 4 != 0:
            raise ConfigError(f"encoder width must be a multiple of 4, got {c}")
        dt = as_dtype(dtype)
        self.g = g
        self.n_symbols = n_symbols
        self.c = c
        self.embed = Rng(seed).normal((n_symbols, c), std=1.0, dtype=dt)
        half = c // 2
        idx = np.arange(g, dtype=np.float64)
        row_code = _sincos(idx, half)
        col_code = _sincos(idx, half)
        pos = np.empty((g * g, c))
        for r in range(g):
            pos[r * g : (r + 1) * g, :half] = row_code[r]
            pos[r * g : (r + 1) * g, half:] = col_code
        self.pos = pos.astype(dt)
        self.embed.flags.writeable = False
        self.pos.flags.writeable = False

    def pos_row(self, r: int, c: int) -> np.ndarray:
        return self.pos[r * self.g + c]


def encode(sample: GridSample, encoder: StubEncoder) -> Tensor:
    """f_v row for cell (r, c) = embed[symbol] + pos[r*g + c]."""
    if sample.grid.shape != (encoder.g, encoder.g):
        raise ShapeError(f"grid shape {sample.grid.shape} does not match encoder g={encoder.g}")
    flat = sample.grid.reshape(-1)
    return Tensor(encoder.embed[flat] + encoder.pos)


@dataclass
class ReadoutParams:
    """Linear task head; w_query shapes the per-query context pooling."""

    task: str
    w_query: Tensor | None
    w_out: Tensor
    b_out: Tensor

    def named(self):
        if self.w_query is not None:
            yield "w_query", self.w_query
        yield "w_out", self.w_out
        yield "b_out", self.b_out


def _readout_dims(task: str, c: int, n_symbols: int) -> tuple[int, int]:
    """(feature width, class count) for a task head."""
    if task == "detail":
        return 3 * c, n_symbols
    if task == "global":
        return c, n_symbols
    if task == "relation":
        return 6 * c, 2
    raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")


def init_readout(task: str, c: int, n_symbols: int, rng: Rng, dtype: str = "float32") -> ReadoutParams:
    dt = as_dtype(dtype)
    feat, classes = _readout_dims(task, c, n_symbols)
    w_query = parameter(np.eye(c, dtype=dt)) if task in ("detail", "relation") else None
    return ReadoutParams(
        task=task,
        w_query=w_query,
        w_out=parameter(rng.truncated_normal((feat, classes), std=0.02, dtype=dt)),
        b_out=parameter(np.zeros(classes, dtype=dt)),
    )


def empty_readout(task: str, c: int, n_symbols: int, dtype: str = "float32") -> ReadoutParams:
    dt = as_dtype(dtype)
    feat, classes = _readout_dims(task, c, n_symbols)
    w_query = parameter(np.zeros((c, c), dtype=dt)) if task in ("detail", "relation") else None
    return ReadoutParams(
        task=task,
        w_query=w_query,
        w_out=parameter(np.zeros((feat, classes), dtype=dt)),
        b_out=parameter(np.zeros(classes, dtype=dt)),
    )


def visibility_boost(pg_mask, cell: int) -> np.ndarray:
    """(1, n_tokens) score boost encoding which tokens can see a cell.

    Each token is scored by the share of its receptive field the cell
    occupies, scaled so the most concentrated viewer gets 2*ln(n_tokens)
    and tokens that cannot see the cell get 0. Consumers of the token
    sequence know each token's place and hence its window; this carries
    that fact into the probe. When every token sees the whole grid the
    boost is constant across tokens and cancels in the softmax.
    """
    bits = pg_mask.bits
    conc = bits[:, cell] / bits.sum(axis=1)
    top = conc.max()
    if top <= 0.0:
        return np.zeros((1, bits.shape[0]))
    return (2.0 * math.log(bits.shape[0]) * conc / top)[None, :]


def _pool_context(tokens: Tensor, pos_emb: Tensor, boost: np.ndarray, readout: ReadoutParams) -> Tensor:
    """Attention-pool the tokens with the query position as the probe.

    Scores combine a learned content term with the fixed visibility
    boost; the latter lets position-selective retrieval work from the
    first step whenever some tokens own a private window.
    """
    c = tokens.shape[1]
    q = matmul(pos_emb, readout.w_query)
    content = scale(matmul(q, transpose(tokens)), 1.0 / math.sqrt(c))
    scores = add(content, Tensor(boost.astype(tokens.data.dtype)))
    attn = masked_softmax(scores, np.ones((1, tokens.shape[0]), dtype=np.bool_))
    return matmul(attn, tokens)


def model_logits(
    proj: ProjectorParams,
    readout: ReadoutParams,
    masks,
    encoder: StubEncoder,
    sample: GridSample,
    task: str,
) -> Tensor:
    """(1, classes) logits for one sample."""
    tokens = forward(encode(sample, encoder), proj, masks)
    pooled = mean_rows(tokens)
    if task == "global":
        feats = pooled
    elif task == "detail":
        g = encoder.g
        r, c = sample.detail_query
        pos = Tensor(encoder.pos_row(r, c)[None, :])
        ctx = _pool_context(tokens, pos, visibility_boost(masks[0], r * g + c), readout)
        feats = concat([pooled, pos, ctx], axis=1)
    elif task == "relation":
        g = encoder.g
        (r1, c1), (r2, c2) = sample.relation_query
        pos1 = Tensor(encoder.pos_row(r1, c1)[None, :])
        pos2 = Tensor(encoder.pos_row(r2, c2)[None, :])
        ctx1 = _pool_context(tokens, pos1, visibility_boost(masks[0], r1 * g + c1), readout)
        ctx2 = _pool_context(tokens, pos2, visibility_boost(masks[0], r2 * g + c2), readout)
        feats = concat([pooled, pos1, pos2, ctx1, ctx2, mul(ctx1, ctx2)], axis=1)
    else:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    return linear(feats, readout.w_out, readout.b_out)


def task_label(sample: GridSample, task: str) -> int:
    if task == "detail":
        return sample.detail_label
    if task == "global":
        return sample.global_label
    if task == "relation":
        return sample.relation_label
    raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")


def evaluate(
    proj: ProjectorParams,
    readout: ReadoutParams,
    samples: list[GridSample],
    task: str,
    encoder: StubEncoder,
    masks=None,
) -> float:
    """Deterministic top-1 accuracy."""
    if not samples:
        raise ConfigError("cannot evaluate on an empty dataset")
    if masks is None:
        masks = build_masks(proj.config)
    hits = 0
    with no_tape():
        for sample in samples:
            logits = model_logits(proj, readout, masks, encoder, sample, task)
            hits += int(int(logits.data.argmax()) == task_label(sample, task))
    return hits / len(samples)


@dataclass(frozen=True)
class TrainConfig:
    projector: ParGoConfig
    task: str = "detail"
    g: int = 8
    n_symbols: int = 8
    count: int = 1000
    data_seed: int = 1234
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 32
    steps: int = 300
    seeds: tuple[int, ...] = (0, 1, 2)
    eval_every: int | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.g < 2 or self.n_symbols < 2:
            raise ConfigError(f"need g >= 2 and n_symbols >= 2, got g={self.g}, K={self.n_symbols}")
        if self.projector.n_v != self.g * self.g:
            raise ConfigError(f"projector n_v={self.projector.n_v} must equal g*g={self.g * self.g}")
        if self.count < 10:
            raise ConfigError(f"count must be at least 10 for a non-empty val split, got {self.count}")
        if self.lr <= 0 or self.batch_size < 1 or self.steps < 0:
            raise ConfigError(f"bad optimizer settings: lr={self.lr}, batch_size={self.batch_size}, steps={self.steps}")
        if not self.seeds:
            raise ConfigError("seeds list must be non-empty")
        if self.eval_every is not None and self.eval_every < 1:
            raise ConfigError(f"eval_every must be positive, got {self.eval_every}")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["projector"] = self.projector.to_dict()
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown train config keys {sorted(extra)}")
        if "projector" not in data:
            raise ConfigError("train config requires a projector section")
        kwargs = dict(data)
        kwargs["projector"] = ParGoConfig.from_dict(data["projector"])
        if "seeds" in kwargs:
            kwargs["seeds"] = tuple(kwargs["seeds"])
        return cls(**kwargs)


def default_train_config(task: str, scale: str = "ci") -> TrainConfig:
    """Calibrated per-task defaults.

    "ci" is the fast g=8 setup the acceptance checks and CLI demos use;
    "full" is the g=24 geometry matching the reference projector shape
    (n_v=576, n_p=288, n_g=16, d=6). The relation setup uses a binary
    symbol alphabet so the two classes are balanced without skewing the
    uniform query distribution, and one cell per partial token so the
    pairwise comparison feature is clean.
    """
    if scale == "ci":
        if task == "relation":
            proj = ParGoConfig(n_v=64, n_p=64, n_g=16, c=32, d=4, heads=4, ffn_mult=2)
            return TrainConfig(
                projector=proj, task=task, g=8, n_symbols=2, count=2000,
                batch_size=16, steps=200, eval_every=100,
            )
        proj = ParGoConfig(n_v=64, n_p=32, n_g=32, c=32, d=4, heads=4, ffn_mult=2)
        return TrainConfig(
            projector=proj, task=task, g=8, n_symbols=8, count=600,
            batch_size=16, steps=300, eval_every=100,
        )
    if scale == "full":
        proj = ParGoConfig(n_v=576, n_p=288, n_g=16, c=64, d=6, heads=4)
        return TrainConfig(
            projector=proj, task=task, g=24,
            n_symbols=2 if task == "relation" else 8,
            count=2000, batch_size=32, steps=1000, eval_every=200,
        )
    raise ConfigError(f"unknown scale {scale!r}; expected 'ci' or 'full'")


def run_id_for(tc: TrainConfig, seed: int) -> str:
    blob = json.dumps({"seed": seed, "train": tc.to_dict()}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


@dataclass
class RunResult:
    run_id: str
    seed: int
    records: list[dict]
    projector: ProjectorParams
    readout: ReadoutParams
    final_val_acc: float


def _batch_indices(rng: Rng, n: int, batch: int):
    while True:
        perm = rng.permutation(n)
        for i in range(0, n, batch):
            yield perm[i : i + batch]


def fit_samples(
    tc: TrainConfig,
    seed: int,
    train_set: list[GridSample],
    val_set: list[GridSample],
    encoder: StubEncoder,
) -> RunResult:
    """One seeded optimization run over given samples.

    Logs one record per step plus a step-0 baseline; val accuracy is
    attached every eval_every steps (default: once per epoch) and always
    on the final step. Aborts if the loss stops being finite.
    """
    if tc.steps > 0 and not train_set:
        raise ConfigError("cannot train on an empty train split")
    cfg = tc.projector
    masks = build_masks(cfg)
    rng_init, rng_head, rng_order = Rng(seed).split(3)
    proj = init_projector(cfg, rng_init)
    readout = init_readout(tc.task, cfg.c, tc.n_symbols, rng_head, cfg.dtype)
    params = {f"projector.{k}": v for k, v in proj.named()}
    params.update({f"readout.{k}": v for k, v in readout.named()})
    opt = adam_init(AdamConfig(lr=tc.lr, beta1=tc.beta1, beta2=tc.beta2))

    run_id = run_id_for(tc, seed)
    eval_every = tc.eval_every or max(1, len(train_set) // tc.batch_size)
    val_acc = evaluate(proj, readout, val_set, tc.task, encoder, masks)
    records = [{"run_id": run_id, "step": 0, "loss": None, "val_acc": val_acc}]
    batches = _batch_indices(rng_order, len(train_set), tc.batch_size)
    for step in range(1, tc.steps + 1):
        idx = next(batches)
        zero_grads(params)
        rows = []
        labels = []
        for i in idx:
            sample = train_set[int(i)]
            rows.append(model_logits(proj, readout, masks, encoder, sample, tc.task))
            labels.append(task_label(sample, tc.task))
        logits = rows[0] if len(rows) == 1 else concat(rows, axis=0)
        loss = softmax_cross_entropy(logits, np.array(labels, dtype=np.int64))
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise TrainingDivergedError(f"loss became non-finite at step {step} (run {run_id})")
        backward(loss)
        adam_step(opt, params)
        record: dict = {"run_id": run_id, "step": step, "loss": loss_val, "val_acc": None}
        if step % eval_every == 0 or step == tc.steps:
            val_acc = evaluate(proj, readout, val_set, tc.task, encoder, masks)
            record["val_acc"] = val_acc
        records.append(record)
    return RunResult(
        run_id=run_id,
        seed=seed,
        records=records,
        projector=proj,
        readout=readout,
        final_val_acc=val_acc,
    )


def train_run(tc: TrainConfig, seed: int) -> RunResult:
    """Generate the config's dataset, then fit on it."""
    encoder = StubEncoder(tc.g, tc.n_symbols, tc.projector.c, seed=tc.data_seed, dtype=tc.projector.dtype)
    train_set, val_set = split_dataset(gen_dataset(tc.data_seed, tc.count, tc.g, tc.n_symbols))
    return fit_samples(tc, seed, train_set, val_set, encoder)


def train(tc: TrainConfig) -> list[RunResult]:
    """Run every seed in the config, in order."""
    return [train_run(tc, seed) for seed in tc.seeds]


def metrics_jsonl(records: list[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def save_pipeline(path: str | Path, tc: TrainConfig, seed: int, proj: ProjectorParams, readout: ReadoutParams) -> None:
    config = {"kind": "pipeline", "dtype": tc.projector.dtype, "seed": seed, "train": tc.to_dict()}
    tensors = {f"projector.{k}": v.data for k, v in proj.named()}
    tensors.update({f"readout.{k}": v.data for k, v in readout.named()})
    save_checkpoint_file(path, config, tensors)


def load_pipeline(path: str | Path) -> tuple[TrainConfig, int, ProjectorParams, ReadoutParams]:
    cfg, tensors = load_checkpoint_file(path)
    if cfg.get("kind") != "pipeline":
        raise CheckpointError(f"not a pipeline checkpoint (kind={cfg.get('kind')!r})")
    try:
        tc = TrainConfig.from_dict(cfg["train"])
        seed = int(cfg["seed"])
    except (KeyError, ConfigError, TypeError, ValueError) as e:
        raise CheckpointError(f"pipeline checkpoint config invalid: {e}") from None
    proj = empty_projector(tc.projector)
    readout = empty_readout(tc.task, tc.projector.c, tc.n_symbols, tc.projector.dtype)
    expected = {f"projector.{k}": v for k, v in proj.named()}
    expected.update({f"readout.{k}": v for k, v in readout.named()})
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise CheckpointError(f"checkpoint tensors do not match config: missing {missing}, unexpected {extra}")
    for name, p in expected.items():
        arr = tensors[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(f"tensor {name!r} has shape {arr.shape}, config implies {p.data.shape}")
        p.data = np.ascontiguousarray(arr)
    return tc, seed, proj, readout


ABLATION_VARIANTS = ("global_only", "partial_only", "partial_global", "partial_global_nocpp")
ABLATION_CSV_HEADER = "variant,n_p,n_g,cpp,seed,val_acc"


def ablation_config(base: TrainConfig, variant: str) -> TrainConfig:
    """Derive one ablation arm at the base config's total token budget."""
    cfg = base.projector
    budget = cfg.n_p + cfg.n_g
    if variant == "global_only":
        proj = dataclasses.replace(cfg, n_p=0, n_g=budget, cascade=True)
    elif variant == "partial_only":
        proj = dataclasses.replace(cfg, n_p=budget, n_g=0, cascade=True)
    elif variant == "partial_global":
        proj = dataclasses.replace(cfg, cascade=True)
    elif variant == "partial_global_nocpp":
        proj = dataclasses.replace(cfg, cascade=False)
    else:
        raise ConfigError(f"unknown ablation variant {variant!r}; expected one of {ABLATION_VARIANTS}")
    return dataclasses.replace(base, projector=proj)


def ablate(base: TrainConfig, variants: tuple[str, ...] = ABLATION_VARIANTS) -> list[dict]:
    """Train every requested variant at token-budget parity, per seed.

    The no-cascade arm keeps the partial self-attention block and its
    parameters and only saturates the masks, so the comparison is at
    exact parameter parity. Returns one row per (variant, seed).
    """
    budget = base.projector.n_p + base.projector.n_g
    rows = []
    for variant in variants:
        tc = ablation_config(base, variant)
        if tc.projector.n_p + tc.projector.n_g != budget:
            raise ConfigError(f"variant {variant} broke token-budget parity")
        has_cpp = tc.projector.n_p > 0 and tc.projector.cascade
        for seed in tc.seeds:
            result = train_run(tc, seed)
            rows.append(
                {
                    "variant": variant,
                    "n_p": tc.projector.n_p,
                    "n_g": tc.projector.n_g,
                    "cpp": int(has_cpp),
                    "seed": seed,
                    "val_acc": result.final_val_acc,
                }
            )
    return rows


def ablation_csv(rows: list[dict]) -> str:
    lines = [ABLATION_CSV_HEADER]
    for r in rows:
        lines.append(f"{r['variant']},{r['n_p']},{r['n_g']},{r['cpp']},{r['seed']},{r['val_acc']!r}")
    return "\n".join(lines) + "\n"


def mean_accuracy_by_variant(rows: list[dict]) -> dict[str, float]:
    sums: dict[str, list[float]] = {}
    for r in rows:
        sums.setdefault(r["variant"], []).append(r["val_acc"])
    return {k: float(np.mean(v)) for k, v in sums.items()}
