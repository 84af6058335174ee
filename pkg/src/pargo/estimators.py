"""scikit-learn estimator facades over the projector and trainer.

ParGoTokenProjector is a data-independent transformer in the spirit of
random projection: fit only fixes geometry and seeds the weights, and
transform maps each flattened (n_v, c) feature map to a flattened
(n_p + n_g, c) token map.

GridTaskClassifier trains the full projector-plus-head stack on symbol
grids. Each row of X is a flattened g x g grid of integer symbol ids;
the detail task appends the query cell as two extra columns (row, col)
and the relation task appends two cells as four columns.
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .errors import PargoError
from .pipeline import (
    GridSample,
    StubEncoder,
    TrainConfig,
    fit_samples,
    model_logits,
    split_dataset,
)
from .projector import ParGoConfig, build_masks, forward, init_projector
from .rng import Rng
from .tensor import Tensor, as_dtype, no_tape


class ParGoTokenProjector(BaseEstimator, TransformerMixin):
    """Compress per-sample visual feature maps to a fixed token budget.

    Rows of X are feature maps flattened row-major, so n_features must
    be width * n_v; n_v is inferred at fit time. The projection weights
    are random (seeded) and are not adapted to the data.
    """

    def __init__(
        self,
        n_p: int = 32,
        n_g: int = 32,
        width: int = 32,
        depth: int = 4,
        heads: int = 4,
        ffn_mult: int = 2,
        cascade: bool = True,
        dtype: str = "float32",
        seed: int = 0,
    ):
        self.n_p = n_p
        self.n_g = n_g
        self.width = width
        self.depth = depth
        self.heads = heads
        self.ffn_mult = ffn_mult
        self.cascade = cascade
        self.dtype = dtype
        self.seed = seed

    def fit(self, X, y=None):
        X = check_array(X, dtype=[np.float64, np.float32])
        n_features = X.shape[1]
        if self.width < 1 or n_features % self.width != 0:
            raise ValueError(f"n_features={n_features} is not a multiple of width={self.width}")
        n_v = n_features // self.width
        try:
            self.config_ = ParGoConfig(
                n_v=n_v,
                n_p=self.n_p,
                n_g=self.n_g,
                c=self.width,
                d=self.depth,
                heads=self.heads,
                ffn_mult=self.ffn_mult,
                dtype=self.dtype,
                cascade=self.cascade,
            )
        except PargoError as e:
            raise ValueError(f"inferred n_v={n_v} is incompatible with the token geometry: {e}") from None
        self.params_ = init_projector(self.config_, Rng(self.seed))
        self.masks_ = build_masks(self.config_)
        self.n_features_in_ = n_features
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=[np.float64, np.float32])
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, fit saw {self.n_features_in_}")
        cfg = self.config_
        dt = as_dtype(cfg.dtype)
        out = np.empty((X.shape[0], cfg.n_tokens * cfg.c), dtype=dt)
        with no_tape():
            for i in range(X.shape[0]):
                f_v = Tensor(X[i].reshape(cfg.n_v, cfg.c).astype(dt))
                out[i] = forward(f_v, self.params_, self.masks_).data.reshape(-1)
        return out


_QUERY_COLS = {"detail": 2, "global": 0, "relation": 4}


class GridTaskClassifier(BaseEstimator, ClassifierMixin):
    """Projector + linear head trained end to end on symbol grids."""

    def __init__(
        self,
        task: str = "global",
        n_p: int = 32,
        n_g: int = 32,
        width: int = 32,
        depth: int = 4,
        heads: int = 4,
        ffn_mult: int = 2,
        cascade: bool = True,
        dtype: str = "float32",
        lr: float = 3e-3,
        batch_size: int = 32,
        steps: int = 100,
        seed: int = 0,
        encoder_seed: int = 0,
    ):
        self.task = task
        self.n_p = n_p
        self.n_g = n_g
        self.width = width
        self.depth = depth
        self.heads = heads
        self.ffn_mult = ffn_mult
        self.cascade = cascade
        self.dtype = dtype
        self.lr = lr
        self.batch_size = batch_size
        self.steps = steps
        self.seed = seed
        self.encoder_seed = encoder_seed

    def _parse_rows(self, X: np.ndarray, g: int) -> tuple[np.ndarray, np.ndarray]:
        qcols = _QUERY_COLS[self.task]
        grids = X[:, : g * g].astype(np.int64)
        queries = X[:, g * g :].astype(np.int64)
        if grids.min(initial=0) < 0:
            raise ValueError("grid symbols must be non-negative integers")
        if qcols and (queries.min(initial=0) < 0 or queries.max(initial=0) >= g):
            raise ValueError(f"query coordinates must lie in [0, {g})")
        return grids, queries

    def _build_samples(self, grids: np.ndarray, queries: np.ndarray, labels: np.ndarray, g: int) -> list[GridSample]:
        samples = []
        for i in range(grids.shape[0]):
            grid = grids[i].reshape(g, g)
            dq = (0, 0)
            rq = ((0, 0), (0, 1))
            dl = gl = rl = 0
            if self.task == "detail":
                dq = (int(queries[i, 0]), int(queries[i, 1]))
                dl = int(labels[i])
            elif self.task == "global":
                gl = int(labels[i])
            else:
                rq = (
                    (int(queries[i, 0]), int(queries[i, 1])),
                    (int(queries[i, 2]), int(queries[i, 3])),
                )
                rl = int(labels[i])
            samples.append(
                GridSample(
                    grid=grid,
                    detail_query=dq,
                    detail_label=dl,
                    global_label=gl,
                    relation_query=rq,
                    relation_label=rl,
                )
            )
        return samples

    def _infer_grid_side(self, n_features: int) -> int:
        qcols = _QUERY_COLS[self.task]
        cells = n_features - qcols
        g = math.isqrt(max(cells, 0))
        if cells < 4 or g * g != cells:
            raise ValueError(
                f"n_features={n_features} does not decompose into a square grid plus {qcols} query columns"
            )
        return g

    def fit(self, X, y):
        if self.task not in _QUERY_COLS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {sorted(_QUERY_COLS)}")
        X, y = check_X_y(X, y, dtype="numeric")
        g = self._infer_grid_side(X.shape[1])
        grids, queries = self._parse_rows(X, g)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        n_classes = len(self.classes_)
        if n_classes < 2:
            raise ValueError("y must contain at least 2 classes")
        if self.task == "relation" and n_classes != 2:
            raise ValueError(f"relation task is binary, y has {n_classes} classes")
        # Head width follows the observed classes; the frozen encoder
        # table only has to cover the symbol ids present in the grids.
        head_symbols = max(2, n_classes)
        enc_symbols = max(2, int(grids.max()) + 1)
        try:
            tc = TrainConfig(
                projector=ParGoConfig(
                    n_v=g * g,
                    n_p=self.n_p,
                    n_g=self.n_g,
                    c=self.width,
                    d=self.depth,
                    heads=self.heads,
                    ffn_mult=self.ffn_mult,
                    dtype=self.dtype,
                    cascade=self.cascade,
                ),
                task=self.task,
                g=g,
                n_symbols=head_symbols,
                lr=self.lr,
                batch_size=self.batch_size,
                steps=self.steps,
                seeds=(self.seed,),
            )
        except PargoError as e:
            raise ValueError(f"invalid configuration for g={g}: {e}") from None
        samples = self._build_samples(grids, queries, encoded, g)
        train_set, val_set = split_dataset(samples)
        if not val_set:
            train_set, val_set = samples, samples
        encoder = StubEncoder(g, enc_symbols, self.width, seed=self.encoder_seed, dtype=self.dtype)
        result = fit_samples(tc, self.seed, train_set, val_set, encoder)
        self.train_config_ = tc
        self.encoder_ = encoder
        self.result_ = result
        self.projector_ = result.projector
        self.readout_ = result.readout
        self.masks_ = build_masks(tc.projector)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "result_")
        X = check_array(X, dtype="numeric")
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, fit saw {self.n_features_in_}")
        g = self.train_config_.g
        grids, queries = self._parse_rows(X, g)
        if grids.max(initial=0) >= self.encoder_.n_symbols:
            raise ValueError(f"grid symbol out of range; fit saw ids below {self.encoder_.n_symbols}")
        samples = self._build_samples(grids, queries, np.zeros(X.shape[0], dtype=np.int64), g)
        preds = np.empty(X.shape[0], dtype=self.classes_.dtype)
        with no_tape():
            for i, sample in enumerate(samples):
                logits = model_logits(self.projector_, self.readout_, self.masks_, self.encoder_, sample, self.task)
                preds[i] = self.classes_[int(logits.data.argmax())]
        return preds
