"""Acceptance gate: one test per release criterion.

Run with `pytest -v tests/test_acceptance.py` to get one pass/fail line
per criterion. The two training-based checks print their full result
tables; use -rA (or -s) to see them on passing runs.
"""

import time

import numpy as np
import pytest

from pargo.gradcheck import projector_gradcheck
from pargo.kernels import (
    block_partial_xattn,
    dense_masked_xattn,
    flops_scoreav_block,
    flops_scoreav_dense,
    partial_scoreav_ratio,
)
from pargo.masks import CascadeSpec, PartitionSpec, build_cpp_mask, build_pg_mask
from pargo.pipeline import (
    ablate,
    ablation_csv,
    default_train_config,
    mean_accuracy_by_variant,
    metrics_jsonl,
    save_pipeline,
    train_run,
)
from pargo.pipeline import TrainConfig
from pargo.projector import (
    ParGoConfig,
    build_masks,
    forward,
    init_projector,
    load_projector,
    pgp_block,
    save_projector,
)
from pargo.rng import Rng
from pargo.tensor import AttentionWeights, Tensor


def test_criterion_1_mask_invariants_exact():
    t0 = time.perf_counter()
    checked = 0
    for n_s in (1, 2, 3):
        for d in (1, 2, 3, 4):
            for k in (1, 2, 4):
                for n_g in (0, 2):
                    n_p = d * k
                    n_v = n_s * n_p
                    part = PartitionSpec(n_v=n_v, n_p=n_p, n_g=n_g)
                    bits = build_pg_mask(part).bits
                    # partition: partial rows tile the key axis exactly once
                    assert np.array_equal(bits[:n_p].sum(axis=0), np.ones(n_v, dtype=np.intp))
                    assert np.array_equal(bits[:n_p].sum(axis=1), np.full(n_p, n_s))
                    assert bits[n_p:].all()

                    spec = CascadeSpec(n_p=n_p, d=d)
                    prev = None
                    for layer in range(1, d + 1):
                        cpp = build_cpp_mask(spec, layer).bits
                        assert cpp.diagonal().all()  # self-visibility
                        assert np.array_equal(cpp.sum(axis=1), np.full(n_p, k * layer))
                        if prev is not None:
                            assert not (prev & ~cpp).any()  # windows only widen
                        prev = cpp
                        checked += 1
                    assert prev.all()  # saturated at the last layer
    elapsed = time.perf_counter() - t0
    assert checked >= 100, checked
    assert elapsed < 1.0, f"{elapsed:.2f}s"


def test_criterion_2_reference_geometry():
    config = ParGoConfig(n_v=576, n_p=288, n_g=16, c=64, d=6, heads=4)
    part = config.partition()
    assert part.n_s == 2
    cascade = config.cascade_spec()
    assert cascade.k == 48
    assert tuple(cascade.n_vis(l) for l in range(1, 7)) == (48, 96, 144, 192, 240, 288)
    params = init_projector(config, Rng(0))
    out = forward(Tensor(Rng(1).normal((576, 64), dtype=np.float32)), params)
    assert out.shape[0] == 304


def test_criterion_3_gradients_match_finite_differences():
    config = ParGoConfig(n_v=16, n_p=4, n_g=2, c=8, d=2, heads=2, dtype="float64")
    report = projector_gradcheck(config, seed=0, eps=1e-5)
    assert report.ok(1e-5), (
        f"max relative error {report.max_rel_err:.3e} at "
        f"{report.worst_param}{list(report.worst_index)} over {report.checked} coordinates"
    )


def test_criterion_4_out_of_window_features_are_invisible():
    config = ParGoConfig(n_v=16, n_p=8, n_g=2, c=16, d=2, heads=4)
    params = init_projector(config, Rng(0))
    layer = params.layers[0]
    pg, _ = build_masks(config)
    n_s = config.partition().n_s
    rng = Rng(17)
    for trial in range(20):
        tokens = Tensor(rng.normal((config.n_tokens, config.c), dtype=np.float32))
        f_v = rng.normal((config.n_v, config.c), dtype=np.float32)
        base = pgp_block(tokens, Tensor(f_v), layer, pg.bits, config.heads).data
        i = int(rng.integers(0, config.n_p, (1,))[0])
        poked = f_v.copy()
        lo, hi = i * n_s, (i + 1) * n_s
        poked[:lo] += rng.normal((lo, config.c), std=7.0, dtype=np.float32)
        poked[hi:] += rng.normal((config.n_v - hi, config.c), std=7.0, dtype=np.float32)
        again = pgp_block(tokens, Tensor(poked), layer, pg.bits, config.heads).data
        assert np.array_equal(base[i], again[i]), f"trial {trial}, token {i}"


def test_criterion_5_block_kernel_equivalent_and_flop_exact():
    def weights(rng, c, dtype):
        def draw(shape):
            return Tensor(rng.normal(shape, std=0.3, dtype=dtype))

        return AttentionWeights(
            wq=draw((c, c)), bq=draw((c,)), wk=draw((c, c)),
            wv=draw((c, c)), bv=draw((c,)), wo=draw((c, c)), bo=draw((c,)),
        )

    configs = 0
    for seed in range(50):
        rng = Rng(seed)
        n_s = int(rng.integers(1, 5, (1,))[0])
        n_p = int(rng.integers(1, 9, (1,))[0])
        n_g = int(rng.integers(0, 5, (1,))[0])
        heads = int(rng.integers(1, 3, (1,))[0])
        c = 8 * heads
        spec = PartitionSpec(n_v=n_s * n_p, n_p=n_p, n_g=n_g)
        for dtype, tol in ((np.float32, 1e-5), (np.float64, 1e-10)):
            t = rng.normal((spec.n_tokens, c), dtype=dtype)
            f = rng.normal((spec.n_v, c), dtype=dtype)
            w = weights(rng, c, dtype)
            dense = dense_masked_xattn(t, f, w, build_pg_mask(spec), heads)
            block = block_partial_xattn(t, f, w, spec, heads)
            assert np.abs(dense - block).max() <= tol, f"seed {seed} {dtype} {spec}"
        dh = c // heads
        gap = flops_scoreav_dense(spec, c, heads) - flops_scoreav_block(spec, c, heads)
        assert gap == 2 * heads * spec.n_p * (spec.n_v - spec.n_s) * dh * 2
        configs += 1
    assert configs >= 50
    assert partial_scoreav_ratio(PartitionSpec(n_v=576, n_p=288, n_g=16)) == 288


def test_criterion_6_partial_tokens_beat_global_only_on_detail():
    rows = ablate(default_train_config("detail"), ("global_only", "partial_global"))
    print()
    print(ablation_csv(rows))
    means = mean_accuracy_by_variant(rows)
    margin = (means["partial_global"] - means["global_only"]) * 100.0
    print(f"margin: {margin:.2f} accuracy points")
    assert margin >= 5.0, f"partial_global {means['partial_global']:.4f} vs global_only {means['global_only']:.4f}"


def test_criterion_7_window_cascade_not_worse_on_relation():
    rows = ablate(default_train_config("relation"), ("partial_global", "partial_global_nocpp"))
    print()
    print(ablation_csv(rows))
    means = mean_accuracy_by_variant(rows)
    diff = (means["partial_global"] - means["partial_global_nocpp"]) * 100.0
    print(f"cascade effect: {diff:+.2f} accuracy points")
    assert diff >= -1.0, f"cascade {means['partial_global']:.4f} vs saturated {means['partial_global_nocpp']:.4f}"


def test_criterion_8_training_reruns_bit_identical(tmp_path):
    tc = TrainConfig(
        projector=ParGoConfig(n_v=16, n_p=8, n_g=8, c=16, d=2, heads=2, ffn_mult=2),
        task="detail",
        g=4,
        n_symbols=8,
        count=20,
        batch_size=18,
        steps=3,
        seeds=(0,),
    )
    a = train_run(tc, seed=0)
    b = train_run(tc, seed=0)
    assert metrics_jsonl(a.records) == metrics_jsonl(b.records)
    pa, pb = tmp_path / "a.pargo", tmp_path / "b.pargo"
    save_pipeline(pa, tc, 0, a.projector, a.readout)
    save_pipeline(pb, tc, 0, b.projector, b.readout)
    assert pa.read_bytes() == pb.read_bytes()


def test_criterion_9_checkpoint_round_trip_byte_identical(tmp_path):
    config = ParGoConfig(n_v=16, n_p=8, n_g=4, c=16, d=2, heads=2)
    params = init_projector(config, Rng(5))
    first = tmp_path / "first.pargo"
    second = tmp_path / "second.pargo"
    save_projector(first, params)
    save_projector(second, load_projector(first))
    assert first.read_bytes() == second.read_bytes()
