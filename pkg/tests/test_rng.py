import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pargo.rng import Rng


def test_same_seed_same_stream():
    a = Rng(42).normal((3, 5))
    b = Rng(42).normal((3, 5))
    assert np.array_equal(a, b)


def test_different_seeds_differ():
    assert not np.array_equal(Rng(0).normal((4, 4)), Rng(1).normal((4, 4)))


def test_split_streams_are_stable_and_distinct():
    kids = Rng(9).split(3)
    again = Rng(9).split(3)
    draws = [r.normal((8,)) for r in kids]
    for r, d in zip(again, draws):
        assert np.array_equal(r.normal((8,)), d)
    assert not np.array_equal(draws[0], draws[1])
    assert not np.array_equal(draws[1], draws[2])


def test_split_does_not_disturb_parent():
    solo = Rng(3).normal((6,))
    parent = Rng(3)
    parent.split(4)
    assert np.array_equal(parent.normal((6,)), solo)


def test_normal_dtype_and_shape():
    x = Rng(1).normal((2, 3), std=0.5, dtype=np.float32)
    assert x.shape == (2, 3)
    assert x.dtype == np.float32


@given(seed=st.integers(0, 2**31 - 1), cut=st.sampled_from([1.0, 2.0, 3.0]))
@settings(max_examples=30, deadline=None)
def test_truncated_normal_respects_cut(seed, cut):
    std = 0.02
    x = Rng(seed).truncated_normal((64,), std=std, cut=cut)
    assert np.abs(x).max() < cut * std


def test_truncated_normal_is_not_degenerate():
    x = Rng(0).truncated_normal((1000,), std=1.0, cut=2.0)
    assert x.std() > 0.5
    assert abs(x.mean()) < 0.2


def test_integers_range():
    x = Rng(5).integers(2, 9, (500,))
    assert x.min() >= 2
    assert x.max() <= 8


def test_uniform_range():
    x = Rng(5).uniform((500,), low=-1.0, high=3.0)
    assert x.min() >= -1.0
    assert x.max() < 3.0


def test_permutation_is_a_permutation():
    p = Rng(8).permutation(20)
    assert sorted(p.tolist()) == list(range(20))
    assert np.array_equal(Rng(8).permutation(20), p)


def test_permutation_varies_with_seed():
    assert not np.array_equal(Rng(0).permutation(50), Rng(1).permutation(50))
