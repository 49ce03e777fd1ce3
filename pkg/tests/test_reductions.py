import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from syncsim.reductions import batch_mean, compensated_sum, det_matmul, exact_mean, scalar_mean


def test_compensated_sum_matches_fsum():
    rng = np.random.default_rng(0)
    stack = rng.normal(scale=10.0 ** rng.integers(-5, 5, size=(40, 1)), size=(40, 8))
    got = compensated_sum(stack)
    want = np.array([math.fsum(stack[:, j]) for j in range(8)])
    assert np.array_equal(got, want)


def test_batch_mean_duplication_invariant():
    rng = np.random.default_rng(1)
    for _ in range(25):
        stack = rng.normal(size=(rng.integers(2, 30), 5))
        mean = batch_mean(stack)
        assert np.array_equal(batch_mean(np.repeat(stack, 2, axis=0)), mean)
        assert np.array_equal(batch_mean(np.concatenate([stack, stack])), mean)


def test_exact_mean_identical_inputs_short_circuit():
    v = np.array([0.1, 0.2, 0.3])
    assert np.array_equal(exact_mean([v, v.copy(), v.copy()]), v)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_exact_mean_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    arrs = [rng.normal(scale=10.0 ** rng.integers(-6, 6), size=7) for _ in range(rng.integers(2, 6))]
    base = exact_mean(arrs)
    order = rng.permutation(len(arrs))
    assert np.array_equal(exact_mean([arrs[i] for i in order]), base)


def test_exact_mean_shape_mismatch():
    with pytest.raises(ValueError):
        exact_mean([np.zeros(2), np.zeros(3)])


def test_empty_inputs_rejected():
    with pytest.raises(ValueError):
        exact_mean([])
    with pytest.raises(ValueError):
        scalar_mean([])
    with pytest.raises(ValueError):
        compensated_sum(np.zeros((0, 3)))


def test_det_matmul_matches_blas_closely_and_rowwise_stable():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(9, 5))
    b = rng.normal(size=(5, 4))
    got = det_matmul(a, b)
    assert np.allclose(got, a @ b, rtol=1e-13)
    rows = np.vstack([det_matmul(a[i : i + 1], b) for i in range(9)])
    assert np.array_equal(got, rows)


def test_det_matmul_shape_errors():
    with pytest.raises(ValueError):
        det_matmul(np.zeros((2, 3)), np.zeros((4, 2)))
    with pytest.raises(ValueError):
        det_matmul(np.zeros(3), np.zeros((3, 2)))
