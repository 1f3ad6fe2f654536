import itertools
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdt3 import kernels as K

shapes = st.tuples(st.integers(1, 7), st.integers(1, 9))


def _rng(*key):
    return np.random.default_rng(list(key))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@settings(max_examples=25, deadline=None)
@given(shape=shapes)
def test_row_kernels_agree_across_backends(dtype, shape):
    rng = _rng(*shape)
    x = (rng.normal(scale=4.0, size=shape)).astype(dtype)
    dy = rng.normal(size=shape).astype(dtype)
    gain, bias = rng.normal(size=shape[1]).astype(dtype), rng.normal(size=shape[1]).astype(dtype)
    tol = dict(rtol=1e-5, atol=1e-6) if dtype == np.float32 else dict(rtol=1e-12, atol=1e-13)

    y_np, y_nb = K.softmax_rows_np(x.copy()), K.softmax_rows_nb(x.copy())
    np.testing.assert_allclose(y_np, y_nb, **tol)
    np.testing.assert_allclose(K.softmax_rows_grad_np(y_np, dy), K.softmax_rows_grad_nb(y_np, dy), **tol)

    fwd_np, fwd_nb = K.layernorm_fwd_np(x, gain, bias, 1e-5), K.layernorm_fwd_nb(x, gain, bias, 1e-5)
    for a, b in zip(fwd_np, fwd_nb):
        np.testing.assert_allclose(a, b, **tol)
    _, xhat, rstd = fwd_np
    for a, b in zip(K.layernorm_bwd_np(dy, xhat, rstd, gain), K.layernorm_bwd_nb(dy, xhat, rstd, gain)):
        np.testing.assert_allclose(a, b, **tol)

    np.testing.assert_allclose(K.gelu_fwd_np(x), K.gelu_fwd_nb(x), **tol)
    np.testing.assert_allclose(K.gelu_bwd_np(x, dy), K.gelu_bwd_nb(x, dy), **tol)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 40), k=st.integers(1, 40), draws=st.integers(1, 20), seed=st.integers(0, 10 ** 6))
def test_sampling_is_identical_across_backends(n, k, draws, seed):
    k = min(k, n)
    u = _rng(seed).random((draws, k))
    a = K.sample_without_replacement_np(n, u)
    b = K.sample_without_replacement_nb(n, u)
    np.testing.assert_array_equal(a, b)
    for row in a:
        assert len(set(row.tolist())) == k and row.min() >= 0 and row.max() < n
    w = _rng(seed, 1).random(n)
    np.testing.assert_array_equal(K.draw_weight_sums_np(a, w), K.draw_weight_sums_nb(a, w))


def test_sampling_is_uniform_over_subsets():
    # every 2-subset of 5 items should come up about 1/10 of the time
    u = _rng(0).random((20000, 2))
    draws = np.sort(K.sample_without_replacement(5, u), axis=1)
    counts = {}
    for a, b in draws:
        counts[(a, b)] = counts.get((a, b), 0) + 1
    assert set(counts) == set(itertools.combinations(range(5), 2))
    for c in counts.values():
        assert abs(c / 20000 - 0.1) < 0.01


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 12), min_size=1, max_size=10))
def test_signed_rank_null_matches_subset_enumeration(weights):
    w = np.array(weights, dtype=np.int64)
    ref = np.zeros(int(w.sum()) + 1)
    for signs in itertools.product((0, 1), repeat=w.size):
        ref[int(np.dot(signs, w))] += 1
    np.testing.assert_array_equal(K.signed_rank_null_np(w), ref)
    np.testing.assert_array_equal(K.signed_rank_null_nb(w), ref)


def test_kernel_table_covers_every_public_kernel():
    for name, (f_np, f_nb) in K.KERNEL_PAIRS.items():
        assert getattr(K, name) in (f_np, f_nb)


@pytest.mark.parametrize("flag,expected", [("1", "numpy"), ("0", "numba")])
def test_env_flag_selects_backend(flag, expected):
    env = dict(os.environ, CDT3_DISABLE_NUMBA=flag)
    code = ("from cdt3._accel import backend; from cdt3 import kernels as K; "
            "print(backend(), K.softmax_rows is K.softmax_rows_np)")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    name, is_np = out.stdout.split()
    assert name == expected
    assert is_np == str(expected == "numpy")
