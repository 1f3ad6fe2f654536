"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Every public kernel name resolves to the numba implementation when
:data:`cdt3._accel.NUMBA_OK` is true, otherwise to the numpy one. Both
implementations stay importable (``*_np`` / ``*_nb``) so benchmarks and
tests can compare them directly.

Row-wise kernels expect 2-D C-contiguous input; callers reshape.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf as _erf

from ._accel import NUMBA_OK, njit

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


# --------------------------------------------------------------------- softmax


def softmax_rows_np(x):
    z = x - x.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


@njit
def softmax_rows_nb(x):
    n, m = x.shape
    out = np.empty_like(x)
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, m):
            mx = max(mx, x[i, j])
        s = 0.0
        for j in range(m):
            e = math.exp(x[i, j] - mx)
            out[i, j] = e
            s += e
        inv = 1.0 / s
        for j in range(m):
            out[i, j] *= inv
    return out


def softmax_rows_grad_np(y, dy):
    return y * (dy - (dy * y).sum(axis=1, keepdims=True))


@njit
def softmax_rows_grad_nb(y, dy):
    n, m = y.shape
    out = np.empty_like(y)
    for i in range(n):
        s = 0.0
        for j in range(m):
            s += dy[i, j] * y[i, j]
        for j in range(m):
            out[i, j] = y[i, j] * (dy[i, j] - s)
    return out


# ------------------------------------------------------------------- layernorm


def layernorm_fwd_np(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


@njit
def layernorm_fwd_nb(x, gain, bias, eps):
    n, m = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(n, dtype=x.dtype)
    for i in range(n):
        mu = 0.0
        for j in range(m):
            mu += x[i, j]
        mu /= m
        var = 0.0
        for j in range(m):
            c = x[i, j] - mu
            var += c * c
        var /= m
        r = 1.0 / math.sqrt(var + eps)
        rstd[i] = r
        for j in range(m):
            h = (x[i, j] - mu) * r
            xhat[i, j] = h
            y[i, j] = h * gain[j] + bias[j]
    return y, xhat, rstd


def layernorm_bwd_np(dy, xhat, rstd, gain):
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    g = dy * gain
    dx = (g - g.mean(axis=1, keepdims=True) - xhat * (g * xhat).mean(axis=1, keepdims=True)) * rstd[:, None]
    return dx, dgain, dbias


@njit
def layernorm_bwd_nb(dy, xhat, rstd, gain):
    n, m = dy.shape
    dx = np.empty_like(dy)
    dgain = np.zeros(m, dtype=dy.dtype)
    dbias = np.zeros(m, dtype=dy.dtype)
    for i in range(n):
        s1 = 0.0
        s2 = 0.0
        for j in range(m):
            g = dy[i, j] * gain[j]
            s1 += g
            s2 += g * xhat[i, j]
            dgain[j] += dy[i, j] * xhat[i, j]
            dbias[j] += dy[i, j]
        s1 /= m
        s2 /= m
        for j in range(m):
            dx[i, j] = (dy[i, j] * gain[j] - s1 - xhat[i, j] * s2) * rstd[i]
    return dx, dgain, dbias


# ------------------------------------------------------------------------ gelu


def gelu_fwd_np(x):
    return (0.5 * x * (1.0 + _erf(x * _INV_SQRT2))).astype(x.dtype, copy=False)


@njit
def gelu_fwd_nb(x):
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        out[i] = 0.5 * v * (1.0 + math.erf(v * _INV_SQRT2))
    return out.reshape(x.shape)


def gelu_bwd_np(x, dy):
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return (dy * (cdf + x * pdf)).astype(x.dtype, copy=False)


@njit
def gelu_bwd_nb(x, dy):
    fx = x.ravel()
    fd = dy.ravel()
    out = np.empty_like(fx)
    for i in range(fx.size):
        v = fx[i]
        cdf = 0.5 * (1.0 + math.erf(v * _INV_SQRT2))
        pdf = math.exp(-0.5 * v * v) * _INV_SQRT2PI
        out[i] = fd[i] * (cdf + v * pdf)
    return out.reshape(x.shape)


# ------------------------------------------------------- permutation sampling


def sample_without_replacement_np(n, u):
    """Partial Fisher-Yates driven by pre-drawn uniforms.

    ``u`` has shape (n_draws, k); row ``r`` yields k distinct indices in
    ``[0, n)``. The numba twin consumes ``u`` identically, so both
    backends return the same draws for the same ``u``.
    """
    n_draws, k = u.shape
    pool = np.tile(np.arange(n, dtype=np.int64), (n_draws, 1))
    rows = np.arange(n_draws)
    for i in range(k):
        j = i + np.minimum((u[:, i] * (n - i)).astype(np.int64), n - i - 1)
        tmp = pool[rows, i].copy()
        pool[rows, i] = pool[rows, j]
        pool[rows, j] = tmp
    return pool[:, :k].copy()


@njit
def sample_without_replacement_nb(n, u):
    n_draws, k = u.shape
    out = np.empty((n_draws, k), dtype=np.int64)
    pool = np.empty(n, dtype=np.int64)
    for r in range(n_draws):
        for i in range(n):
            pool[i] = i
        for i in range(k):
            j = i + min(int(u[r, i] * (n - i)), n - i - 1)
            t = pool[i]
            pool[i] = pool[j]
            pool[j] = t
            out[r, i] = pool[i]
    return out


def draw_weight_sums_np(draws, weight):
    """Sum of ``weight`` over each row of ``draws``, accumulated left to right."""
    out = np.zeros(draws.shape[0], dtype=np.float64)
    for i in range(draws.shape[1]):
        out += weight[draws[:, i]]
    return out


@njit
def draw_weight_sums_nb(draws, weight):
    n_draws, k = draws.shape
    out = np.zeros(n_draws, dtype=np.float64)
    for r in range(n_draws):
        c = 0.0
        for i in range(k):
            c += weight[draws[r, i]]
        out[r] = c
    return out


# ------------------------------------------------- signed-rank null counting


def signed_rank_null_np(weights):
    """Counts of each attainable subset sum of integer ``weights``.

    ``out[s]`` is the number of the 2**n sign assignments whose positive
    part sums to ``s``. Used with doubled mid-ranks so ties stay integral.
    """
    total = int(weights.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for w in weights:
        w = int(w)
        if w:
            counts[w:] = counts[w:] + counts[:-w].copy()
        else:
            counts *= 2.0
    return counts


@njit
def signed_rank_null_nb(weights):
    total = 0
    for w in weights:
        total += w
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for w in weights:
        if w == 0:
            for s in range(total + 1):
                counts[s] *= 2.0
            continue
        for s in range(total, w - 1, -1):
            counts[s] += counts[s - w]
    return counts


if NUMBA_OK:
    softmax_rows = softmax_rows_nb
    softmax_rows_grad = softmax_rows_grad_nb
    layernorm_fwd = layernorm_fwd_nb
    layernorm_bwd = layernorm_bwd_nb
    gelu_fwd = gelu_fwd_nb
    gelu_bwd = gelu_bwd_nb
    sample_without_replacement = sample_without_replacement_nb
    draw_weight_sums = draw_weight_sums_nb
    signed_rank_null = signed_rank_null_nb
else:
    softmax_rows = softmax_rows_np
    softmax_rows_grad = softmax_rows_grad_np
    layernorm_fwd = layernorm_fwd_np
    layernorm_bwd = layernorm_bwd_np
    gelu_fwd = gelu_fwd_np
    gelu_bwd = gelu_bwd_np
    sample_without_replacement = sample_without_replacement_np
    draw_weight_sums = draw_weight_sums_np
    signed_rank_null = signed_rank_null_np

KERNEL_PAIRS = {
    "softmax_rows": (softmax_rows_np, softmax_rows_nb),
    "softmax_rows_grad": (softmax_rows_grad_np, softmax_rows_grad_nb),
    "layernorm_fwd": (layernorm_fwd_np, layernorm_fwd_nb),
    "layernorm_bwd": (layernorm_bwd_np, layernorm_bwd_nb),
    "gelu_fwd": (gelu_fwd_np, gelu_fwd_nb),
    "gelu_bwd": (gelu_bwd_np, gelu_bwd_nb),
    "sample_without_replacement": (sample_without_replacement_np, sample_without_replacement_nb),
    "draw_weight_sums": (draw_weight_sums_np, draw_weight_sums_nb),
    "signed_rank_null": (signed_rank_null_np, signed_rank_null_nb),
}
