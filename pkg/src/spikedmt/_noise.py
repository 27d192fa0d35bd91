"""Counter-based Gaussian noise and the fused tensor contraction kernels.

Noise scheme (stable across platforms, documented in the README):

* element ``(i, j, k)`` of an ``n1 x n3 x n4`` tensor has linear index
  ``L = (i * n3 + j) * n4 + k``;
* pair ``m = L >> 1`` is hashed with the SplitMix64 finaliser,
  ``h = mix64(key + (m + 1) * 0x9E3779B97F4A7C15``;
* even ``L`` takes the high 32 bits of ``h``, odd ``L`` the low 32 bits;
* the 32-bit word ``w`` is mapped to a standard normal by the inverse CDF.
  Its top 16 bits select one of 65536 equal-probability cells, the low 16
  bits interpolate linearly inside the cell.  The two outermost cells use
  the exact inverse CDF at ``(w + 0.5) / 2**32``.

All kernels give the same bits whatever the number of threads: parallel
loops only ever split over output rows, and every reduction runs in a
fixed order.
"""

import math
import os

import numba as nb
import numpy as np

# TBB may be present but too old; avoid the warning and pick OpenMP first.
nb.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_LOW32 = np.uint64(0xFFFFFFFF)
_LOW16 = np.uint64(0xFFFF)
TABLE_BITS = 16
_NCELL = 1 << TABLE_BITS

# Wichura's AS241 (PPND16) coefficients.
_A = np.array([3.3871328727963666080e0, 1.3314166789178437745e2,
               1.9715909503065514427e3, 1.3731693765509461125e4,
               4.5921953931549871457e4, 6.7265770927008700853e4,
               3.3430575583588128105e4, 2.5090809287301226727e3])
_B = np.array([1.0, 4.2313330701600911252e1, 6.8718700749205790830e2,
               5.3941960214247511077e3, 2.1213794301586595867e4,
               3.9307895800092710610e4, 2.8729085735721942674e4,
               5.2264952788528545610e3])
_C = np.array([1.42343711074968357734e0, 4.63033784615654529590e0,
               5.76949722146069140550e0, 3.64784832476320460504e0,
               1.27045825245236838258e0, 2.41780725177450611770e-1,
               2.27238449892691845833e-2, 7.74545014278341407640e-4])
_D = np.array([1.0, 2.05319162663775882187e0, 1.67638483018380384940e0,
               6.89767334985100004550e-1, 1.48103976427480074590e-1,
               1.51986665636164571966e-2, 5.47593808499534494600e-4,
               1.05075007164441684324e-9])
_E = np.array([6.65790464350110377720e0, 5.46378491116411436990e0,
               1.78482653991729133580e0, 2.96560571828504891230e-1,
               2.65321895265761230930e-2, 1.24266094738807843860e-3,
               2.71155556874348757815e-5, 2.01033439929228813265e-7])
_F = np.array([1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1,
               1.48753612908506148525e-2, 7.86869131145613259100e-4,
               1.84631831751005468180e-5, 1.42151175831644588870e-7,
               2.04426310338993978564e-15])


@nb.njit(inline="always")
def _horner(c, r):
    acc = c[7]
    for t in range(6, -1, -1):
        acc = acc * r + c[t]
    return acc


@nb.njit(cache=True)
def normal_ppf(p):
    """Standard normal quantile for p in (0, 1), AS241 double precision."""
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        return q * _horner(_A, r) / _horner(_B, r)
    r = p if q < 0.0 else 1.0 - p
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r -= 1.6
        val = _horner(_C, r) / _horner(_D, r)
    else:
        r -= 5.0
        val = _horner(_E, r) / _horner(_F, r)
    return -val if q < 0.0 else val


@nb.njit(cache=True)
def _build_table(ncell):
    base = np.zeros(ncell)
    slope = np.zeros(ncell)
    for c in range(1, ncell - 1):
        lo = normal_ppf(c / ncell)
        hi = normal_ppf((c + 1) / ncell)
        base[c] = lo
        slope[c] = hi - lo
    return base, slope


_BASE, _SLOPE = _build_table(_NCELL)


@nb.njit(inline="always")
def mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@nb.njit(cache=True)
def fill_normals(key, start, n, out, words, base, slope):
    """Write noise elements ``start .. start+n-1`` into ``out[:n]``.

    ``words`` is a uint64 scratch buffer of length >= n; ``base`` and
    ``slope`` are the inverse-CDF cell tables.
    """
    key = np.uint64(key)
    t = 0
    if start & 1:
        h = mix64(key + np.uint64((start >> 1) + 1) * GOLDEN)
        words[0] = h & _LOW32
        t = 1
    m0 = (start + t) >> 1
    npair = (n - t) >> 1
    for p in range(npair):
        h = mix64(key + np.uint64(m0 + p + 1) * GOLDEN)
        words[t + 2 * p] = h >> np.uint64(32)
        words[t + 2 * p + 1] = h & _LOW32
    t += 2 * npair
    if t < n:
        h = mix64(key + np.uint64(((start + t) >> 1) + 1) * GOLDEN)
        words[t] = h >> np.uint64(32)
    scale = 1.0 / _NCELL
    for s in range(n):
        w = words[s]
        c = w >> np.uint64(TABLE_BITS)
        out[s] = base[c] + (float(w & _LOW16) + 0.5) * scale * slope[c]
    last = np.uint64(_NCELL - 1)
    for s in range(n):
        c = words[s] >> np.uint64(TABLE_BITS)
        if c == 0 or c == last:
            out[s] = normal_ppf((float(words[s]) + 0.5) * 2.3283064365386963e-10)


def normals(key, start, n):
    """Convenience wrapper returning a fresh array of noise elements."""
    out = np.empty(n)
    fill_normals(np.uint64(key), start, n, out, np.empty(n, dtype=np.uint64),
                 _BASE, _SLOPE)
    return out


@nb.njit(parallel=True, cache=True)
def _materialize(key, n1, n3, n4, scale, u, x, y, out, base, slope):
    for i in nb.prange(n1):
        row = np.empty(n4)
        words = np.empty(n4, dtype=np.uint64)
        ui = u[i] / n1
        for j in range(n3):
            fill_normals(key, (i * n3 + j) * n4, n4, row, words, base, slope)
            c = ui * x[j]
            for k in range(n4):
                out[i, j, k] = scale * row[k] + c * y[k]


@nb.njit(cache=True, fastmath={"reassoc", "contract"})
def _slab_dot(row, W, X, j, R, P4, i):
    K = W.shape[0]
    n4 = row.shape[0]
    for b in range(K):
        s = 0.0
        for k in range(n4):
            s += row[k] * W[b, k]
        R[b, i, j] = s
        xj = X[b, j]
        for k in range(n4):
            P4[b, i, k] += xj * row[k]


@nb.njit(parallel=True, cache=True)
def _dense_partials(Y, X, W, R, P4):
    n1, n3, n4 = Y.shape
    for i in nb.prange(n1):
        row = np.empty(n4)
        for j in range(n3):
            for k in range(n4):
                row[k] = Y[i, j, k]
            _slab_dot(row, W, X, j, R, P4, i)


@nb.njit(parallel=True, cache=True)
def _virtual_partials(key, n3, n4, X, W, R, P4, base, slope):
    n1 = R.shape[1]
    for i in nb.prange(n1):
        row = np.empty(n4)
        words = np.empty(n4, dtype=np.uint64)
        for j in range(n3):
            fill_normals(key, (i * n3 + j) * n4, n4, row, words, base, slope)
            _slab_dot(row, W, X, j, R, P4, i)


@nb.njit(cache=True)
def _reduce(U, X, R, P4):
    K, n1, n3 = R.shape
    n4 = P4.shape[2]
    o1 = np.zeros((K, n1))
    o3 = np.zeros((K, n3))
    o4 = np.zeros((K, n4))
    for b in range(K):
        for i in range(n1):
            s = 0.0
            for j in range(n3):
                s += X[b, j] * R[b, i, j]
            o1[b, i] = s
        for i in range(n1):
            ui = U[b, i]
            for j in range(n3):
                o3[b, j] += ui * R[b, i, j]
            for k in range(n4):
                o4[b, k] += ui * P4[b, i, k]
    return o1, o3, o4


def fused_dense(Y, U, X, W):
    """All three mode contractions of a stored tensor for K vector triples.

    Returns (o1, o3, o4) with o1[b] = Y(., X[b], W[b]), o3[b] = Y(U[b], ., W[b])
    and o4[b] = Y(U[b], X[b], .).
    """
    K = U.shape[0]
    n1, n3, n4 = Y.shape
    R = np.empty((K, n1, n3))
    P4 = np.zeros((K, n1, n4))
    _dense_partials(Y, X, W, R, P4)
    return _reduce(U, X, R, P4)


def fused_virtual(key, n1, n3, n4, U, X, W):
    """Same as :func:`fused_dense` for the pure-noise tensor Z of ``key``."""
    K = U.shape[0]
    R = np.empty((K, n1, n3))
    P4 = np.zeros((K, n1, n4))
    _virtual_partials(np.uint64(key), n3, n4, X, W, R, P4, _BASE, _SLOPE)
    return _reduce(U, X, R, P4)


@nb.njit(parallel=True, cache=True)
def mode1_dense(Y, a):
    n1, n3, n4 = Y.shape
    out = np.zeros((n3, n4))
    for j in nb.prange(n3):
        for i in range(n1):
            ai = a[i]
            for k in range(n4):
                out[j, k] += ai * Y[i, j, k]
    return out


@nb.njit(parallel=True, cache=True)
def _mode1_virtual(key, n1, n3, n4, a, base, slope):
    out = np.zeros((n3, n4))
    for j in nb.prange(n3):
        row = np.empty(n4)
        words = np.empty(n4, dtype=np.uint64)
        for i in range(n1):
            fill_normals(key, (i * n3 + j) * n4, n4, row, words, base, slope)
            ai = a[i]
            for k in range(n4):
                out[j, k] += ai * row[k]
    return out


def materialize(key, n1, n3, n4, scale, u, x, y, out):
    """out[i,j,k] = scale * Z_ijk + u_i x_j y_k / n1 (cast to out.dtype)."""
    _materialize(np.uint64(key), n1, n3, n4, scale, u, x, y, out, _BASE, _SLOPE)
    return out


def mode1_virtual(key, n1, n3, n4, a):
    """M[j, k] = sum_i a_i Z_ijk, accumulated in increasing i."""
    return _mode1_virtual(np.uint64(key), n1, n3, n4, a, _BASE, _SLOPE)


def _apply_thread_env():
    n = os.environ.get("SPIKEDMT_THREADS")
    if n:
        nb.set_num_threads(min(int(n), nb.config.NUMBA_NUM_THREADS))


_apply_thread_env()
