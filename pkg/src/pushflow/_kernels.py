"""Pairwise Gaussian-kernel reduction kernels.

The O(Q*N) sums behind every KDE density/score query are the hot path of
the whole package (they run once or twice per particle per flow
iteration).  They are compiled with numba when available; setting
``PUSHFLOW_NO_NUMBA=1`` forces the pure-numpy fallback.  ``PUSHFLOW_THREADS``
caps the numba thread count (0 or unset = automatic).

Sums are evaluated relative to each query's nearest particle (a
max-exponent shift), so queries far from the cloud yield a finite
log-density and a usable score instead of a 0/0 underflow.

Both implementations accumulate over particles in a fixed index order, so
results are reproducible regardless of the degree of query-level
parallelism.
"""

import os

import numpy as np

__all__ = ["gauss_sums", "gauss_sums_numpy", "USE_NUMBA", "HAS_NUMBA"]

_DISABLED = os.environ.get("PUSHFLOW_NO_NUMBA", "").strip() not in ("", "0")

# numpy fallback works on (chunk, N, d) blocks to bound memory
_CHUNK = 512


def gauss_sums_numpy(query, points, weights, eps):
    """Weighted Gaussian-kernel sums of a point cloud at query locations.

    For each query row q, with m2[q] = min_j |q - p_j|^2, returns
        den[q]   = sum_j w_j exp((m2[q] - |q - p_j|^2) / (2 eps))
        num[q]   = sum_j w_j (q - p_j) exp((m2[q] - |q - p_j|^2) / (2 eps))
        shift[q] = -m2[q] / (2 eps)
    so that the KDE density is (2 pi eps)^{-d/2} exp(shift) den, its log is
    shift + log(den) + log-normalizer, and the KDE score is
    -num / (eps den) (the shift cancels in the ratio).  den always retains
    the nearest particle's full kernel weight, so it cannot underflow to
    zero for finite inputs.

    Parameters
    ----------
    query : ndarray, shape (Q, d)
    points : ndarray, shape (N, d)
    weights : ndarray, shape (N,)
    eps : float
        Kernel variance parameter, > 0.

    Returns
    -------
    num : ndarray, shape (Q, d)
    den : ndarray, shape (Q,)
    shift : ndarray, shape (Q,)
    """
    query = np.ascontiguousarray(query, dtype=np.float64)
    points = np.ascontiguousarray(points, dtype=np.float64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    nq, d = query.shape
    num = np.empty((nq, d))
    den = np.empty(nq)
    shift = np.empty(nq)
    inv2e = 1.0 / (2.0 * eps)
    for lo in range(0, nq, _CHUNK):
        hi = min(lo + _CHUNK, nq)
        diff = query[lo:hi, None, :] - points[None, :, :]  # (chunk, N, d)
        d2 = np.einsum("qnd,qnd->qn", diff, diff)
        m2 = d2.min(axis=1)
        ker = np.exp((m2[:, None] - d2) * inv2e) * weights
        den[lo:hi] = ker.sum(axis=1)
        num[lo:hi] = np.einsum("qn,qnd->qd", ker, diff)
        shift[lo:hi] = -m2 * inv2e
    return num, den, shift


try:
    if _DISABLED:
        raise ImportError("numba disabled via PUSHFLOW_NO_NUMBA")
    # workqueue is always available and the kernels do not rely on the
    # threading layer for determinism; avoids noisy TBB version probing
    os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")
    import numba
    from numba import njit, prange

    HAS_NUMBA = True

    _threads = os.environ.get("PUSHFLOW_THREADS", "0").strip()
    if _threads not in ("", "0"):
        numba.set_num_threads(min(int(_threads), numba.config.NUMBA_NUM_THREADS))

    @njit(parallel=True, cache=True)
    def _gauss_sums_numba(query, points, weights, eps):
        nq, d = query.shape
        n = points.shape[0]
        num = np.empty((nq, d))
        den = np.empty(nq)
        shift = np.empty(nq)
        inv2e = 1.0 / (2.0 * eps)
        for q in prange(nq):
            m2q = np.inf
            for j in range(n):
                s = 0.0
                for k in range(d):
                    t = query[q, k] - points[j, k]
                    s += t * t
                if s < m2q:
                    m2q = s
            dsum = 0.0
            nsum = np.zeros(d)
            for j in range(n):
                s = 0.0
                for k in range(d):
                    t = query[q, k] - points[j, k]
                    s += t * t
                e = weights[j] * np.exp((m2q - s) * inv2e)
                dsum += e
                for k in range(d):
                    nsum[k] += (query[q, k] - points[j, k]) * e
            den[q] = dsum
            shift[q] = -m2q * inv2e
            for k in range(d):
                num[q, k] = nsum[k]
        return num, den, shift

    def gauss_sums(query, points, weights, eps):
        query = np.ascontiguousarray(query, dtype=np.float64)
        points = np.ascontiguousarray(points, dtype=np.float64)
        weights = np.ascontiguousarray(weights, dtype=np.float64)
        return _gauss_sums_numba(query, points, weights, float(eps))

    gauss_sums.__doc__ = gauss_sums_numpy.__doc__
    USE_NUMBA = True
except ImportError:
    HAS_NUMBA = False
    USE_NUMBA = False
    gauss_sums = gauss_sums_numpy
