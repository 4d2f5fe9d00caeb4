"""Compiled loops over a precomputed squared-distance matrix.

Weights below ``exp(-CUTOFF)`` relative to the largest weight of a column are
skipped; with ``CUTOFF = 40`` the neglected mass is under ``D * 4e-18`` of the
kept mass, i.e. below float64 resolution for any practical ``D``.
"""
import numba
import numpy as np

CUTOFF = 40.0


def kernel_average(sqdist, y, eta, exclude_self):
    """Row-wise normalized Gaussian-kernel average of ``y``.

    ``sqdist`` must be symmetric; row ``j`` is the reference point. With
    ``exclude_self`` the diagonal term is left out (leave-one-out). ``y`` may
    be ``(D,)`` or ``(D, m)``; the columns of a 2-D ``y`` share the weights.
    """
    y = np.asarray(y, dtype=np.float64)
    out = _kernel_average(sqdist, np.ascontiguousarray(y.reshape(y.shape[0], -1)),
                          float(eta), bool(exclude_self))
    return out[:, 0] if y.ndim == 1 else out


@numba.njit(cache=True)
def _kernel_average(sqdist, y, eta, exclude_self):
    n = sqdist.shape[0]
    k = y.shape[1]
    out = np.zeros((n, k))
    acc = np.empty(k)
    inv = 1.0 / eta
    for j in range(n):
        row = sqdist[j]
        m = np.inf
        for d in range(n):
            if exclude_self and d == j:
                continue
            if row[d] < m:
                m = row[d]
        cut = m + CUTOFF * eta
        s = 0.0
        acc[:] = 0.0
        for d in range(n):
            if exclude_self and d == j:
                continue
            v = row[d]
            if v <= cut:
                w = np.exp((m - v) * inv)
                s += w
                for c in range(k):
                    acc[c] += w * y[d, c]
        for c in range(k):
            out[j, c] = acc[c] / s
    return out


@numba.njit(cache=True)
def kernel_moments(sqdist, y, resid2, eta):
    """Smoothed values and the matching weighted averages of ``resid2``.

    Returns ``(sum_k rho_kj y_k, sum_k rho_kj resid2_k)`` for every ``j``,
    self term included.
    """
    n = sqdist.shape[0]
    mean = np.empty(n)
    second = np.empty(n)
    inv = 1.0 / eta
    for j in range(n):
        row = sqdist[j]
        m = np.inf
        for d in range(n):
            if row[d] < m:
                m = row[d]
        cut = m + CUTOFF * eta
        s = 0.0
        sy = 0.0
        sr = 0.0
        for d in range(n):
            v = row[d]
            if v <= cut:
                w = np.exp((m - v) * inv)
                s += w
                sy += w * y[d]
                sr += w * resid2[d]
        mean[j] = sy / s
        second[j] = sr / s
    return mean, second
