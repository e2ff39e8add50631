"""Compiled inner loop: cyclic coordinate descent on a weighted least-squares model."""

import numpy as np
from numba import njit


@njit(cache=True)
def soft_threshold(z, lam):
    if z > lam:
        return z - lam
    if z < -lam:
        return z + lam
    return 0.0


@njit(cache=True)
def cd_sweeps(indptr, indices, data, groups, n_groups, v, resid, w, dw, db, lam, max_sweeps, tol):
    """Minimize ``0.5 * sum v (resid0 - db[g] - X dw)^2 + lam * |w + dw|_1`` in place.

    ``resid`` holds the current residual ``resid0 - db[g] - X dw`` and is kept
    in sync. Sweeps stop once no coordinate moves the model by more than
    ``tol`` (measured as curvature * step**2). Returns the sweep count.
    """
    P = indptr.shape[0] - 1
    M = resid.shape[0]
    hess = np.zeros(P)
    for c in range(P):
        h = 0.0
        for k in range(indptr[c], indptr[c + 1]):
            h += v[indices[k]] * data[k] * data[k]
        hess[c] = h
    vsum = np.zeros(n_groups)
    for r in range(M):
        vsum[groups[r]] += v[r]
    gsum = np.zeros(n_groups)

    sweeps = 0
    while sweeps < max_sweeps:
        sweeps += 1
        max_delta = 0.0
        for c in range(P):
            h = hess[c]
            if h <= 0.0:
                continue
            s = 0.0
            for k in range(indptr[c], indptr[c + 1]):
                r = indices[k]
                s += v[r] * data[k] * resid[r]
            old = w[c] + dw[c]
            new = soft_threshold(s + h * old, lam) / h
            delta = new - old
            if delta != 0.0:
                dw[c] += delta
                for k in range(indptr[c], indptr[c + 1]):
                    resid[indices[k]] -= data[k] * delta
                d = h * delta * delta
                if d > max_delta:
                    max_delta = d
        gsum[:] = 0.0
        for r in range(M):
            gsum[groups[r]] += v[r] * resid[r]
        for g in range(n_groups):
            if vsum[g] > 0.0:
                gsum[g] = gsum[g] / vsum[g]
                db[g] += gsum[g]
                d = vsum[g] * gsum[g] * gsum[g]
                if d > max_delta:
                    max_delta = d
            else:
                gsum[g] = 0.0
        for r in range(M):
            resid[r] -= gsum[groups[r]]
        if max_delta < tol:
            break
    return sweeps
