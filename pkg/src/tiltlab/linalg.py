"""Small shared numerics: power iteration for top eigenvalues.

Power iteration runs to a residual tolerance of 1e-8 with a 10^3 iteration
cap; if it fails to converge and the matrix is at most 512 x 512 the full
symmetric eigensolve is used as the documented fallback.
"""

from __future__ import annotations

import numpy as np

POWER_TOL = 1e-8
POWER_MAX_ITER = 1000
EIGH_FALLBACK_DIM = 512


def power_iteration(mat: np.ndarray, rng=None, tol=POWER_TOL, max_iter=POWER_MAX_ITER):
    """Return (lambda_max, converged) for a symmetric PSD matrix."""
    n = mat.shape[0]
    rng = np.random.default_rng(0) if rng is None else rng
    v = rng.normal(size=n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = mat @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, True
        v = w / norm
        lam = float(v @ (mat @ v))
        if np.linalg.norm(mat @ v - lam * v) <= tol * max(lam, 1.0):
            return lam, True
    return lam, False


def lambda_max_psd(mat: np.ndarray, rng=None) -> float:
    """Top eigenvalue of a symmetric PSD matrix, power iteration first."""
    lam, ok = power_iteration(mat, rng=rng)
    if ok:
        return lam
    if mat.shape[0] <= EIGH_FALLBACK_DIM:
        return float(np.linalg.eigvalsh(mat)[-1])
    return lam
