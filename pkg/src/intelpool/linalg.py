"""Symmetric positive-definite factorization helpers."""

import numpy as np
from scipy.linalg import solve_triangular


JITTER_START = 1e-10
JITTER_STOP = 1e-6


class FactorizationError(np.linalg.LinAlgError):
    """Raised when a matrix cannot be Cholesky-factored even after jitter."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


def _condition_estimate(a):
    try:
        eig = np.linalg.eigvalsh(a)
    except np.linalg.LinAlgError:
        return float("nan")
    if eig[0] <= 0:
        return float("inf")
    return float(eig[-1] / eig[0])


def jittered_cholesky(a, start=JITTER_START, stop=JITTER_STOP):
    """Lower Cholesky factor of ``a``, adding diagonal jitter on failure.

    The jitter is relative to the mean diagonal magnitude and escalates by
    factors of ten from ``start`` to ``stop``. Returns ``(L, jitter)`` where
    ``jitter`` is the absolute amount added (0.0 when none was needed).
    """
    a = np.asarray(a, dtype=float)
    if a.shape[0] == 0:
        return np.zeros((0, 0)), 0.0
    if not np.all(np.isfinite(a)):
        raise FactorizationError("matrix has non-finite entries")
    try:
        return np.linalg.cholesky(a), 0.0
    except np.linalg.LinAlgError:
        pass
    scale = float(np.mean(np.abs(np.diag(a)))) or 1.0
    n_steps = int(round(np.log10(stop / start))) + 1
    eye = np.eye(a.shape[0])
    for rel in np.logspace(np.log10(start), np.log10(stop), n_steps):
        jitter = rel * scale
        try:
            return np.linalg.cholesky(a + jitter * eye), jitter
        except np.linalg.LinAlgError:
            continue
    cond = _condition_estimate(a)
    raise FactorizationError(
        f"Cholesky failed after jitter up to {stop:g} (relative); "
        f"condition estimate {cond:.3g}",
        condition=cond,
    )


def cho_solve_lower(chol, b):
    """Solve ``(L L^T) x = b`` given the lower factor ``L``."""
    y = solve_triangular(chol, b, lower=True, check_finite=False)
    return solve_triangular(chol.T, y, lower=False, check_finite=False)


def logdet_from_cholesky(chol):
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


def psd_factor(a, tol=1e-12):
    """Return ``W`` with ``W @ W.T == a`` for a symmetric PSD matrix.

    Diagonal inputs get an exact square-root factor with zero columns
    dropped; general inputs go through an eigendecomposition.
    """
    a = np.asarray(a, dtype=float)
    p = a.shape[0]
    if np.count_nonzero(a - np.diag(np.diag(a))) == 0:
        d = np.diag(a)
        if np.any(d < -tol * max(1.0, float(np.max(np.abs(d), initial=0.0)))):
            raise ValueError("matrix is not positive semi-definite")
        keep = np.flatnonzero(d > 0)
        w = np.zeros((p, keep.size))
        w[keep, np.arange(keep.size)] = np.sqrt(d[keep])
        return w
    sym = 0.5 * (a + a.T)
    vals, vecs = np.linalg.eigh(sym)
    top = max(1.0, float(np.max(np.abs(vals), initial=0.0)))
    if vals[0] < -1e-8 * top:
        raise ValueError("matrix is not positive semi-definite")
    keep = vals > tol * top
    return vecs[:, keep] * np.sqrt(vals[keep])
