"""Dense linear algebra helpers: SVD with a fixed sign convention, pseudoinverse, PCA.

All routines work on float64 numpy arrays and are pure functions of their
inputs. Singular vectors are sign-normalised so that downstream subspaces are
deterministic: the largest-magnitude entry of every left singular vector is
made positive (ties broken by the lowest index) and the matching right
singular vector is flipped with it.
"""

import numpy as np
import scipy.linalg

from .errors import ArgumentError, NumericalError


def make_rng(seed):
    """Seeded generator used everywhere randomness is needed."""
    return np.random.default_rng(seed)


def _as_matrix(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ArgumentError(f"expected a 2-D matrix, got shape {a.shape}")
    if min(a.shape) < 1:
        raise ArgumentError(f"matrix must have at least one row and column, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ArgumentError("matrix contains non-finite entries")
    return a


def _fix_signs(u, vt):
    # argmax of |.| returns the first index on ties
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, vt * signs[:, None]


def svd(a):
    """Thin SVD ``a = u @ diag(s) @ v.T``.

    Returns ``(u, s, v)`` with ``v`` holding right singular vectors as columns
    (not ``v.T`` as numpy does). Raises NumericalError if LAPACK fails to
    converge with both the divide-and-conquer and the QR-iteration drivers.
    """
    a = _as_matrix(a)
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError:
        try:
            u, s, vt = scipy.linalg.svd(a, full_matrices=False, lapack_driver="gesvd")
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise NumericalError(f"SVD did not converge for {a.shape} matrix") from exc
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(s)) and np.all(np.isfinite(vt))):
        raise NumericalError("SVD produced non-finite output")
    u, vt = _fix_signs(u, vt)
    return u, s, vt.T


def top_r_svd(a, r):
    """Best rank-``r`` factors ``(u_r, s_r, v_r)`` of ``a``."""
    a = _as_matrix(a)
    k = min(a.shape)
    if not isinstance(r, (int, np.integer)) or isinstance(r, bool) or not 1 <= r <= k:
        raise ArgumentError(f"rank r={r!r} outside [1, {k}]")
    u, s, v = svd(a)
    return u[:, :r], s[:r], v[:, :r]


def pinv(a, tol=None):
    """Moore-Penrose pseudoinverse.

    Singular values ``<= tol`` are treated as zero; the default tolerance is
    ``max(rows, cols) * eps * sigma_max``.
    """
    a = _as_matrix(a)
    if tol is not None and tol < 0:
        raise ArgumentError("tol must be non-negative")
    u, s, v = svd(a)
    if tol is None:
        tol = max(a.shape) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    keep = s > tol
    inv_s = np.zeros_like(s)
    inv_s[keep] = 1.0 / s[keep]
    return (v * inv_s) @ u.T


def pca_2d(points):
    """Project points onto their first two principal directions.

    ``points`` is an ``(n, dim)`` array (or list of vectors), ``n >= 3``.
    Returns an ``(n, 2)`` array of ``(pc1, pc2)`` coordinates. Each principal
    direction is oriented so its largest-magnitude loading is positive. A
    cloud with fewer than two directions of spread gets zeros in the missing
    component(s).
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ArgumentError("points must form an (n, dim) array of equal-length vectors")
    if x.shape[0] < 3:
        raise ArgumentError(f"pca_2d needs at least 3 points, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise ArgumentError("points contain non-finite entries")
    out = np.zeros((x.shape[0], 2))
    if np.all(x == x[0]):
        return out
    centered = x - x.mean(axis=0)
    # left singular vectors of centered.T are the loadings, already sign-fixed
    loadings, s, _ = svd(centered.T)
    tiny = max(centered.shape) * np.finfo(np.float64).eps * s[0]
    for j in range(min(2, s.size)):
        if s[j] > tiny:
            out[:, j] = centered @ loadings[:, j]
    return out
