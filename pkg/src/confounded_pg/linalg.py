"""Dense kernel and matrix utilities.

Gaussian kernels, Gram matrices, symmetric PSD square roots and
Moore-Penrose pseudo-inverses. Also provides :func:`factor_gram`, which
returns the eigenpairs of a Gram matrix above the clipping tolerance; for
large sample sizes it avoids forming the full matrix by running a pivoted
Cholesky factorization until the residual trace is below that tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import InputError, NumericError

#: relative eigenvalue clipping level, multiplied by trace / N
EIG_RTOL = 1e-10
#: Gram matrices up to this size are factored densely under ``method="auto"``
DENSE_FACTOR_MAX_N = 400


@dataclass(frozen=True)
class KernelConfig:
    """Gaussian kernel exp(-||x - y||^2 / (2 h^2)) with length scale ``h``."""

    bandwidth: float
    family: str = "gaussian"

    def __post_init__(self):
        if self.family != "gaussian":
            raise InputError(f"unsupported kernel family {self.family!r}")
        if not np.isfinite(self.bandwidth) or self.bandwidth <= 0:
            raise InputError(f"bandwidth must be positive, got {self.bandwidth}")


def _as_points(points) -> np.ndarray:
    try:
        arr = np.asarray(points, dtype=float)
    except ValueError as exc:  # ragged nested lists
        raise InputError("points must have a uniform dimension") from exc
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise InputError("expected a non-empty (n, dim) array of points")
    if not np.all(np.isfinite(arr)):
        raise InputError("points contain non-finite values")
    return arr


def gaussian_kernel(x, y, cfg: KernelConfig) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if x.shape != y.shape:
        raise InputError(f"dimension mismatch: {x.shape} vs {y.shape}")
    d2 = float(np.sum((x - y) ** 2))
    return float(np.exp(-d2 / (2.0 * cfg.bandwidth**2)))


def cross_gram(a, b, cfg: KernelConfig) -> np.ndarray:
    """Kernel matrix K[i, j] = k(a_i, b_j)."""
    a = _as_points(a)
    b = _as_points(b)
    if a.shape[1] != b.shape[1]:
        raise InputError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    d2 = cdist(a, b, "sqeuclidean")
    return np.exp(-d2 / (2.0 * cfg.bandwidth**2))


def gram_matrix(points, cfg: KernelConfig) -> np.ndarray:
    """Symmetric Gram matrix with an exact unit diagonal."""
    p = _as_points(points)
    n = p.shape[0]
    k = np.ones((n, n))
    if n > 1:
        iu = np.triu_indices(n, 1)
        vals = np.exp(-pdist(p, "sqeuclidean") / (2.0 * cfg.bandwidth**2))
        k[iu] = vals
        k[(iu[1], iu[0])] = vals
    return k


def median_bandwidth(points, max_points: int = 1000, seed: int = 0) -> float:
    """Median pairwise distance among distinct points.

    At most ``max_points`` rows (a seeded subsample) enter the computation.
    Zero distances from duplicated rows are ignored so that discrete data
    still gets a positive scale; returns 1.0 when all points coincide.
    """
    p = _as_points(points)
    if p.shape[0] > max_points:
        idx = np.random.default_rng(seed).choice(p.shape[0], max_points, replace=False)
        p = p[np.sort(idx)]
    if p.shape[0] < 2:
        return 1.0
    d = pdist(p)
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


def check_symmetric(m: np.ndarray, what: str = "matrix") -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InputError(f"{what} must be square, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{what} has non-finite entries")
    scale = 1.0 + (np.abs(m).max() if m.size else 0.0)
    if m.size and np.abs(m - m.T).max() > 1e-10 * scale:
        raise InputError(f"{what} is not symmetric")
    return m


def default_eig_tol(m: np.ndarray) -> float:
    n = m.shape[0]
    return EIG_RTOL * max(float(np.trace(m)), 0.0) / max(n, 1)


def sym_psqrt(m, tol: float | None = None) -> np.ndarray:
    """Square root of a symmetric PSD matrix via eigendecomposition.

    Eigenvalues at or below ``tol`` (default ``1e-10 * trace / N``) are set
    to zero before taking the root.
    """
    m = check_symmetric(m)
    if tol is None:
        tol = default_eig_tol(m)
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    w = np.where(w > tol, w, 0.0)
    s = (v * np.sqrt(w)) @ v.T
    return 0.5 * (s + s.T)


def pinv(m, tol: float | None = None, hermitian: bool = False) -> np.ndarray:
    """Moore-Penrose pseudo-inverse.

    Singular values below ``tol * sigma_max`` are treated as zero; the
    default ``tol`` is ``max(shape) * eps``. With ``hermitian=True`` a
    symmetric eigendecomposition replaces the SVD (same result for
    symmetric input, cheaper).
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2:
        raise InputError("pinv expects a 2-d matrix")
    if not np.all(np.isfinite(m)):
        raise NumericError("pinv received non-finite entries")
    if m.size == 0:
        return np.zeros(m.T.shape)
    if tol is None:
        tol = max(m.shape) * np.finfo(float).eps
    if hermitian:
        m = check_symmetric(m)
        w, v = np.linalg.eigh(0.5 * (m + m.T))
        cutoff = tol * np.abs(w).max()
        keep = np.abs(w) > cutoff
        return (v[:, keep] / w[keep]) @ v[:, keep].T
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    cutoff = tol * (s[0] if s.size else 0.0)
    keep = s > cutoff
    return (vt[keep].T / s[keep]) @ u[:, keep].T


@dataclass
class KernelFactor:
    """Eigenpairs ``K ~= vecs @ diag(vals) @ vecs.T`` kept above the clip level."""

    vecs: np.ndarray
    vals: np.ndarray
    points: np.ndarray
    cfg: KernelConfig

    @property
    def rank(self) -> int:
        return self.vals.size

    def matrix(self) -> np.ndarray:
        return (self.vecs * self.vals) @ self.vecs.T


def _pivoted_cholesky(points: np.ndarray, cfg: KernelConfig, trace_tol: float) -> np.ndarray:
    n = points.shape[0]
    diag = np.ones(n)
    lmat = np.zeros((n, min(n, 64)))
    k = 0
    while k < n and diag.sum() > trace_tol:
        i = int(np.argmax(diag))
        if diag[i] <= 0:
            break
        if k == lmat.shape[1]:
            lmat = np.concatenate([lmat, np.zeros((n, min(n, 2 * k) - k))], axis=1)
        col = cross_gram(points, points[i : i + 1], cfg)[:, 0]
        col -= lmat[:, :k] @ lmat[i, :k]
        col /= np.sqrt(diag[i])
        lmat[:, k] = col
        diag -= col**2
        diag[i] = 0.0
        np.maximum(diag, 0.0, out=diag)
        k += 1
    return lmat[:, :k]


def factor_gram(points, cfg: KernelConfig, tol: float | None = None,
                method: str = "auto") -> KernelFactor:
    """Eigenpairs of the Gram matrix of ``points`` with eigenvalues above ``tol``.

    ``tol`` defaults to ``1e-10 * trace / N`` (= 1e-10 for a Gaussian
    kernel). ``method="dense"`` builds the full matrix and calls ``eigh``;
    ``method="pivoted"`` stops a pivoted Cholesky once the residual trace,
    an upper bound on the spectral norm of what is discarded, is below
    ``tol``. ``"auto"`` picks dense for small N.
    """
    p = _as_points(points)
    n = p.shape[0]
    if tol is None:
        tol = EIG_RTOL
    if method == "auto":
        method = "dense" if n <= DENSE_FACTOR_MAX_N else "pivoted"
    if method == "dense":
        w, v = np.linalg.eigh(gram_matrix(p, cfg))
    elif method == "pivoted":
        lmat = _pivoted_cholesky(p, cfg, tol)
        u, s, _ = np.linalg.svd(lmat, full_matrices=False)
        v, w = u, s**2
    else:
        raise InputError(f"unknown factor method {method!r}")
    keep = w > tol
    order = np.argsort(w[keep])[::-1]
    return KernelFactor(vecs=np.ascontiguousarray(v[:, keep][:, order]),
                        vals=w[keep][order], points=p, cfg=cfg)
