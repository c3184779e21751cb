"""Dense linear algebra used by the SVD generators.

Everything works on float64 numpy arrays. The SVD starts from a cyclic
Jacobi eigendecomposition (compiled with numba) of the smaller Gram matrix,
which stays small because a class rarely has more than a few hundred
samples, and is then polished with one-sided Jacobi rotations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

EPS = np.finfo(np.float64).eps
PROJECTION_FLOOR = 1e-4
JITTER_LEVELS = (1e-12, 1e-11, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


class NumericError(ArithmeticError):
    """A factorization could not be completed."""


@dataclass(frozen=True)
class TruncatedFactors:
    u: np.ndarray  # (P, r)
    s: np.ndarray  # (r,)
    vt: np.ndarray  # (r, n)

    @property
    def rank(self) -> int:
        return self.s.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.vt


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a finite 2-D float64 array or raise ValueError."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains NaN or Inf")
    return a


def jacobi_eigh(a, tol: float = EPS, max_sweeps: int = 100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(w, v)`` with eigenvalues sorted in descending order and the
    matching orthonormal eigenvectors in the columns of ``v``.
    """
    a = np.array(as_matrix(a), copy=True)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError(f"expected a square matrix, got {a.shape}")
    a = np.ascontiguousarray(0.5 * (a + a.T))
    vt = np.eye(n)
    scale = np.linalg.norm(a)
    if n > 1 and scale > 0.0:
        _jacobi_sweeps(a, vt, tol * scale, max_sweeps)
    return _sorted_eig(a.diagonal().copy(), vt.T)


@numba.njit(cache=True)
def _jacobi_sweeps(a, vt, tol, max_sweeps):
    n = a.shape[0]
    m = vt.shape[1]
    prev = np.inf
    for sweep in range(max_sweeps):
        off = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                off += a[i, j] * a[i, j]
        off = np.sqrt(2.0 * off)
        if off <= tol or off >= prev:
            return sweep
        prev = off
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                if abs(apq) <= 0.5 * EPS * np.sqrt(abs(a[p, p] * a[q, q])):
                    a[p, q] = 0.0
                    a[q, p] = 0.0
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                    if theta < 0.0:
                        t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                app = a[p, p]
                aqq = a[q, q]
                # rows are contiguous; columns follow from symmetry
                for k in range(n):
                    rp = a[p, k]
                    rq = a[q, k]
                    a[p, k] = c * rp - s * rq
                    a[q, k] = s * rp + c * rq
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(n):
                    if k != p and k != q:
                        a[k, p] = a[p, k]
                        a[k, q] = a[q, k]
                for k in range(m):
                    vp = vt[p, k]
                    vq = vt[q, k]
                    vt[p, k] = c * vp - s * vq
                    vt[q, k] = s * vp + c * vq
    return max_sweeps


def _sorted_eig(w: np.ndarray, v: np.ndarray):
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


def complete_basis(q: np.ndarray, k: int) -> np.ndarray:
    """Extend orthonormal columns ``q`` (N x j) to ``k`` orthonormal columns.

    New directions come from the coordinate axes, greedily taking the axis
    with the largest component outside the current span.
    """
    n, j = q.shape
    if k > n:
        raise ValueError(f"cannot build {k} orthonormal vectors in R^{n}")
    out = np.zeros((n, k))
    out[:, :j] = q
    for col in range(j, k):
        basis = out[:, :col]
        resid = np.eye(n) - basis @ basis.T
        resid -= basis @ (basis.T @ resid)
        norms = np.linalg.norm(resid, axis=0)
        best = int(np.argmax(norms))
        out[:, col] = resid[:, best] / norms[best]
    return out


def truncated_svd(a, rank: int) -> TruncatedFactors:
    """The ``rank`` leading singular triples of ``a``.

    The Gram matrix of the shorter side is diagonalized first; one-sided
    Jacobi sweeps on ``a @ V`` then restore the relative accuracy that
    squaring loses for small singular values. Components whose singular value
    is below ``max(P, n) * eps`` relative to the largest are treated as zero; their singular vectors are filled in to keep both
    factors orthonormal. The sign of each component is fixed so the
    largest-magnitude entry of its ``u`` column is positive.
    """
    a = as_matrix(a, "a")
    rows, cols = a.shape
    if not isinstance(rank, (int, np.integer)) or not 1 <= rank <= min(rows, cols):
        raise ValueError(f"rank must be in [1, {min(rows, cols)}], got {rank!r}")

    tall = cols <= rows
    b = a if tall else a.T
    _, v = jacobi_eigh(b.T @ b)
    wt = np.ascontiguousarray(v.T @ b.T)  # rows are the columns of b @ v
    vt_acc = np.ascontiguousarray(v.T)
    _one_sided_sweeps(wt, vt_acc, max(b.shape) * EPS, 30)
    norms = np.sqrt(np.einsum("ij,ij->i", wt, wt))
    order = np.argsort(-norms, kind="stable")[:rank]
    sig, wt, basis = norms[order], wt[order], vt_acc[order].T

    cutoff = max(rows, cols) * EPS * sig[0]
    live = int(np.sum(sig > cutoff)) if sig[0] > 0 else 0
    s = np.zeros(rank)
    s[:live] = sig[:live]

    if tall:
        u = complete_basis((wt[:live] / sig[:live, None]).T, rank)
        right = basis.T
    else:
        u = basis.copy()
        right = wt[:live] / sig[:live, None]
    signs = _gauge(u)
    u *= signs

    vt = np.empty((rank, cols))
    # Well-separated components are projected with einsum (not BLAS) so that
    # identical data columns get bit-identical coefficients; tiny ones would
    # amplify rounding that way and keep the Jacobi vectors instead.
    proj = int(np.sum(s[:live] >= PROJECTION_FLOOR * sig[0]))
    vt[:proj] = np.einsum("pr,pm->rm", u[:, :proj], a) / s[:proj, None]
    vt[proj:live] = right[proj:live] * signs[proj:live, None]
    if live < rank:
        if tall:
            vt[live:] = right[live:] * signs[live:, None]
        else:
            vt[live:] = complete_basis(vt[:live].T, rank)[:, live:].T
    return TruncatedFactors(u=u, s=s, vt=vt)


@numba.njit(cache=True)
def _one_sided_sweeps(w, vt, tol, max_sweeps):
    """Hestenes rotations making the rows of ``w`` mutually orthogonal.

    Each rotation of rows ``i, j`` of ``w`` is mirrored on rows of ``vt``.
    """
    n, m = w.shape
    k = vt.shape[1]
    for sweep in range(max_sweeps):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for x in range(m):
                    alpha += w[i, x] * w[i, x]
                    beta += w[j, x] * w[j, x]
                    gamma += w[i, x] * w[j, x]
                if alpha == 0.0 or beta == 0.0 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = 1.0 / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                if zeta < 0.0:
                    t = -t
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for x in range(m):
                    wi = w[i, x]
                    wj = w[j, x]
                    w[i, x] = c * wi - s * wj
                    w[j, x] = s * wi + c * wj
                for x in range(k):
                    vi = vt[i, x]
                    vj = vt[j, x]
                    vt[i, x] = c * vi - s * vj
                    vt[j, x] = s * vi + c * vj
        if not rotated:
            return sweep
    return max_sweeps


def _gauge(u: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(u), axis=0)
    return np.where(u[idx, np.arange(u.shape[1])] < 0, -1.0, 1.0)


def cholesky_psd(c) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T ~= c`` for a PSD matrix.

    A plain factorization is tried first; if a pivot is not positive, a
    diagonal jitter of ``eps * trace(c) / r`` is added with ``eps`` escalating
    from 1e-12 to 1e-6. Exactly-zero rows and columns factor to zero without
    jitter.
    """
    c = as_matrix(c, "covariance")
    r = c.shape[0]
    if c.shape != (r, r):
        raise ValueError(f"covariance must be square, got {c.shape}")
    if np.max(np.abs(c - c.T), initial=0.0) > 1e-10 * np.max(np.abs(c), initial=0.0):
        raise ValueError("covariance is not symmetric")
    c = 0.5 * (c + c.T)
    trace = float(np.trace(c))
    if trace < 0:
        raise NumericError("covariance has negative trace; not positive semidefinite")

    L, bad = _cholesky(c)
    if L is not None:
        return L
    for eps in JITTER_LEVELS:
        L, bad = _cholesky(c + (eps * trace / r) * np.eye(r))
        if L is not None:
            return L
    raise NumericError(
        f"Cholesky failed at leading minor {bad + 1} of {r} even with jitter {JITTER_LEVELS[-1]:g}"
    )


def _cholesky(c: np.ndarray):
    r = c.shape[0]
    L = np.zeros_like(c)
    for j in range(r):
        d = c[j, j] - L[j, :j] @ L[j, :j]
        col = c[j + 1 :, j] - L[j + 1 :, :j] @ L[j, :j]
        if d > 0:
            root = np.sqrt(d)
            L[j, j] = root
            L[j + 1 :, j] = col / root
        elif d == 0 and not np.any(col):
            continue
        else:
            return None, j
    return L, -1


def sample_mvn(mean, cov, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw ``mean + L z`` with ``z`` standard normal and ``L = cholesky_psd(cov)``.

    With ``size`` given, returns ``size`` rows drawn in sequence from ``rng``;
    row ``i`` equals what the ``i``-th single draw would have produced.
    """
    mean = np.asarray(mean, dtype=np.float64)
    return draw_with_factor(mean, cholesky_psd(cov), rng, size)


def draw_with_factor(mean: np.ndarray, factor: np.ndarray, rng: np.random.Generator, size=None):
    r = mean.shape[0]
    if size is None:
        return mean + factor @ rng.standard_normal(r)
    z = rng.standard_normal((size, r))
    return mean + z @ factor.T
