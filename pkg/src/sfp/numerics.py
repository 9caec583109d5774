"""Dense linear algebra on small real matrices.

The singular value decomposition is a one-sided (Hestenes) Jacobi iteration
with a round-robin pair ordering, so a whole round of disjoint column pairs is
rotated in a single vectorized update.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput, NumericalFailure, ZeroMatrix

DEFAULT_RANK_TOL = 1e-10
MAX_SWEEPS = 60
_EPS = np.finfo(np.float64).eps


@dataclass(frozen=True)
class SvdResult:
    """Compact SVD ``M = U @ diag(S) @ V.T`` with ``k = min(M.shape)``."""

    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    @property
    def k(self):
        return self.S.shape[0]

    def reconstruct(self):
        return (self.U * self.S) @ self.V.T


def as_matrix(m, name="matrix"):
    """Return ``m`` as a finite 2-D float64 array or raise InvalidInput."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise InvalidInput(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInput(f"{name} contains non-finite entries")
    return a


def _round_robin(n):
    # Circle method: n_even - 1 rounds of n_even/2 disjoint pairs; index n is a bye.
    n_even = n + (n % 2)
    order = list(range(n_even))
    rounds = []
    for _ in range(n_even - 1):
        pairs = [(order[i], order[n_even - 1 - i]) for i in range(n_even // 2)]
        pairs = [(min(p), max(p)) for p in pairs if max(p) < n]
        if pairs:
            rounds.append((np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])))
        order = [order[0], order[-1]] + order[1:-1]
    return rounds


def _jacobi_columns(a, tol):
    """Orthogonalize the columns of square-or-tall ``a`` in place; return V."""
    n = a.shape[1]
    v = np.eye(n)
    if n == 1:
        return v
    rounds = _round_robin(n)
    for _ in range(MAX_SWEEPS):
        rotated = False
        for i, j in rounds:
            ai, aj = a[:, i], a[:, j]
            alpha = np.einsum("ij,ij->j", ai, ai)
            beta = np.einsum("ij,ij->j", aj, aj)
            gamma = np.einsum("ij,ij->j", ai, aj)
            scale = np.sqrt(alpha * beta)
            active = np.abs(gamma) > tol * scale
            if not np.any(active):
                continue
            rotated = True
            g = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            sign = np.where(zeta >= 0, 1.0, -1.0)
            t = sign / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = np.where(active, 1.0 / np.sqrt(1.0 + t * t), 1.0)
            s = np.where(active, c * t, 0.0)
            a[:, i], a[:, j] = c * ai - s * aj, s * ai + c * aj
            vi, vj = v[:, i], v[:, j]
            v[:, i], v[:, j] = c * vi - s * vj, s * vi + c * vj
        if not rotated:
            return v
    raise NumericalFailure(f"Jacobi SVD did not converge in {MAX_SWEEPS} sweeps")


def complete_orthonormal(q, total):
    """Extend the orthonormal columns of ``q`` (d x r) to ``total`` columns."""
    d, r = q.shape
    if total > d:
        raise InvalidInput(f"cannot build {total} orthonormal columns in R^{d}")
    if r >= total:
        return q[:, :total]
    # Householder QR of [q | I] spans q first, then fills the complement.
    basis, _ = np.linalg.qr(np.hstack([q, np.eye(d)]))
    extra = basis[:, r:total]
    extra = extra - q @ (q.T @ extra)
    extra, _ = np.linalg.qr(extra)
    return np.hstack([q, extra])


def svd(m):
    """Compact singular value decomposition of a finite real matrix.

    Raises InvalidInput on non-finite input and NumericalFailure when the
    Jacobi sweeps do not converge.
    """
    a = as_matrix(m)
    rows, cols = a.shape
    if min(rows, cols) < 1:
        raise InvalidInput("svd needs at least one row and one column")
    if rows < cols:
        t = svd(a.T)
        return SvdResult(U=t.V, S=t.S, V=t.U)

    if rows > cols:
        q, work = np.linalg.qr(a)
    else:
        q, work = None, a.copy()
    v = _jacobi_columns(work, tol=4 * _EPS)

    s = np.linalg.norm(work, axis=0)
    order = np.argsort(-s, kind="stable")
    s, work, v = s[order], work[:, order], v[:, order]

    smax = s[0] if s.size else 0.0
    live = s > max(rows, cols) * _EPS * smax if smax > 0 else np.zeros_like(s, dtype=bool)
    u = np.zeros_like(work)
    u[:, live] = work[:, live] / s[live]
    n_live = int(live.sum())
    if n_live < cols:
        u = complete_orthonormal(u[:, :n_live], cols)
    if q is not None:
        u = q @ u
    return SvdResult(U=u, S=s, V=v)


def orthonormal_row_basis(m, tol=DEFAULT_RANK_TOL):
    """Orthonormal basis (d x r) of the row space of ``m``.

    ``r`` counts singular values above ``tol * sigma_max``.
    """
    if tol <= 0:
        raise InvalidInput("tol must be positive")
    a = as_matrix(m)
    if not np.any(a):
        raise ZeroMatrix("row space of an all-zero matrix is empty")
    d = svd(a)
    rank = int(np.sum(d.S > tol * d.S[0]))
    return d.V[:, :rank]


def energy_rank(s, tau):
    """Smallest k whose leading singular values carry a ``tau`` energy share."""
    if not 0.0 < tau <= 1.0:
        raise InvalidInput(f"tau must lie in (0, 1], got {tau}")
    s = np.asarray(s, dtype=np.float64)
    energy = np.cumsum(s * s)
    if energy.size == 0 or energy[-1] <= 0:
        raise InvalidInput("singular values are all zero")
    share = energy / energy[-1]
    # Guard the tau == 1 case against cumulative rounding just below 1.
    k = int(np.searchsorted(share, tau - 1e-12, side="left")) + 1
    return min(k, s.size)


def low_rank_approx(d, k):
    """Best rank-``k`` approximation from a computed SVD."""
    if not 1 <= k <= d.k:
        raise InvalidInput(f"rank {k} outside [1, {d.k}]")
    return (d.U[:, :k] * d.S[:k]) @ d.V[:, :k].T
