"""Dense linear-algebra substrate.

Every O(m^3) dense kernel used by the hierarchical arithmetic lives behind
the functions in this module: truncated SVD, linear solves, symmetric
eigendecomposition and Gauss-Legendre rules.  Dense matrices are plain
float64 C-contiguous numpy arrays.

All kernels report a flop estimate to a global counter so that solver
complexity can be measured independently of wall time (see
:func:`flop_counter`).
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg

from .errors import SingularMatrixError

__all__ = [
    "SvdResult",
    "truncated_svd",
    "solve_dense",
    "sym_eig",
    "gauss_legendre",
    "flop_counter",
    "flops",
]


# ---------------------------------------------------------------------------
# flop accounting
# ---------------------------------------------------------------------------

class _FlopTally:
    __slots__ = ("count",)

    def __init__(self):
        self.count = 0

    def add(self, n):
        self.count += int(n)


_TALLY = _FlopTally()


def flops():
    """Total dense-kernel flops recorded since interpreter start."""
    return _TALLY.count


def _record(n):
    _TALLY.add(n)


@contextmanager
def flop_counter():
    """Context manager yielding a callable that reports flops spent inside the block.

    >>> with flop_counter() as spent:
    ...     solve_dense(a, b)
    >>> spent()
    """
    start = _TALLY.count
    yield lambda: _TALLY.count - start


def record_matmul(m, k, n):
    """Record the cost of an (m x k) @ (k x n) product done outside this module."""
    _record(2 * m * k * n)


def record_qr(m, n):
    _record(2 * m * n * n)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def _check_finite(a, name="input"):
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")


@dataclass(frozen=True)
class SvdResult:
    """Truncated singular value decomposition ``a ~= u @ diag(s) @ v.T``.

    ``u`` and ``v`` have orthonormal columns, ``s`` is nonincreasing and
    nonnegative.
    """

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    @property
    def rank(self):
        return self.s.size

    def to_dense(self):
        return (self.u * self.s) @ self.v.T


def truncated_svd(a, tol, max_rank=None):
    """SVD of ``a`` truncated at the relative threshold ``tol``.

    Keeps exactly the singular triplets with ``s_i > tol * s_max``, capped
    at ``max_rank``.  The discarded part satisfies
    ``|a - u s v^T|_2 <= tol * |a|_2``.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise ValueError("expected a 2-d array")
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    _check_finite(a)
    m, n = a.shape
    if m == 0 or n == 0 or not a.any():
        k = min(m, n)
        return SvdResult(np.zeros((m, 0)), np.zeros(0), np.zeros((n, 0)))
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    _record(14 * m * n * min(m, n))
    keep = int(np.sum(s > tol * s[0]))
    if max_rank is not None:
        keep = min(keep, int(max_rank))
    return SvdResult(u[:, :keep].copy(), s[:keep].copy(), vt[:keep].T.copy())


def solve_dense(a, b):
    """Solve ``a @ x = b`` by LU with partial pivoting.

    Raises :class:`SingularMatrixError` (carrying the pivot index) when an
    exactly zero pivot appears.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("coefficient matrix must be square")
    _check_finite(a, "coefficient matrix")
    _check_finite(b, "right-hand side")
    n = a.shape[0]
    b2 = b if b.ndim == 2 else b[:, None]
    if b2.shape[0] != n:
        raise ValueError("right-hand side has incompatible leading dimension")
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(a, check_finite=False)
    diag = np.abs(np.diag(lu))
    if np.any(diag == 0.0):
        idx = int(np.argmin(diag))
        raise SingularMatrixError(f"exactly singular pivot at index {idx}", pivot_index=idx)
    x = scipy.linalg.lu_solve((lu, piv), b2, check_finite=False)
    _record(2 * n ** 3 // 3 + 2 * n * n * b2.shape[1])
    return x if b.ndim == 2 else x[:, 0]


def sym_eig(a, tol=1e-12):
    """Eigendecomposition of a symmetric matrix.

    Returns ``(w, q)`` with eigenvalues ``w`` nondecreasing and ``q``
    orthogonal, ``a q = q diag(w)``.  Inputs farther than ``tol * |a|_F``
    from symmetry are rejected.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("expected a square matrix")
    _check_finite(a)
    nrm = np.linalg.norm(a)
    if np.linalg.norm(a - a.T) > tol * max(nrm, 1e-300):
        raise ValueError("matrix is not symmetric within tolerance")
    w, q = np.linalg.eigh(a)
    _record(9 * a.shape[0] ** 3)
    return w, q


def _legendre_and_prev(m, x):
    # P_m(x) and P_{m-1}(x) by the three-term recurrence.
    pprev = np.ones_like(x)   # P_0
    pcur = x.copy()           # P_1
    for j in range(2, m + 1):
        pprev, pcur = pcur, ((2 * j - 1) * x * pcur - (j - 1) * pprev) / j
    return pcur, pprev


def _legendre_newton(m):
    # Roots of P_m by Newton iteration from the classical asymptotic guess,
    # weights w = 2 / ((1 - x^2) P_m'(x)^2).
    k = np.arange(1, m + 1)
    x = np.cos(np.pi * (k - 0.25) / (m + 0.5))
    for _ in range(100):
        pm, pm1 = _legendre_and_prev(m, x)
        dp = m * (x * pm - pm1) / (x * x - 1.0)
        dx = pm / dp
        x -= dx
        if np.max(np.abs(dx)) < 1e-15:
            break
    pm, pm1 = _legendre_and_prev(m, x)
    dp = m * (x * pm - pm1) / (x * x - 1.0)
    w = 2.0 / ((1.0 - x * x) * dp * dp)
    order = np.argsort(x)
    return x[order], w[order]


@lru_cache(maxsize=64)
def _gauss_legendre_cached(m):
    if m == 1:
        return np.zeros(1), np.array([2.0])
    x, w = _legendre_newton(m)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def gauss_legendre(m):
    """Nodes and weights of the m-point Gauss-Legendre rule on [-1, 1].

    Nodes are the roots of the Legendre polynomial P_m, ascending; the rule
    is exact for polynomials of degree <= 2m - 1.  Rules are cached, so
    repeated calls for the common sizes cost nothing.
    """
    if not isinstance(m, (int, np.integer)) or m < 1:
        raise ValueError("the number of nodes must be a positive integer")
    x, w = _gauss_legendre_cached(int(m))
    return x.copy(), w.copy()
