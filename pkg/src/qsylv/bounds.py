"""Singular-value decay predictors for quasiseparable Sylvester solutions,
epsilon-quasiseparable rank measurement, and the backward-error residual
metrics used to judge computed solutions.

The decay predictor says: for SPD coefficients with spectra in [a, b] and
off-diagonal input ranks summing to k, every off-diagonal block Y of the
solution obeys sigma_{1 + k*l}(Y) <= 4 rho^{-2l} sigma_1(Y), with rho built
from the Grotzsch ring function of a/b.  The weaker variant
rho = exp(pi^2 / (2 log(4 b/a))) avoids elliptic integrals entirely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import hodlr as hodlr_mod
from .errors import UndefinedResidualError
from .hodlr import HodlrMatrix

__all__ = [
    "DecayBound",
    "SpectralInterval",
    "elliptic_K",
    "grotzsch_mu",
    "zolotarev_rho",
    "offdiag_decay_bound",
    "eps_qs_rank",
    "blockwise_truncate",
    "residual_sylvester",
    "residual_generalized",
]


@dataclass(frozen=True)
class SpectralInterval:
    """A positive interval [a, b] containing the spectra of the coefficients."""

    a: float
    b: float

    def __post_init__(self):
        if not (0 < self.a <= self.b):
            raise ValueError("need 0 < a <= b")


@dataclass(frozen=True)
class DecayBound:
    """Predicted off-diagonal singular value decay sigma_{1+k*l} <= 4 rho^{-2l}."""

    rho: float
    block_rank_k: int

    def predicted(self, ell):
        """Bound on sigma_{1 + k*ell} / sigma_1 of an off-diagonal block."""
        ell = np.asarray(ell, dtype=float)
        if self.rho == math.inf:
            return np.where(ell > 0, 0.0, 4.0)
        return 4.0 * self.rho ** (-2.0 * ell)

    def rank_at(self, eps):
        """Smallest predicted epsilon-rank: k times the l with 4 rho^(-2l) <= eps."""
        if self.rho == math.inf:
            return self.block_rank_k
        ell = math.ceil(math.log(4.0 / eps) / (2.0 * math.log(self.rho)))
        return self.block_rank_k * max(ell, 1)


def elliptic_K(lam):
    """Complete elliptic integral of the first kind, modulus lam in (0, 1).

    Computed by the arithmetic-geometric mean: K = pi / (2 agm(1, lam')),
    lam' = sqrt(1 - lam^2); relative accuracy ~1e-15.
    """
    if not (0.0 < lam < 1.0):
        raise ValueError("modulus must lie strictly between 0 and 1")
    a = 1.0
    b = math.sqrt(1.0 - lam * lam)
    for _ in range(200):
        if abs(a - b) <= 1e-16 * a:
            break
        a, b = (a + b) / 2.0, math.sqrt(a * b)
    return math.pi / (2.0 * a)


def grotzsch_mu(lam):
    """Grotzsch ring function mu(lam) = (pi/2) K(sqrt(1-lam^2)) / K(lam)."""
    if not (0.0 < lam < 1.0):
        raise ValueError("argument must lie strictly between 0 and 1")
    lam2 = math.sqrt(1.0 - lam * lam)
    return (math.pi / 2.0) * elliptic_K(lam2) / elliptic_K(lam)


def zolotarev_rho(interval):
    """Decay bases (rho_elliptic, rho_weak) for spectra in the given interval.

    rho_elliptic = exp(pi^2 / (2 mu(a/b))) with the Grotzsch function
    evaluated at a/b in (0, 1); rho_weak = exp(pi^2 / (2 log(4 b/a))).
    A single-point spectrum (a == b) returns rho_elliptic = inf.
    """
    a, b = interval.a, interval.b
    if a == b:
        return math.inf, math.inf
    rho_weak = math.exp(math.pi ** 2 / (2.0 * math.log(4.0 * b / a)))
    rho_elliptic = math.exp(math.pi ** 2 / (2.0 * grotzsch_mu(a / b)))
    return rho_elliptic, rho_weak


def offdiag_decay_bound(k_a, k_b, k_c, interval, structure="general",
                        term_ranks=(), use_weak=False):
    """Decay bound for the solution's off-diagonal blocks.

    ``structure`` selects the block-rank accounting:
      * ``general``: k = k_a + k_b + k_c (quasiseparable coefficients);
      * ``banded``: k = max(k_a + k_b, k_c) (bandwidths instead of ranks);
      * ``generalized``: k = 2 k_a + k_c + sum(term_ranks) (low-rank terms).
    """
    for val in (k_a, k_b, k_c):
        if val < 0:
            raise ValueError("ranks must be nonnegative")
    if structure == "general":
        k = k_a + k_b + k_c
    elif structure == "banded":
        k = max(k_a + k_b, k_c)
    elif structure == "generalized":
        k = 2 * k_a + k_c + sum(term_ranks)
    else:
        raise ValueError(f"unknown structure kind: {structure!r}")
    rho_e, rho_w = zolotarev_rho(interval)
    return DecayBound(rho=rho_w if use_weak else rho_e, block_rank_k=k)


# ---------------------------------------------------------------------------
# epsilon-quasiseparable rank
# ---------------------------------------------------------------------------

def _split_points(n, block_size):
    """Maximal off-diagonal split blocks (r0, r1, c0, c1) of the HODLR tree."""
    out = []

    def rec(lo, hi):
        size = hi - lo
        if size <= block_size:
            return
        mid = lo + size // 2
        out.append((mid, hi, lo, mid))   # lower block
        out.append((lo, mid, mid, hi))   # upper block
        rec(lo, mid)
        rec(mid, hi)

    rec(0, n)
    return out


def eps_qs_rank(a, eps, block_size=256):
    """Smallest k with sigma_{k+1}(Y) <= eps * sigma_1(Y) for every maximal
    off-diagonal block Y taken at the HODLR split points.

    Checks all split-aligned blocks, lower and upper.  Returns 0 for
    matrices whose off-diagonal blocks all vanish (or when the matrix is a
    single leaf).
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("expected a square matrix")
    worst = 0
    for r0, r1, c0, c1 in _split_points(a.shape[0], block_size):
        block = a[r0:r1, c0:c1]
        s = np.linalg.svd(block, compute_uv=False)
        if s.size == 0 or s[0] == 0.0:
            continue
        k = int(np.sum(s > eps * s[0]))
        worst = max(worst, k)
    return worst


def blockwise_truncate(a, eps, block_size=256):
    """Truncate every split-aligned off-diagonal block of ``a`` at the
    absolute threshold ``eps`` (singular values <= eps dropped).

    Returns the perturbed dense matrix; the perturbation satisfies
    |a - out|_2 <= 2 sqrt(n) eps.
    """
    a = np.asarray(a, dtype=float)
    out = a.copy()

    def rec(lo, hi):
        size = hi - lo
        if size <= block_size:
            return
        mid = lo + size // 2
        for (r0, r1, c0, c1) in ((mid, hi, lo, mid), (lo, mid, mid, hi)):
            u, s, vt = np.linalg.svd(a[r0:r1, c0:c1], full_matrices=False)
            keep = int(np.sum(s > eps))
            out[r0:r1, c0:c1] = (u[:, :keep] * s[:keep]) @ vt[:keep]
        rec(lo, mid)
        rec(mid, hi)

    rec(0, a.shape[0])
    return out


# ---------------------------------------------------------------------------
# residual metrics
# ---------------------------------------------------------------------------

def _as_hodlr(x):
    if isinstance(x, HodlrMatrix):
        return x
    raise TypeError("residual metrics expect HODLR operands")


def residual_sylvester(a, b, c, x, cfg=None):
    """Frobenius-normalized backward error of A X + X B - C.

    Returns |A X + X B - C|_F / (sqrt(n (|A|_F^2 + |B|_F^2)) |X|_F),
    evaluated entirely in hierarchical arithmetic.
    """
    for m in (a, b, c, x):
        _as_hodlr(m)
    cfg = cfg or hodlr_mod.HodlrConfig()
    xnorm = math.sqrt(hodlr_mod._fro2(x))
    if xnorm == 0.0:
        raise UndefinedResidualError("residual undefined for a zero solution")
    r = hodlr_mod.add(hodlr_mod.multiply(a, x, cfg), hodlr_mod.multiply(x, b, cfg), cfg)
    r = hodlr_mod.add(r, hodlr_mod.scale(c, -1.0), cfg)
    num = math.sqrt(hodlr_mod._fro2(r))
    n = a.rows
    den = math.sqrt(n * (hodlr_mod._fro2(a) + hodlr_mod._fro2(b))) * xnorm
    return num / den


def residual_generalized(prob, x, cfg=None):
    """Backward-error residual for A X + X A + sum_j M_j X M_j^T = C.

    The denominator uses |I (x) A + A (x) I|_F >= sqrt(n (2 |A|_F^2))
    minus |M|_F^2 summed over the terms.  When that lower bound is not
    positive the unnormalized residual is returned with ``warning=True``.

    Returns (residual, warning).
    """
    cfg = cfg or hodlr_mod.HodlrConfig()
    a, c = prob.a, prob.c
    xnorm = math.sqrt(hodlr_mod._fro2(x))
    if xnorm == 0.0:
        raise UndefinedResidualError("residual undefined for a zero solution")
    r = hodlr_mod.add(hodlr_mod.multiply(a, x, cfg), hodlr_mod.multiply(x, a, cfg), cfg)
    m_fro2_total = 0.0
    for term in prob.terms:
        r = term.apply_add(r, x, cfg)
        m_fro2_total += term.fro_norm() ** 2
    r = hodlr_mod.add(r, hodlr_mod.scale(c, -1.0), cfg)
    num = math.sqrt(hodlr_mod._fro2(r))
    n = a.rows
    den_bound = math.sqrt(n * 2.0 * hodlr_mod._fro2(a)) - m_fro2_total
    if den_bound <= 0.0:
        return num / xnorm, True
    return num / (den_bound * xnorm), False
