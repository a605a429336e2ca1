"""Deterministic generators for the experiment families: the 2-D Laplace
equation with a logarithmic source, the 2-D heat-equation Lyapunov problem,
a partial integro-differential equation, four structure-preservation test
cases, and a seeded random SPD family.

All generators are pure functions of their parameters (and seed); HODLR
trees they produce serialize bit-identically across runs.
"""

from __future__ import annotations

import numpy as np

from . import hodlr
from .hodlr import HodlrConfig, HodlrMatrix
from .solvers import GeneralizedProblem, LowRankTerm, SylvesterProblem

__all__ = [
    "laplace_log",
    "heat_haber",
    "integro_pde",
    "structure_tests",
    "random_spd",
    "GENERATORS",
]


def _laplacian_hodlr(n, cfg):
    fac = float((n - 1) ** 2)
    diags = {0: 2.0 * fac * np.ones(n), 1: -fac * np.ones(n - 1),
             -1: -fac * np.ones(n - 1)}
    return hodlr.from_banded(diags, 1, cfg)


def laplace_log(n, tau=1.0, cfg=None, domain=(0.0, 1.0)):
    """Lyapunov problem from the 2-D Poisson equation with source
    log(tau + |x - y|) on a uniform grid.

    A = (n-1)^2 trid(-1, 2, -1) exactly in HODLR form; C samples the
    source on ``domain`` (default the unit interval; (-1, 1) reproduces
    the published interactive session).
    """
    if n < 3:
        raise ValueError("need at least three grid points")
    if tau <= 0:
        raise ValueError("tau must be positive")
    cfg = cfg or HodlrConfig()
    a = _laplacian_hodlr(n, cfg)
    x = np.linspace(domain[0], domain[1], n)
    c = hodlr.from_function(lambda s, t: np.log(tau + np.abs(s - t)), x, x,
                            cfg, symmetric=True)
    return SylvesterProblem(a, a, c, name=f"laplace-log(n={n},tau={tau:g})")


_HEAT_A = 1.36
_HEAT_E = -0.34


def heat_haber(m, cfg=None):
    """Banded Lyapunov problem from a finite-volume 2-D heat equation.

    A = I_m (x) (a I_6 + e S_6) + e S_m (x) I_6 and
    C = I_m (x) (0.2 J_6 + 0.8 I_6) + 0.1 S_m (x) J_6, with
    S_k = trid(1, 0, 1), J_6 the all-ones matrix, a = 1.36, e = -0.34;
    both are 6m x 6m, with bandwidths 6 and 11 and quasiseparable ranks 6
    and 1 respectively.
    """
    if m < 2:
        raise ValueError("need at least two cells")
    cfg = cfg or HodlrConfig()
    n = 6 * m
    a_diags = {0: _HEAT_A * np.ones(n)}
    within = np.array([1.0 if (i + 1) % 6 else 0.0 for i in range(n - 1)])
    a_diags[1] = _HEAT_E * within
    a_diags[-1] = _HEAT_E * within
    a_diags[6] = _HEAT_E * np.ones(n - 6)
    a_diags[-6] = _HEAT_E * np.ones(n - 6)
    a = hodlr.from_banded(a_diags, 6, cfg)

    c_diags = {}
    for off in range(-11, 12):
        vals = np.zeros(n - abs(off))
        for j in range(vals.size):
            r, s = (j, j + off) if off >= 0 else (j - off, j)
            p, i = divmod(r, 6)
            q, k = divmod(s, 6)
            entry = 0.0
            if p == q:
                entry += 0.2 + (0.8 if i == k else 0.0)
            if abs(p - q) == 1:
                entry += 0.1
            vals[j] = entry
        if np.any(vals):
            c_diags[off] = vals
    c = hodlr.from_banded(c_diags, 11, cfg)
    return SylvesterProblem(a, a, c, name=f"heat(m={m})")


def integro_pde(n, cfg=None):
    """Generalized Lyapunov problem from a partial integro-differential
    equation: the Poisson operator plus a separable integral term.

    A = (n-1)^2 trid(-1, 2, -1), C samples log(1 + |x - y|), and the one
    rank-one term has factors (1/(n-1)) q(x_i) and r(x_j) with the
    endpoint values of the second factor halved (trapezoidal weights);
    q(x) = r(x) = sin(3x).
    """
    if n < 3:
        raise ValueError("need at least three grid points")
    cfg = cfg or HodlrConfig()
    a = _laplacian_hodlr(n, cfg)
    x = np.linspace(0.0, 1.0, n)
    c = hodlr.from_function(lambda s, t: np.log(1.0 + np.abs(s - t)), x, x,
                            cfg, symmetric=True)
    q = np.sin(3.0 * x) / (n - 1)
    r = np.sin(3.0 * x).copy()
    r[0] *= 0.5
    r[-1] *= 0.5
    term = LowRankTerm(q[:, None], r[:, None])
    return GeneralizedProblem(a, c, [term], name=f"integro(n={n})")


def _shifted_laplacian_diags(n, scale, shift):
    """Diagonals of scale * trid(-1, 2, -1) + shift * I."""
    return {0: (2.0 * scale + shift) * np.ones(n),
            1: -scale * np.ones(n - 1), -1: -scale * np.ones(n - 1)}


def _spectrum_mapped_tridiag(n, lo, hi, cfg):
    """Symmetric tridiagonal with spectrum exactly [lo, hi], by shifting and
    scaling the 1-D Laplacian stencil (spectrum 2 - 2 cos(k pi/(n+1)))."""
    lmin = 2.0 - 2.0 * np.cos(np.pi / (n + 1))
    lmax = 2.0 - 2.0 * np.cos(n * np.pi / (n + 1))
    scale = (hi - lo) / (lmax - lmin)
    shift = lo - scale * lmin
    return hodlr.from_banded(_shifted_laplacian_diags(n, scale, shift), 1, cfg)


def structure_tests(case, n, seed=0, cfg=None, rhs="banded"):
    """The four structure-preservation test problems.

    1. A well conditioned SPD tridiagonal (spectrum in [0.2, 4.2]); C is a
       random symmetric tridiagonal (``rhs="banded"``) or a random dense
       symmetric matrix of quasiseparable rank one (``rhs="dense-qs"``).
    2. A = trid(-1, 2, -1) - 1.99 I (indefinite, ill conditioned); C a
       random diagonal.
    3. A X + X B = C with spec(A) = [0.2, 14] and spec(-B) = [0.5, 14]
       (no separation); C as in case 1.
    4. A = trid(-1, 2, -1) (SPD, ill conditioned); C a random diagonal.

    Only the spectra of cases 1 and 3 are prescribed; they are realized by
    shifting and scaling the tridiagonal Laplacian.
    """
    if n < 8:
        raise ValueError("need n >= 8")
    cfg = cfg or HodlrConfig()
    rng = np.random.default_rng(seed)

    def random_rhs():
        if rhs == "banded":
            d = rng.standard_normal(n)
            e = rng.standard_normal(n - 1)
            return hodlr.from_banded({0: d, 1: e, -1: e}, 1, cfg)
        if rhs == "dense-qs":
            u = rng.standard_normal(n)
            z = hodlr.eye_like(_spectrum_mapped_tridiag(n, 1.0, 2.0, cfg), 0.0)
            return hodlr.add_lowrank(z, u[:, None], u[:, None], cfg)
        raise ValueError(f"unknown rhs kind: {rhs!r}")

    if case == 1:
        a = _spectrum_mapped_tridiag(n, 0.2, 4.2, cfg)
        c = random_rhs()
        return SylvesterProblem(a, a, c, name=f"test1(n={n})")
    if case == 2:
        a = hodlr.from_banded(_shifted_laplacian_diags(n, 1.0, -1.99), 1, cfg)
        c = hodlr.from_banded({0: rng.standard_normal(n)}, 0, cfg)
        return SylvesterProblem(a, a, c, name=f"test2(n={n})")
    if case == 3:
        a = _spectrum_mapped_tridiag(n, 0.2, 14.0, cfg)
        bneg = _spectrum_mapped_tridiag(n, 0.5, 14.0, cfg)
        b = hodlr.scale(bneg, -1.0)
        c = random_rhs()
        return SylvesterProblem(a, b, c, name=f"test3(n={n})")
    if case == 4:
        a = hodlr.from_banded(_shifted_laplacian_diags(n, 1.0, 0.0), 1, cfg)
        c = hodlr.from_banded({0: rng.standard_normal(n)}, 0, cfg)
        return SylvesterProblem(a, a, c, name=f"test4(n={n})")
    raise ValueError(f"unknown test case {case}; expected 1..4")


def random_spd(n, seed=0, cfg=None):
    """Seeded diagonally dominant SPD tridiagonal A with a random symmetric
    tridiagonal right-hand side; a well-conditioned smoke-test family."""
    if n < 3:
        raise ValueError("need n >= 3")
    cfg = cfg or HodlrConfig()
    rng = np.random.default_rng(seed)
    sub = rng.uniform(0.0, 1.0, n - 1)
    diag = 2.0 + rng.uniform(0.0, 1.0, n) + np.concatenate([[0], sub]) \
        + np.concatenate([sub, [0]])
    a = hodlr.from_banded({0: diag, 1: -sub, -1: -sub}, 1, cfg)
    d = rng.standard_normal(n)
    e = rng.standard_normal(n - 1)
    c = hodlr.from_banded({0: d, 1: e, -1: e}, 1, cfg)
    return SylvesterProblem(a, a, c, name=f"random-spd(n={n},seed={seed})")


def _from_cli(name, n, tau, seed, cfg):
    if name == "laplace-log":
        return laplace_log(n, tau=tau, cfg=cfg)
    if name == "heat":
        if n % 6:
            raise ValueError("heat problem size must be 6*m; pass --m instead")
        return heat_haber(n // 6, cfg=cfg)
    if name == "integro":
        return integro_pde(n, cfg=cfg)
    if name.startswith("test"):
        return structure_tests(int(name[4:]), n, seed=seed, cfg=cfg)
    if name == "random-spd":
        return random_spd(n, seed=seed, cfg=cfg)
    raise KeyError(name)


GENERATORS = ("laplace-log", "heat", "integro", "test1", "test2", "test3",
              "test4", "random-spd")
