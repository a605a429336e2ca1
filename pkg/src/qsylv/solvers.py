"""Equation solvers: dense reference, matrix sign iteration, exponential
integral quadrature, matrix-form conjugate gradients, and the generalized
Lyapunov solvers (Sherman-Morrison-Woodbury and Neumann series).

All large-scale solvers work on HODLR operands and report the
Frobenius-normalized backward error, the quasiseparable rank of the
solution, wall time, a peak-memory estimate, and the dense-kernel flop
count of the run.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import bounds, dense, hodlr, ratexp
from .errors import ConvergenceError, DivergenceError, SingularPencilError
from .hodlr import HodlrConfig, HodlrMatrix, LowRankFactor

__all__ = [
    "SylvesterProblem",
    "GeneralizedProblem",
    "LowRankTerm",
    "QsTerm",
    "SolverReport",
    "dense_sylvester_oracle",
    "sign_solve",
    "integral_solve",
    "cg_matrix_solve",
    "ek_lowrank_lyap",
    "smw_generalized_solve",
    "neumann_generalized_solve",
]


# ---------------------------------------------------------------------------
# problem containers
# ---------------------------------------------------------------------------

@dataclass
class SylvesterProblem:
    """A X + X B = C with HODLR coefficients; B may be the same object as A
    (Lyapunov), which the solvers exploit."""

    a: HodlrMatrix
    b: HodlrMatrix
    c: HodlrMatrix
    name: str = ""

    @property
    def n(self):
        return self.a.rows

    @property
    def is_lyapunov(self):
        return self.b is self.a


class LowRankTerm:
    """A term M X M^T with M = u @ v.T of small rank."""

    def __init__(self, u, v):
        self.u = np.atleast_2d(np.asarray(u, dtype=float))
        self.v = np.atleast_2d(np.asarray(v, dtype=float))
        if self.u.shape[0] == 1:
            self.u = self.u.T
        if self.v.shape[0] == 1:
            self.v = self.v.T
        if self.u.shape != self.v.shape:
            raise ValueError("term factors must have matching shapes")

    @property
    def rank(self):
        return self.u.shape[1]

    def apply_add(self, r, x, cfg):
        """r + M x M^T as a low-rank update."""
        small = self.v.T @ hodlr.matvec(x, self.v)
        return hodlr.add_lowrank(r, self.u @ small, self.u, cfg)

    def fro_norm(self):
        return math.sqrt(abs(float(np.sum((self.u.T @ self.u) * (self.v.T @ self.v)))))


class QsTerm:
    """A term M X M^T with quasiseparable (HODLR) M; Neumann solver only."""

    def __init__(self, m):
        if not isinstance(m, HodlrMatrix):
            raise TypeError("QsTerm wraps a HodlrMatrix")
        self.m = m

    def apply_add(self, r, x, cfg):
        prod = hodlr.multiply(hodlr.multiply(self.m, x, cfg),
                              hodlr.transpose(self.m), cfg)
        return hodlr.add(r, prod, cfg)

    def fro_norm(self):
        return math.sqrt(hodlr._fro2(self.m))


@dataclass
class GeneralizedProblem:
    """A X + X A + sum_j M_j X M_j^T = C with SPD A."""

    a: HodlrMatrix
    c: HodlrMatrix
    terms: list = field(default_factory=list)
    name: str = ""

    @property
    def n(self):
        return self.a.rows


@dataclass
class SolverReport:
    """What a solver did: method tag, iterations (or quadrature points),
    backward-error residual, quasiseparable rank of the solution, wall
    time, peak-memory estimate and dense-kernel flops."""

    method: str
    iterations: int
    residual: float
    solution_qs_rank: int
    elapsed: float
    memory_bytes: int
    flops: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.residual < 0:
            raise ValueError("counts and residuals must be nonnegative")


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _require_spd(h, label):
    if ratexp._rayleigh_probe(h) <= 0:
        raise ValueError(f"{label} fails the positive-definiteness probe")


def _lambda_min_est(h, cfg):
    """Smallest-eigenvalue estimate of an SPD HODLR matrix via its inverse."""
    hinv = hodlr.invert(h, cfg)
    top = hodlr.two_norm_est(hinv)
    return 1.0 / top if top > 0 else 0.0


def _block_sign_norms(a, b, c, ainv, binv, seed=7):
    """2-norm estimates of S = [[A, C], [0, -B]] and of its inverse, by power
    iteration with matvec access only."""
    na, nb = a.rows, b.rows

    def s_apply(v):
        v1, v2 = v[:na], v[na:]
        return np.concatenate([hodlr.matvec(a, v1) + hodlr.matvec(c, v2),
                               -hodlr.matvec(b, v2)])

    def st_apply(v):
        v1, v2 = v[:na], v[na:]
        return np.concatenate([hodlr._matmat_t(a, v1),
                               hodlr._matmat_t(c, v1) - hodlr._matmat_t(b, v2)])

    def si_apply(v):
        v1, v2 = v[:na], v[na:]
        w2 = hodlr.matvec(binv, v2)
        return np.concatenate([hodlr.matvec(ainv, v1) + hodlr.matvec(ainv, hodlr.matvec(c, w2)),
                               -w2])

    def sit_apply(v):
        v1, v2 = v[:na], v[na:]
        w1 = hodlr._matmat_t(ainv, v1)
        return np.concatenate([w1, hodlr._matmat_t(binv, hodlr._matmat_t(c, w1)) - hodlr._matmat_t(binv, v2)])

    def power(apply_fn, apply_t_fn):
        rng = np.random.default_rng(seed)
        v = rng.standard_normal(na + nb)
        v /= np.linalg.norm(v)
        est = last = 0.0
        for _ in range(60):
            w = apply_t_fn(apply_fn(v))
            nrm = np.linalg.norm(w)
            if nrm == 0:
                return 0.0
            v = w / nrm
            est = math.sqrt(nrm)
            if abs(est - last) <= 1e-3 * est:
                break
            last = est
        return est

    return power(s_apply, st_apply), power(si_apply, sit_apply)


def _report(method, iterations, residual, x, t0, flops0, mem_peak):
    return SolverReport(method=method, iterations=iterations, residual=residual,
                        solution_qs_rank=hodlr.hodlr_rank(x),
                        elapsed=time.perf_counter() - t0,
                        memory_bytes=int(mem_peak),
                        flops=dense.flops() - flops0)


def _safe_residual(a, b, c, x, cfg):
    try:
        return bounds.residual_sylvester(a, b, c, x, cfg)
    except Exception:
        return math.inf


# ---------------------------------------------------------------------------
# dense reference solver
# ---------------------------------------------------------------------------

def dense_sylvester_oracle(a, b, c):
    """Solve A X + X B = C densely via the symmetric eigendecompositions:
    X = Q_A ((Q_A^T C Q_B) / (lambda_i + mu_j)) Q_B^T.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    wa, qa = dense.sym_eig(a)
    wb, qb = dense.sym_eig(b)
    denom = wa[:, None] + wb[None, :]
    scale = max(np.max(np.abs(wa)), 1e-300) + max(np.max(np.abs(wb)), 1e-300)
    if np.min(np.abs(denom)) <= 1e-14 * scale:
        raise SingularPencilError(
            "an eigenvalue sum lambda_i + mu_j vanishes within tolerance")
    y = (qa.T @ c @ qb) / denom
    dense.record_matmul(a.shape[0], a.shape[0], c.shape[1])
    dense.record_matmul(a.shape[0], c.shape[1], c.shape[1])
    return qa @ y @ qb.T


# ---------------------------------------------------------------------------
# matrix sign iteration
# ---------------------------------------------------------------------------

def sign_solve(prob, cfg=None, eps=None, max_iter=100, compute_residual=True):
    """Sign-function iteration on the block matrix [[A, C], [0, -B]].

    The block Newton step inverts A_i and B_i and updates
    C_{i+1} = (A_i^{-1} C_i B_i^{-1} + C_i) / 2; it stops when the summed
    Frobenius increments drop below sqrt(eps), and the optimal scaling
    alpha = sqrt(|S^-1|_2 / |S|_2) is applied at the first iteration only.
    C_i converges to 2X.
    """
    cfg = cfg or HodlrConfig()
    eps = cfg.threshold if eps is None else eps
    t0 = time.perf_counter()
    flops0 = dense.flops()
    a, b, c = prob.a, prob.b, prob.c
    lyap = prob.is_lyapunov
    _require_spd(a, "A")
    if not lyap:
        _require_spd(b, "B")

    ainv = hodlr.invert(a, cfg)
    binv = ainv if lyap else hodlr.invert(b, cfg)
    s_nrm, si_nrm = _block_sign_norms(a, b, c, ainv, binv)
    alpha = math.sqrt(si_nrm / s_nrm) if s_nrm > 0 and si_nrm > 0 else 1.0

    # first Newton step, on alpha-scaled iterates
    cur_a = hodlr.add(hodlr.scale(a, alpha / 2), hodlr.scale(ainv, 1 / (2 * alpha)), cfg)
    cur_b = cur_a if lyap else hodlr.add(hodlr.scale(b, alpha / 2),
                                         hodlr.scale(binv, 1 / (2 * alpha)), cfg)
    mid = hodlr.multiply(hodlr.multiply(ainv, c, cfg), binv, cfg)
    cur_c = hodlr.add(hodlr.scale(mid, 1 / (2 * alpha)), hodlr.scale(c, alpha / 2), cfg)

    def increment(new, old, old_scale=1.0):
        diff = hodlr.add(new, hodlr.scale(old, -old_scale), cfg)
        return math.sqrt(hodlr._fro2(diff))

    inc = (increment(cur_a, a, alpha) + (0.0 if lyap else increment(cur_b, b, alpha))
           + increment(cur_c, c, alpha))
    mem = hodlr.nbytes(cur_a) + hodlr.nbytes(cur_b) + hodlr.nbytes(cur_c)
    iterations = 1
    tol = math.sqrt(eps)
    while inc > tol:
        if iterations >= max_iter:
            raise ConvergenceError(
                f"sign iteration did not converge in {max_iter} steps",
                last_increment=inc)
        ainv = hodlr.invert(cur_a, cfg)
        binv = ainv if lyap else hodlr.invert(cur_b, cfg)
        new_a = hodlr.scale(hodlr.add(cur_a, ainv, cfg), 0.5)
        new_b = new_a if lyap else hodlr.scale(hodlr.add(cur_b, binv, cfg), 0.5)
        mid = hodlr.multiply(hodlr.multiply(ainv, cur_c, cfg), binv, cfg)
        new_c = hodlr.scale(hodlr.add(mid, cur_c, cfg), 0.5)
        inc = (increment(new_a, cur_a) + (0.0 if lyap else increment(new_b, cur_b))
               + increment(new_c, cur_c))
        cur_a, cur_b, cur_c = new_a, new_b, new_c
        iterations += 1
        mem = max(mem, hodlr.nbytes(cur_a) + hodlr.nbytes(cur_b) + hodlr.nbytes(cur_c)
                  + hodlr.nbytes(ainv) + hodlr.nbytes(binv))

    x = hodlr.scale(cur_c, 0.5)
    residual = _safe_residual(a, b, c, x, cfg) if compute_residual else 0.0
    return x, _report("sign", iterations, residual, x, t0, flops0, mem)


# ---------------------------------------------------------------------------
# exponential-integral quadrature
# ---------------------------------------------------------------------------

# skip quadrature terms whose exponential factors are provably below
# e^-80 ~ 1.8e-35 in norm; evaluating the rational approximation there
# would only inject its far-field values, amplified by the huge endpoint
# weights of the substitution
_SKIP_EXPONENT = 80.0


def _expm_neg(f, h, norm_h, table, cfg, crossover):
    if ratexp.choose_strategy(f, norm_h, crossover) == "pade":
        return ratexp.expm_pade(hodlr.scale(h, -f), cfg)
    return ratexp.expm_chebyshev(f, h, table, cfg)


def integral_solve(prob, cfg=None, m=32, L=100.0, parallel=False, table=None,
                   crossover=64.0, compute_residual=True):
    """Quadrature of X = integral of e^(-At) C e^(-Bt) dt.

    The half line is mapped by t = L cot(theta/2)^2 onto (0, pi) and the
    m-point Gauss-Legendre rule is applied; the exponentials use the Pade
    or the partial-fraction strategy depending on f * |A|_2 against the
    crossover.  ``L`` may be the string ``"auto"`` to pick
    10 / (lambda_min(A) + lambda_min(B)), which centers the rule's sweet
    spot on the slowest-decaying mode.  Terms whose true magnitude is
    provably negligible (f * lambda_min too large) are skipped.

    Sequential accumulation is in ascending node order; ``parallel=True``
    evaluates terms concurrently and reduces them in a fixed pairwise
    order, reproducible up to roundoff.
    """
    cfg = cfg or HodlrConfig()
    if m < 1:
        raise ValueError("the quadrature rule needs at least one node")
    t0 = time.perf_counter()
    flops0 = dense.flops()
    a, b, c = prob.a, prob.b, prob.c
    lyap = prob.is_lyapunov
    _require_spd(a, "A")
    if not lyap:
        _require_spd(b, "B")
    table = table or ratexp.ChebyshevExpTable.builtin()

    norm_a = hodlr.two_norm_est(a)
    norm_b = norm_a if lyap else hodlr.two_norm_est(b)
    lam_a = _lambda_min_est(a, cfg)
    lam_b = lam_a if lyap else _lambda_min_est(b, cfg)
    if L is None or (isinstance(L, str) and L == "auto"):
        L = 10.0 / max(lam_a + lam_b, 1e-300)
    L = float(L)
    if L <= 0:
        raise ValueError("substitution parameter must be positive")

    xg, wg = dense.gauss_legendre(m)
    theta = math.pi * (xg + 1.0) / 2.0
    wt = wg * math.pi / 2.0

    def term(j):
        f = L / math.tan(theta[j] / 2.0) ** 2
        om = 2.0 * L * wt[j] * math.sin(theta[j]) / (1.0 - math.cos(theta[j])) ** 2
        if f * (lam_a + lam_b) > _SKIP_EXPONENT:
            return None
        ea = _expm_neg(f, a, norm_a, table, cfg, crossover)
        eb = ea if lyap else _expm_neg(f, b, norm_b, table, cfg, crossover)
        return hodlr.scale(hodlr.multiply(hodlr.multiply(ea, c, cfg), eb, cfg), om)

    mem = 0
    if parallel:
        with ThreadPoolExecutor() as pool:
            results = list(pool.map(term, range(m)))
        kept = [r for r in results if r is not None]
        mem = sum(hodlr.nbytes(r) for r in kept)
        while len(kept) > 1:
            nxt = [hodlr.add(kept[i], kept[i + 1], cfg)
                   for i in range(0, len(kept) - 1, 2)]
            if len(kept) % 2:
                nxt.append(kept[-1])
            kept = nxt
        x = kept[0] if kept else hodlr.scale(c, 0.0)
    else:
        x = None
        for j in range(m):
            tj = term(j)
            if tj is None:
                continue
            x = tj if x is None else hodlr.add(x, tj, cfg)
            mem = max(mem, hodlr.nbytes(x) + hodlr.nbytes(tj))
        if x is None:
            x = hodlr.scale(c, 0.0)

    residual = _safe_residual(a, b, c, x, cfg) if compute_residual else 0.0
    return x, _report("expint", m, residual, x, t0, flops0, mem)


# ---------------------------------------------------------------------------
# matrix-form conjugate gradients
# ---------------------------------------------------------------------------

def _truncate_iterate(x, mode):
    if mode is None or mode == "none":
        return x
    kind = mode[0] if isinstance(mode, tuple) else mode
    if kind == "band":
        k = int(mode[1])
        n = x.shape[0]
        idx = np.arange(n)
        mask = np.abs(idx[:, None] - idx[None, :]) <= k
        return np.where(mask, x, 0.0)
    if kind == "hodlr":
        cfg = mode[1]
        return hodlr.from_dense(x, cfg).to_dense()
    raise ValueError(f"unknown truncation mode: {mode!r}")


def cg_matrix_solve(prob, tol=1e-10, max_iter=None, truncation="none", cfg=None):
    """Conjugate gradients on the operator X -> A X + X B under the trace
    inner product; valid for SPD A, B.

    Iterates are stored densely (the reference implementation of this
    baseline); ``truncation`` optionally compresses them after each update:
    ``"none"``, ``("band", k)``, or ``("hodlr", cfg)``.  With banded data the
    iterate bandwidth grows linearly with the step count, so banded
    truncation mirrors the sparse matrix-form variant of the method.
    """
    cfg = cfg or HodlrConfig()
    t0 = time.perf_counter()
    flops0 = dense.flops()
    a = prob.a.to_dense()
    b = a if prob.is_lyapunov else prob.b.to_dense()
    c = prob.c.to_dense()
    _require_spd(prob.a, "A")
    if not prob.is_lyapunov:
        _require_spd(prob.b, "B")
    if max_iter is None:
        wa = np.linalg.eigvalsh(a)
        wb = wa if prob.is_lyapunov else np.linalg.eigvalsh(b)
        kappa = (wa[-1] + wb[-1]) / max(wa[0] + wb[0], 1e-300)
        max_iter = max(10, int(10 * math.sqrt(max(kappa, 1.0))))

    def op(x):
        dense.record_matmul(*a.shape, x.shape[1])
        dense.record_matmul(*x.shape, b.shape[1])
        return a @ x + x @ b

    x = np.zeros_like(c)
    r = c.copy()
    p = r.copy()
    rs = float(np.sum(r * r))
    cnorm = math.sqrt(float(np.sum(c * c)))
    history = []
    iterations = 0
    while math.sqrt(rs) > tol * cnorm:
        if iterations >= max_iter:
            raise ConvergenceError(
                f"matrix CG did not converge in {max_iter} steps",
                last_increment=math.sqrt(rs) / cnorm, history=history)
        q = op(p)
        alpha = rs / float(np.sum(p * q))
        x = _truncate_iterate(x + alpha * p, truncation)
        r = _truncate_iterate(r - alpha * q, truncation)
        rs_new = float(np.sum(r * r))
        beta = rs_new / rs
        p = _truncate_iterate(r + beta * p, truncation)
        rs = rs_new
        iterations += 1
        history.append(math.sqrt(rs) / cnorm)

    xh = hodlr.from_dense(x, cfg)
    residual = _safe_residual(prob.a, prob.b, prob.c, xh, cfg)
    mem = x.nbytes * 4
    return xh, _report("cg", iterations, residual, xh, t0, flops0, mem)


# ---------------------------------------------------------------------------
# extended Krylov low-rank Lyapunov solver
# ---------------------------------------------------------------------------

def _unit_columns(x, drop=1e-300):
    nrm = np.linalg.norm(x, axis=0)
    keep = nrm > drop
    return x[:, keep] / nrm[keep]


def _orth_against(v_new, basis, drop=1e-10):
    """Orthonormal basis of the part of v_new outside span(basis).

    Columns are normalized before each projection pass so mixed scales do
    not poison the QR; directions whose new content falls below ``drop``
    (relative) are discarded as numerically dependent.
    """
    v_new = _unit_columns(np.atleast_2d(v_new))
    for _ in range(2):
        if v_new.shape[1] == 0:
            return v_new
        if basis is not None:
            v_new = v_new - basis @ (basis.T @ v_new)
        nrm = np.linalg.norm(v_new, axis=0)
        keep = nrm > drop
        v_new = v_new[:, keep] / nrm[keep]
    if v_new.shape[1] == 0:
        return v_new
    q, r = np.linalg.qr(v_new)
    q = q[:, np.abs(np.diag(r)) > drop]
    if basis is not None and q.shape[1]:
        q = q - basis @ (basis.T @ q)
        q, _ = np.linalg.qr(q)
    return q


class _EkBasis:
    """Extended Krylov basis for an SPD HODLR matrix and a block of start
    vectors: span{U, A^-1 U, A U, A^-2 U, ...}, grown on demand.

    Raw power blocks are kept column-normalized; each expansion adds at
    most 2p orthonormal directions for a p-column start block.
    """

    def __init__(self, a, u, cfg):
        self.a = a
        self.cfg = cfg
        self.ainv = hodlr.invert(a, cfg)
        u = np.atleast_2d(np.asarray(u, dtype=float))
        if u.shape[0] == 1:
            u = u.T
        self.u = u
        self.pos = _unit_columns(u)
        self.neg = _unit_columns(hodlr.matvec(self.ainv, self.pos))
        self.v = _orth_against(np.hstack([self.pos, self.neg]), None)

    def expand(self):
        self.pos = _unit_columns(hodlr.matvec(self.a, self.pos))
        self.neg = _unit_columns(hodlr.matvec(self.ainv, self.neg))
        new = _orth_against(np.hstack([self.pos, self.neg]), self.v)
        if new.shape[1] == 0:
            return False
        self.v = np.hstack([self.v, new])
        return True

    @property
    def dim(self):
        return self.v.shape[1]

    def projected(self):
        w = hodlr.matvec(self.a, self.v)
        am = self.v.T @ w
        am = (am + am.T) / 2.0
        dense.record_matmul(self.v.shape[1], self.v.shape[0], self.v.shape[1])
        return am, w

    def residual_fro(self, y, w, rhs_u, rhs_v):
        """|A V Y V^T + V Y V^T A - rhs_u rhs_v^T|_F from projected Grams.

        Valid for nonsymmetric projected solutions: the residual is
        T M T^T with T = [W V U R] and M holding Y twice, and its norm is
        trace(M^T G M G) with the Gram matrix G = T^T T.
        """
        t = np.hstack([w, self.v, rhs_u, rhs_v])
        g = t.T @ t
        kw = w.shape[1]
        kv = self.v.shape[1]
        ku = rhs_u.shape[1]
        msize = kw + kv + ku + rhs_v.shape[1]
        mmat = np.zeros((msize, msize))
        mmat[:kw, kw:kw + kv] = y
        mmat[kw:kw + kv, :kw] = y
        mmat[kw + kv:kw + kv + ku, kw + kv + ku:] = -np.eye(ku)
        val = float(np.trace(mmat.T @ g @ mmat @ g))
        return math.sqrt(max(val, 0.0))


def ek_lowrank_lyap(a, u, tol=1e-10, cfg=None, max_dim=None):
    """Low-rank solution of A Z + Z A = u u^T by extended Krylov projection.

    ``u`` may be a vector or a thin block (then the right-hand side is
    U U^T).  The projected equation is solved by the dense reference
    solver and the basis grows until the true residual (computed from
    projected quantities) satisfies |A Z + Z A - U U^T|_F <= tol |U U^T|_F.
    """
    cfg = cfg or HodlrConfig()
    basis = _EkBasis(a, u, cfg)
    ub = basis.u
    rhs_fro = math.sqrt(float(np.sum((ub.T @ ub) ** 2)))
    max_dim = max_dim or max(a.rows // 2, 2)
    while True:
        am, w = basis.projected()
        cu = basis.v.T @ ub
        y = dense_sylvester_oracle(am, am, cu @ cu.T)
        res = basis.residual_fro(y, w, ub, ub)
        if res <= tol * rhs_fro:
            break
        if basis.dim >= max_dim or not basis.expand():
            raise ConvergenceError(
                f"extended Krylov space reached dimension {basis.dim} "
                f"without converging", last_increment=res / rhs_fro)
    wy, qy = np.linalg.eigh(y)
    keep = np.abs(wy) > tol * max(np.max(np.abs(wy)), 1e-300)
    zu = basis.v @ (qy[:, keep] * wy[keep])
    zv = basis.v @ qy[:, keep]
    return LowRankFactor(zu, zv)


# ---------------------------------------------------------------------------
# generalized solvers
# ---------------------------------------------------------------------------

def _standard_lyap_solve(a, c, cfg, inner, **kwargs):
    prob = SylvesterProblem(a, a, c)
    if inner == "sign":
        return sign_solve(prob, cfg, compute_residual=False, **kwargs)
    if inner == "expint":
        return integral_solve(prob, cfg, L="auto", compute_residual=False, **kwargs)
    raise ValueError(f"unknown inner solver: {inner!r}")


def smw_generalized_solve(prob, cfg=None, inner="sign", ek_tol=1e-12,
                          inner_kwargs=None):
    """Generalized Lyapunov solve with low-rank terms, via the
    Sherman-Morrison-Woodbury identity on the Kronecker form.

    One quasiseparable Lyapunov solve produces the uncorrected solution
    (the dominating cost); each term then contributes r_h^2 rank-one
    Lyapunov solves, done with a single extended Krylov basis per term
    block, and an r x r capacitance system assembles the correction.
    """
    cfg = cfg or HodlrConfig()
    t0 = time.perf_counter()
    flops0 = dense.flops()
    if not all(isinstance(t, LowRankTerm) for t in prob.terms):
        raise TypeError("the SMW solver needs low-rank terms only")
    _require_spd(prob.a, "A")
    inner_kwargs = inner_kwargs or {}

    xhat, rep0 = _standard_lyap_solve(prob.a, prob.c, cfg, inner, **inner_kwargs)

    terms = [t for t in prob.terms if t.rank > 0 and t.fro_norm() > 0.0]
    if not terms:
        res, _ = bounds.residual_generalized(prob, xhat, cfg)
        return xhat, _report(f"smw[{inner}]", rep0.iterations, res, xhat, t0,
                             flops0, hodlr.nbytes(xhat))

    # per-term extended Krylov data: one basis per distinct block of
    # generating vectors; the correction solves may use the full space if
    # need be (at which point the projection is exact)
    bases = []
    ys = []       # ys[h][i][j] = projected solution for RHS u_j u_i^T
    for term in terms:
        basis = _EkBasis(prob.a, term.u, cfg)
        r = term.rank
        while True:
            am, w = basis.projected()
            pu = basis.v.T @ term.u
            ymat = [[dense_sylvester_oracle(am, am, np.outer(pu[:, j], pu[:, i]))
                     for j in range(r)] for i in range(r)]
            worst = 0.0
            for i in range(r):
                for j in range(r):
                    rhs_fro = np.linalg.norm(term.u[:, j]) * np.linalg.norm(term.u[:, i])
                    res = basis.residual_fro(ymat[i][j], w,
                                             term.u[:, j:j + 1], term.u[:, i:i + 1])
                    worst = max(worst, res / max(rhs_fro, 1e-300))
            if worst <= ek_tol:
                break
            if basis.dim >= prob.n or not basis.expand():
                raise ConvergenceError(
                    "extended Krylov basis for a correction term did not converge",
                    last_increment=worst)
        bases.append(basis)
        ys.append(ymat)

    # capacitance system (I_r + W) g = y over all term column pairs
    rtot = sum(t.rank ** 2 for t in terms)
    wmat = np.zeros((rtot, rtot))
    yvec = np.zeros(rtot)
    # row offsets per term
    offs = np.cumsum([0] + [t.rank ** 2 for t in terms])
    for mi, tm in enumerate(terms):
        qm = hodlr.matvec(xhat, tm.v)
        vty = tm.v.T @ qm  # (b, a) -> V_b^T Xhat V_a at [b, a]
        rm = tm.rank
        for a_i in range(rm):
            for b_i in range(rm):
                p = offs[mi] + a_i * rm + b_i
                yvec[p] = vty[b_i, a_i]
        for hi, th in enumerate(terms):
            rh = th.rank
            pmh = tm.v.T @ bases[hi].v  # (r_m, dim_h)
            for a_i in range(rm):
                for b_i in range(rm):
                    p = offs[mi] + a_i * rm + b_i
                    for i in range(rh):
                        for j in range(rh):
                            q = offs[hi] + i * rh + j
                            wmat[p, q] = pmh[b_i] @ ys[hi][i][j] @ pmh[a_i]
    cap = np.eye(rtot) + wmat
    g = dense.solve_dense(cap, yvec)

    x = xhat
    for hi, th in enumerate(terms):
        rh = th.rank
        gh = np.zeros((bases[hi].dim, bases[hi].dim))
        for i in range(rh):
            for j in range(rh):
                gh += g[offs[hi] + i * rh + j] * ys[hi][i][j]
        x = hodlr.add_lowrank(x, -(bases[hi].v @ gh), bases[hi].v, cfg)

    res, _ = bounds.residual_generalized(prob, x, cfg)
    mem = hodlr.nbytes(x) + hodlr.nbytes(xhat)
    return x, _report(f"smw[{inner}]", rep0.iterations, res, x, t0, flops0, mem)


def neumann_generalized_solve(prob, cfg=None, series_tol=1e-10, max_terms=100,
                              inner="sign", inner_kwargs=None):
    """Generalized Lyapunov solve by the Neumann series: Z_0 solves the
    plain equation, then A Z_{i+1} + Z_{i+1} A = -sum_j M_j Z_i M_j^T, and
    X = sum Z_i; valid when the correction operator is a contraction.

    Growth of |Z_{i+1}|_F / |Z_i|_F at or above one for three consecutive
    steps raises :class:`DivergenceError`.
    """
    cfg = cfg or HodlrConfig()
    t0 = time.perf_counter()
    flops0 = dense.flops()
    _require_spd(prob.a, "A")
    inner_kwargs = inner_kwargs or {}

    z, rep0 = _standard_lyap_solve(prob.a, prob.c, cfg, inner, **inner_kwargs)
    x = z
    znorm = math.sqrt(hodlr._fro2(z))
    xnorm = math.sqrt(hodlr._fro2(x))
    growth_streak = 0
    terms_used = 1
    mem = hodlr.nbytes(x)
    while znorm > series_tol * max(xnorm, 1e-300):
        if terms_used >= max_terms:
            raise ConvergenceError(
                f"Neumann series did not converge within {max_terms} terms",
                last_increment=znorm / max(xnorm, 1e-300))
        rhs = hodlr.scale(prob.c, 0.0)
        for term in prob.terms:
            rhs = term.apply_add(rhs, z, cfg)
        if hodlr._fro2(rhs) == 0.0:
            break
        rhs = hodlr.scale(rhs, -1.0)
        z_new, _ = _standard_lyap_solve(prob.a, rhs, cfg, inner, **inner_kwargs)
        z_new_norm = math.sqrt(hodlr._fro2(z_new))
        if z_new_norm >= znorm:
            growth_streak += 1
            if growth_streak >= 3:
                raise DivergenceError(
                    "series terms grew for three consecutive steps "
                    "(spectral radius of the correction operator >= 1)")
        else:
            growth_streak = 0
        z = z_new
        znorm = z_new_norm
        x = hodlr.add(x, z, cfg)
        xnorm = math.sqrt(hodlr._fro2(x))
        terms_used += 1
        mem = max(mem, hodlr.nbytes(x) + hodlr.nbytes(z))

    res, _ = bounds.residual_generalized(prob, x, cfg)
    return x, _report(f"neumann[{inner}]", terms_used, res, x, t0, flops0, mem)
