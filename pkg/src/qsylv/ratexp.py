"""Matrix exponentials in HODLR arithmetic by two rational strategies.

* diagonal Pade approximation with scaling and squaring, for matrices of
  moderate norm;
* a rational approximation of e^x on the negative real axis in partial
  fraction form, sum_i r_i / (x - s_i), whose cost is a fixed number of
  shifted inversions independent of t and of the matrix norm.  The poles
  and residues are produced offline by the Caratheodory-Fejer method (see
  :func:`cf_exp_table`) and shipped as text tables that are validated
  against e^x every time they are loaded.

Complex pole pairs are handled entirely in real arithmetic: the shifted
matrix is embedded into a real matrix of twice the size that represents
each complex entry x + i y as the 2x2 block [[x, -y], [y, x]].  The
embedding multiplies every HODLR leaf and factor by the identity of order
two, so it preserves the tree structure with doubled ranks and the
inversion is exactly the complex solve, done stably in real arithmetic.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np
import scipy.linalg

from . import hodlr
from .errors import NumericalError, SingularMatrixError
from .hodlr import HodlrConfig, HodlrMatrix, LowRankFactor

__all__ = [
    "ChebyshevExpTable",
    "PadeConfig",
    "cf_exp_table",
    "expm_pade",
    "expm_chebyshev",
    "choose_strategy",
]

TABLE_DEGREES = (8, 12, 14, 16)
TABLE_VERSION = 1


class _SolveTally:
    """Counts shifted-system inversions done by expm_chebyshev (instrumentation)."""

    __slots__ = ("count",)

    def __init__(self):
        self.count = 0


SOLVE_TALLY = _SolveTally()


# ---------------------------------------------------------------------------
# pole/residue tables
# ---------------------------------------------------------------------------

def _table_tolerance(degree):
    # the uniform error of the degree-d best approximation is ~10^-d;
    # below ~1e-13 the double-precision evaluation of e^x itself dominates
    return max(5.0 * 10.0 ** (-degree), 3e-13)


@dataclass(frozen=True)
class ChebyshevExpTable:
    """Poles and residues of a partial-fraction approximation of e^x, x <= 0.

    Closed under conjugation, so evaluating on real arguments (and real
    matrices) gives real results.
    """

    degree: int
    poles: np.ndarray
    residues: np.ndarray

    def __post_init__(self):
        if self.degree < 1 or self.poles.shape != (self.degree,) \
                or self.residues.shape != (self.degree,):
            raise ValueError("inconsistent table contents")

    def evaluate(self, x):
        """Evaluate the partial fraction sum on a real array ``x``."""
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for s, r in zip(self.poles, self.residues):
            out = out + (r / (x - s)).real
        return out

    def conjugate_pairs(self):
        """Yield (pole, residue) once per conjugate pair (positive imaginary
        part) and any real poles with a None marker."""
        used = np.zeros(self.degree, dtype=bool)
        pairs = []
        reals = []
        for i in range(self.degree):
            if used[i]:
                continue
            s, r = self.poles[i], self.residues[i]
            if abs(s.imag) < 1e-14 * abs(s):
                reals.append((s.real, r.real))
                used[i] = True
                continue
            # find the conjugate partner
            j = int(np.argmin(np.abs(self.poles - s.conjugate())
                              + np.where(used, np.inf, 0.0)))
            used[i] = used[j] = True
            if s.imag < 0:
                s, r = s.conjugate(), r.conjugate()
            pairs.append((s, r))
        return pairs, reals

    def validate(self, npoints=1000, tol=None):
        """Check conjugate closure and the uniform error on [-1e8, -1e-8]."""
        tol = _table_tolerance(self.degree) if tol is None else tol
        sp = np.sort_complex(self.poles)
        if not np.allclose(sp, np.sort_complex(self.poles.conjugate()),
                           rtol=1e-12, atol=1e-12):
            raise ValueError("table poles are not closed under conjugation")
        x = -np.geomspace(1e-8, 1e8, npoints)
        err = np.max(np.abs(self.evaluate(x) - np.exp(x)))
        if err > tol:
            raise ValueError(
                f"table of degree {self.degree} fails validation: "
                f"uniform error {err:.3e} > {tol:.3e}")
        return err

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(f"{self.degree}\n")
            for s, r in zip(self.poles, self.residues):
                fh.write(f"{s.real:.17g} {s.imag:.17g} "
                         f"{r.real:.17g} {r.imag:.17g}\n")

    @classmethod
    def load(cls, source):
        """Read a table from a path or open text stream and validate it."""
        if hasattr(source, "read"):
            text = source.read()
        else:
            with open(source) as fh:
                text = fh.read()
        lines = [ln for ln in text.splitlines() if ln.strip()]
        degree = int(lines[0])
        if len(lines) != degree + 1:
            raise ValueError(f"expected {degree} coefficient lines, got {len(lines) - 1}")
        poles = np.empty(degree, dtype=complex)
        residues = np.empty(degree, dtype=complex)
        for i, ln in enumerate(lines[1:]):
            sr, si, rr, ri = (float(tok) for tok in ln.split())
            poles[i] = complex(sr, si)
            residues[i] = complex(rr, ri)
        table = cls(degree, poles, residues)
        table.validate()
        return table

    @classmethod
    def builtin(cls, degree=14):
        """Load one of the shipped tables (degrees 8, 12, 14, 16)."""
        if degree not in TABLE_DEGREES:
            raise ValueError(f"no built-in table of degree {degree}; "
                             f"available: {TABLE_DEGREES}")
        name = f"cf_exp_v{TABLE_VERSION}_d{degree:02d}.txt"
        ref = resources.files("qsylv").joinpath("tables", name)
        with ref.open("r") as fh:
            return cls.load(fh)


def cf_exp_table(degree, nfft=16384, ncoeffs=75, transplant=9.0):
    """Poles and residues of the best degree-(d, d) rational approximation
    of e^x on (-inf, 0], by the Caratheodory-Fejer method.

    The exponential is transplanted to the unit interval by the Moebius map
    x = transplant * (t - 1) / (t + 1); its Chebyshev coefficients feed a
    Hankel matrix whose (d+1)-st singular triplet yields a finite Blaschke
    product whose outer poles are the sought poles.  Residues follow from
    the associated polynomial quotient.  Everything runs in ordinary double
    precision, which limits the reachable accuracy to ~1e-13; that is
    enough for every shipped degree.
    """
    d = int(degree)
    if d < 1:
        raise ValueError("degree must be positive")
    w = np.exp(2j * np.pi * np.arange(nfft) / nfft)
    t = np.real(w)
    feval = np.exp(transplant * (t - 1) / (t + 1 + 1e-16))
    cheb = np.real(np.fft.fft(feval)) / nfft
    # analytic part of the transplanted function on the unit circle
    fa = np.zeros_like(w, dtype=complex)
    for k in range(ncoeffs, -1, -1):
        fa = fa * w + cheb[k]
    hank = scipy.linalg.hankel(cheb[1:ncoeffs + 1])
    u_all, s_all, vt_all = np.linalg.svd(hank)
    sigma = s_all[d]
    u = u_all[::-1, d]
    v = vt_all[d, :]
    pad = np.zeros(nfft - ncoeffs)
    blaschke = np.fft.fft(np.concatenate([u, pad])) / np.fft.fft(np.concatenate([v, pad]))
    rt = fa - sigma * w ** ncoeffs * blaschke
    zeros_v = np.roots(v)
    qk = zeros_v[np.abs(zeros_v) > 1]
    if qk.size != d:
        raise NumericalError(f"CF procedure found {qk.size} poles, expected {d}")
    qc = np.real(np.poly(qk))
    pt = rt * np.polyval(qc, w)
    ptc = np.real(np.fft.fft(pt) / nfft)[d::-1]
    residues = np.zeros(d, dtype=complex)
    for k in range(d):
        q = qk[k]
        qpartial = np.poly(qk[qk != q])
        residues[k] = np.polyval(ptc, q) / np.polyval(qpartial, q)
    poles = transplant * (qk - 1) ** 2 / (qk + 1) ** 2
    residues = 4 * residues * poles / (qk ** 2 - 1)
    order = np.lexsort((poles.imag, poles.real))
    return ChebyshevExpTable(d, poles[order], residues[order])


def generate_builtin_tables(directory):
    """Regenerate the shipped table files (offline helper)."""
    import pathlib

    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for d in TABLE_DEGREES:
        table = cf_exp_table(d)
        err = table.validate()
        path = directory / f"cf_exp_v{TABLE_VERSION}_d{d:02d}.txt"
        table.save(path)
        yield d, err, path


# ---------------------------------------------------------------------------
# Pade with scaling and squaring
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PadeConfig:
    """Degree of the diagonal Pade approximant (13 uses the classical
    coefficient set and the economized power evaluation)."""

    degree: int = 13

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError("degree must be at least 1")


# classical (13,13) coefficients, integer-exact
_PADE13 = (
    64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
    1187353796428800.0, 129060195264000.0, 10559470521600.0, 670442572800.0,
    33522128640.0, 1323241920.0, 40840800.0, 960960.0, 16380.0, 182.0, 1.0,
)


def _pade_coeffs(d):
    return [math.factorial(2 * d - j) * math.factorial(d)
            / (math.factorial(2 * d) * math.factorial(d - j) * math.factorial(j))
            for j in range(d + 1)]


def expm_pade(h, cfg=hodlr.DEFAULT_CONFIG, pade=PadeConfig()):
    """e^h by diagonal Pade with scaling and squaring, in HODLR arithmetic.

    The input is scaled by 2^-k with k = max(0, ceil(log2(|h|_2))) so the
    approximant is evaluated at norm at most one, then squared k times.
    """
    if h.rows != h.cols:
        raise ValueError("matrix exponential needs a square matrix")
    nrm = hodlr.two_norm_est(h)
    k = max(0, math.ceil(math.log2(nrm))) if nrm > 0 else 0
    hs = hodlr.scale(h, 2.0 ** (-k)) if k else h
    if pade.degree == 13:
        b = _PADE13
        h2 = hodlr.multiply(hs, hs, cfg)
        h4 = hodlr.multiply(h2, h2, cfg)
        h6 = hodlr.multiply(h2, h4, cfg)
        w1 = hodlr.add(hodlr.scale(h6, b[13]),
                       hodlr.add(hodlr.scale(h4, b[11]), hodlr.scale(h2, b[9]), cfg), cfg)
        w2 = hodlr.add(hodlr.scale(h6, b[7]),
                       hodlr.add(hodlr.scale(h4, b[5]), hodlr.scale(h2, b[3]), cfg), cfg)
        w = hodlr.add_identity(hodlr.add(hodlr.multiply(h6, w1, cfg), w2, cfg), b[1])
        u = hodlr.multiply(hs, w, cfg)
        z1 = hodlr.add(hodlr.scale(h6, b[12]),
                       hodlr.add(hodlr.scale(h4, b[10]), hodlr.scale(h2, b[8]), cfg), cfg)
        z2 = hodlr.add(hodlr.scale(h6, b[6]),
                       hodlr.add(hodlr.scale(h4, b[4]), hodlr.scale(h2, b[2]), cfg), cfg)
        v = hodlr.add_identity(hodlr.add(hodlr.multiply(h6, z1, cfg), z2, cfg), b[0])
    else:
        b = _pade_coeffs(pade.degree)
        power = hs
        u = hodlr.scale(hs, b[1])
        v = hodlr.eye_like(hs, b[0])
        for j in range(2, pade.degree + 1):
            power = hodlr.multiply(power, hs, cfg)
            term = hodlr.scale(power, b[j])
            if j % 2:
                u = hodlr.add(u, term, cfg)
            else:
                v = hodlr.add(v, term, cfg)
    num = hodlr.add(v, u, cfg)
    den = hodlr.add(v, hodlr.scale(u, -1.0), cfg)
    try:
        r = hodlr.multiply(hodlr.invert(den, cfg), num, cfg)
    except SingularMatrixError as exc:
        raise NumericalError("scaled Pade denominator is singular") from exc
    for _ in range(k):
        r = hodlr.multiply(r, r, cfg)
    return r


# ---------------------------------------------------------------------------
# rational Chebyshev strategy
# ---------------------------------------------------------------------------

def _interleave_shifted(h, t, shift):
    """Real order-2n embedding of (-t h - shift I) for complex shift."""
    a, b = shift.real, shift.imag
    if h.is_leaf:
        m = h.rows
        out = np.kron(-t * h.data, np.eye(2))
        idx = np.arange(m)
        out[2 * idx, 2 * idx] -= a
        out[2 * idx + 1, 2 * idx + 1] -= a
        out[2 * idx, 2 * idx + 1] += b
        out[2 * idx + 1, 2 * idx] -= b
        return HodlrMatrix(2 * m, 2 * m, data=out)
    eye2 = np.eye(2)

    def lift(f, scale_u):
        if f.rank == 0:
            return LowRankFactor.zero(2 * f.u.shape[0], 2 * f.v.shape[0])
        return LowRankFactor(np.kron(scale_u * f.u, eye2), np.kron(f.v, eye2))

    return HodlrMatrix(2 * h.rows, 2 * h.cols,
                       a11=_interleave_shifted(h.a11, t, shift),
                       a22=_interleave_shifted(h.a22, t, shift),
                       a21=lift(h.a21, -t), a12=lift(h.a12, -t))


def _deinterleave(h2, cfg):
    """Split the order-2n embedding of a complex matrix into (real, imag) trees."""
    if h2.is_leaf:
        zr = np.ascontiguousarray(h2.data[0::2, 0::2])
        zi = np.ascontiguousarray(h2.data[1::2, 0::2])
        m = zr.shape[0]
        return (HodlrMatrix(m, m, data=zr), HodlrMatrix(m, m, data=zi))
    r11, i11 = _deinterleave(h2.a11, cfg)
    r22, i22 = _deinterleave(h2.a22, cfg)

    def split(f):
        if f.rank == 0:
            return (LowRankFactor.zero(f.u.shape[0] // 2, f.v.shape[0] // 2),) * 2
        ve = f.v[0::2, :]
        re = hodlr._compress(f.u[0::2, :], ve, cfg)
        im = hodlr._compress(f.u[1::2, :], ve, cfg)
        return re, im
    r21, i21 = split(h2.a21)
    r12, i12 = split(h2.a12)
    n = r11.rows + r22.rows
    real = HodlrMatrix(n, n, a11=r11, a22=r22, a21=r21, a12=r12)
    imag = HodlrMatrix(n, n, a11=i11, a22=i22, a21=i21, a12=i12)
    return real, imag


def _rayleigh_probe(h, nprobe=4, seed=1234):
    rng = np.random.default_rng(seed)
    worst = np.inf
    for _ in range(nprobe):
        v = rng.standard_normal(h.cols)
        worst = min(worst, float(v @ hodlr.matvec(h, v)) / float(v @ v))
    return worst


def expm_chebyshev(t, h, table=None, cfg=hodlr.DEFAULT_CONFIG):
    """e^(-t h) for symmetric positive definite h, uniformly in t.

    Evaluates the partial-fraction table at -t h: one real double-size
    inversion per conjugate pole pair (ceil(d/2) solves in total), so the
    cost does not depend on t or on the norm of h.
    """
    if t <= 0:
        raise ValueError("t must be positive")
    if h.rows != h.cols:
        raise ValueError("matrix exponential needs a square matrix")
    table = ChebyshevExpTable.builtin() if table is None else table
    if _rayleigh_probe(h) <= 0:
        raise ValueError("matrix fails the positive-definiteness probe")
    pairs, reals = table.conjugate_pairs()
    acc = None
    for s, r in pairs:
        big = _interleave_shifted(h, t, s)
        inv = hodlr.invert(big, cfg)
        SOLVE_TALLY.count += 1
        zr, zi = _deinterleave(inv, cfg)
        term = hodlr.add(hodlr.scale(zr, 2.0 * r.real),
                         hodlr.scale(zi, -2.0 * r.imag), cfg)
        acc = term if acc is None else hodlr.add(acc, term, cfg)
    for s, r in reals:
        shifted = hodlr.add_identity(hodlr.scale(h, -t), -s)
        inv = hodlr.invert(shifted, cfg)
        SOLVE_TALLY.count += 1
        term = hodlr.scale(inv, r)
        acc = term if acc is None else hodlr.add(acc, term, cfg)
    return acc


def choose_strategy(t, two_norm, crossover=64.0):
    """'pade' when t * two_norm <= crossover (boundary inclusive), else 'chebyshev'."""
    return "pade" if t * two_norm <= crossover else "chebyshev"
