"""Hierarchically off-diagonal low-rank (HODLR) matrices and their arithmetic.

A square matrix is split 2x2 at ``n1 = floor(n/2)``; the two off-diagonal
blocks are stored as low-rank outer products ``u @ v.T`` and the strategy
recurses on the diagonal blocks until they fall below the leaf cutoff
``block_size``, where they are stored dense.

All arithmetic re-truncates off-diagonal factors blockwise, relative to the
2-norm of each individual block (or at a fixed absolute threshold when
``HodlrConfig.absolute`` is set, which the equation solvers use internally).
Trees are immutable by convention: operations return new objects and never
mutate their operands, so values can be shared freely across threads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import dense
from .errors import FormatError

__all__ = [
    "HodlrConfig",
    "LowRankFactor",
    "HodlrMatrix",
    "from_dense",
    "from_banded",
    "from_function",
    "add",
    "multiply",
    "matvec",
    "solve",
    "invert",
    "hodlr_rank",
    "norms",
    "serialize",
    "deserialize",
    "scale",
    "transpose",
    "add_lowrank",
    "eye_like",
    "nbytes",
]


@dataclass(frozen=True)
class HodlrConfig:
    """Truncation threshold, leaf cutoff and optional hard rank cap.

    ``threshold`` is relative to each off-diagonal block's 2-norm unless
    ``absolute`` is set, in which case singular values are compared against
    it directly.
    """

    threshold: float = 1e-12
    block_size: int = 256
    max_rank: int | None = None
    absolute: bool = False

    def __post_init__(self):
        if self.threshold < 0:
            raise ValueError("threshold must be nonnegative")
        if self.block_size < 2:
            raise ValueError("block_size must be at least 2")


DEFAULT_CONFIG = HodlrConfig()


class LowRankFactor:
    """A rank-k outer product ``u @ v.T`` with u (m x k) and v (n x k)."""

    __slots__ = ("u", "v")

    def __init__(self, u, v):
        u = np.ascontiguousarray(u, dtype=float)
        v = np.ascontiguousarray(v, dtype=float)
        if u.ndim != 2 or v.ndim != 2 or u.shape[1] != v.shape[1]:
            raise ValueError("factor matrices must be 2-d with matching rank")
        self.u = u
        self.v = v

    @property
    def rank(self):
        return self.u.shape[1]

    @property
    def shape(self):
        return (self.u.shape[0], self.v.shape[0])

    def to_dense(self):
        dense.record_matmul(self.u.shape[0], self.rank, self.v.shape[0])
        return self.u @ self.v.T

    @staticmethod
    def zero(m, n):
        return LowRankFactor(np.zeros((m, 0)), np.zeros((n, 0)))


class HodlrMatrix:
    """A node of the HODLR tree: a dense leaf or a 2x2 branch.

    Branch children are ``a11`` (rows/cols [0, n1)) and ``a22``; ``a21`` and
    ``a12`` are the :class:`LowRankFactor` of the lower-left and upper-right
    blocks.  Use the module-level constructors (:func:`from_dense`,
    :func:`from_banded`, :func:`from_function`) rather than building nodes
    by hand.
    """

    __slots__ = ("rows", "cols", "data", "a11", "a22", "a21", "a12")

    def __init__(self, rows, cols, data=None, a11=None, a22=None, a21=None, a12=None):
        self.rows = int(rows)
        self.cols = int(cols)
        self.data = data
        self.a11 = a11
        self.a22 = a22
        self.a21 = a21
        self.a12 = a12
        if data is None:
            if a11 is None or a22 is None or a21 is None or a12 is None:
                raise ValueError("branch nodes need both children and both factors")

    @property
    def is_leaf(self):
        return self.data is not None

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def n1(self):
        return self.a11.rows

    def to_dense(self):
        if self.is_leaf:
            return self.data.copy()
        n1 = self.n1
        out = np.empty((self.rows, self.cols))
        out[:n1, :n1] = self.a11.to_dense()
        out[n1:, n1:] = self.a22.to_dense()
        out[n1:, :n1] = self.a21.to_dense()
        out[:n1, n1:] = self.a12.to_dense()
        return out

    def matvec(self, x):
        return _matmat(self, np.asarray(x, dtype=float))

    def depth(self):
        if self.is_leaf:
            return 0
        return 1 + max(self.a11.depth(), self.a22.depth())

    def __repr__(self):
        kind = "leaf" if self.is_leaf else f"branch(rank={hodlr_rank(self)})"
        return f"HodlrMatrix({self.rows}x{self.cols}, {kind})"


# ---------------------------------------------------------------------------
# truncation helpers
# ---------------------------------------------------------------------------

def _truncate_sv(s, cfg, scale_in=None):
    # scale_in is the magnitude of the factors before any cancellation;
    # singular values at its roundoff floor are noise and are dropped even
    # in relative mode (this is what collapses h + (-h) to exact rank 0).
    if s.size == 0:
        return 0
    floor = 0.0
    if scale_in is not None:
        floor = 16 * np.finfo(float).eps * scale_in
    if cfg.absolute:
        cut = max(cfg.threshold, floor)
    else:
        cut = max(cfg.threshold * s[0], floor)
    keep = int(np.sum(s > cut))
    if cfg.max_rank is not None:
        keep = min(keep, cfg.max_rank)
    return keep


def _compress(u, v, cfg):
    """Recompress an outer product ``u @ v.T`` to its truncated SVD form."""
    m, k = u.shape
    n = v.shape[0]
    if k == 0:
        return LowRankFactor.zero(m, n)
    # scale of the data as assembled, for the roundoff floor: the largest
    # rank-one contribution |u_j| * |v_j|
    col_scale = float(np.max(np.linalg.norm(u, axis=0) * np.linalg.norm(v, axis=0)))
    if k >= min(m, n):
        # no size advantage; go through the dense block
        dense.record_matmul(m, k, n)
        r = dense.truncated_svd(u @ v.T, 0.0, None)
        keep = _truncate_sv(r.s, cfg, col_scale)
        return LowRankFactor(r.u[:, :keep] * r.s[:keep], r.v[:, :keep])
    qu, ru = np.linalg.qr(u)
    qv, rv = np.linalg.qr(v)
    dense.record_qr(m, k)
    dense.record_qr(n, k)
    core = dense.truncated_svd(ru @ rv.T, 0.0, None)
    keep = _truncate_sv(core.s, cfg, col_scale)
    dense.record_matmul(m, k, keep)
    dense.record_matmul(n, k, keep)
    return LowRankFactor(qu @ (core.u[:, :keep] * core.s[:keep]), qv @ core.v[:, :keep])


def _mirror(f):
    """Factor of the transposed block, sharing arrays."""
    return LowRankFactor(f.v, f.u)


def _mirrored_tree(h):
    """True when the tree stores a12 as the exact mirror of a21 (shared arrays)."""
    if h.is_leaf:
        return True
    return (h.a12.u is h.a21.v and h.a12.v is h.a21.u
            and _mirrored_tree(h.a11) and _mirrored_tree(h.a22))


# ---------------------------------------------------------------------------
# constructors
# ---------------------------------------------------------------------------

def from_dense(a, cfg=DEFAULT_CONFIG):
    """Compress a square dense matrix into HODLR form.

    Off-diagonal blocks are truncated to their epsilon-rank at the config
    threshold.  A symmetric input produces a tree whose upper factors share
    the arrays of the lower ones, so symmetry is preserved exactly.
    """
    a = np.ascontiguousarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("expected a square matrix")
    if not np.all(np.isfinite(a)):
        raise ValueError("input contains non-finite entries")
    sym = np.array_equal(a, a.T)
    return _from_dense(a, cfg, sym)


def _from_dense(a, cfg, sym):
    n = a.shape[0]
    if n <= cfg.block_size:
        return HodlrMatrix(n, n, data=a.copy())
    n1 = n // 2
    a21 = _dense_block_factor(a[n1:, :n1], cfg)
    a12 = _mirror(a21) if sym else _dense_block_factor(a[:n1, n1:], cfg)
    return HodlrMatrix(n, n,
                       a11=_from_dense(a[:n1, :n1], cfg, sym),
                       a22=_from_dense(a[n1:, n1:], cfg, sym),
                       a21=a21, a12=a12)


def _band_window(diags, n, r0, r1, c0, c1):
    """Materialize the (r0:r1, c0:c1) window of a matrix given by its diagonals.

    ``diags`` maps offset -> values with the numpy.diag convention:
    offset o >= 0 places values[j] at (j, j+o), o < 0 at (j-o, j).
    """
    out = np.zeros((r1 - r0, c1 - c0))
    for o, vals in diags.items():
        if o >= 0:
            jlo = max(r0, c0 - o)
            jhi = min(r1, c1 - o, n - o)
            for j in range(jlo, jhi):
                out[j - r0, j + o - c0] = vals[j]
        else:
            jlo = max(r0 + o, c0)
            jhi = min(r1 + o, c1, n + o)
            for j in range(jlo, jhi):
                out[j - o - r0, j - c0] = vals[j]
    return out


def from_banded(diags, bandwidth, cfg=DEFAULT_CONFIG):
    """Exact HODLR representation of a banded matrix given by its diagonals.

    ``diags`` maps diagonal offset to its value array (numpy.diag layout);
    the main diagonal (offset 0) must be present and fixes n.  Every
    off-diagonal factor is built exactly from the band corner it covers and
    then stripped of its numerically zero singular values, so the
    representation is lossless and the stored ranks equal the true
    quasiseparable ranks of the blocks (<= bandwidth).
    """
    if 0 not in diags:
        raise ValueError("diagonals must include offset 0")
    diags = {int(o): np.asarray(v, dtype=float) for o, v in diags.items()}
    n = diags[0].size
    bandwidth = int(bandwidth)
    if bandwidth >= n:
        raise ValueError("bandwidth must be smaller than the matrix size")
    if any(abs(o) > bandwidth for o in diags):
        raise ValueError("a diagonal lies outside the declared bandwidth")
    for o, vals in diags.items():
        if vals.size != n - abs(o):
            raise ValueError(f"diagonal {o} has wrong length")
    sym = all(-o in diags and np.array_equal(diags[o], diags[-o]) for o in diags)
    reveal = HodlrConfig(threshold=100 * np.finfo(float).eps,
                         block_size=cfg.block_size, max_rank=cfg.max_rank)
    return _from_banded(diags, n, bandwidth, 0, n, cfg, reveal, sym)


def _from_banded(diags, n, bw, lo, hi, cfg, reveal, sym):
    size = hi - lo
    if size <= cfg.block_size:
        return HodlrMatrix(size, size, data=_band_window(diags, n, lo, hi, lo, hi))
    n1 = size // 2
    mid = lo + n1
    # the lower block is nonzero only in its top-left bw x bw corner
    w = min(bw, n1, size - n1)
    corner = _band_window(diags, n, mid, mid + w, mid - w, mid)
    u = np.zeros((size - n1, w))
    u[:w, :] = corner
    v = np.zeros((n1, w))
    v[n1 - w:, :] = np.eye(w)
    a21 = _compress(u, v, reveal)
    if sym:
        a12 = _mirror(a21)
    else:
        cornu = _band_window(diags, n, mid - w, mid, mid, mid + w)
        uu = np.zeros((n1, w))
        uu[n1 - w:, :] = cornu
        vv = np.zeros((size - n1, w))
        vv[:w, :] = np.eye(w)
        a12 = _compress(uu, vv, reveal)
    return HodlrMatrix(size, size,
                       a11=_from_banded(diags, n, bw, lo, mid, cfg, reveal, sym),
                       a22=_from_banded(diags, n, bw, mid, hi, cfg, reveal, sym),
                       a21=a21, a12=a12)


def _aca_block(f, rows, cols, tol, max_iter):
    """Partially pivoted adaptive cross approximation of the block f(rows, cols).

    Stops when |u_k| * |v_k| <= tol * |approximant so far|_F.  Returns
    (u, v) with the block approximated by u @ v.T; returns the factors
    gathered so far when successive residual rows vanish (block numerically
    reproduced), and None when the sweep cap is hit first (stagnation).
    """
    m = rows.size
    us, vs = [], []
    used_rows, used_cols = set(), set()
    norm2 = 0.0
    i = 0
    zero_rows = 0

    def factors():
        if not us:
            return np.zeros((m, 0)), np.zeros((cols.size, 0))
        return np.column_stack(us), np.column_stack(vs)

    for _ in range(max_iter):
        r = f(rows[i], cols).astype(float, copy=True)
        for uk, vk in zip(us, vs):
            r -= uk[i] * vk
        for j in used_cols:
            r[j] = 0.0
        used_rows.add(i)
        j = int(np.argmax(np.abs(r)))
        piv = r[j]
        unused = [ii for ii in range(m) if ii not in used_rows]
        if piv == 0.0:
            zero_rows += 1
            if zero_rows >= 3 or not unused:
                return factors()
            i = unused[0]
            continue
        zero_rows = 0
        v = r / piv
        u = f(rows, cols[j]).astype(float, copy=True)
        for uk, vk in zip(us, vs):
            u -= vk[j] * uk
        used_cols.add(j)
        unrm2 = float(u @ u)
        vnrm2 = float(v @ v)
        cross = sum(float(u @ uk) * float(v @ vk) for uk, vk in zip(us, vs))
        norm2 += unrm2 * vnrm2 + 2.0 * cross
        us.append(u)
        vs.append(v)
        if unrm2 * vnrm2 <= (tol * tol) * max(norm2, 1e-300):
            return factors()
        if not unused:
            return factors()
        au = np.abs(u)
        for ii in used_rows:
            au[ii] = -1.0
        i = int(np.argmax(au))
    return None


_ACA_DENSE_CUTOFF = 64
_ACA_EXPECTED_RANK = 32


def from_function(f, grid_x, grid_y, cfg=DEFAULT_CONFIG, symmetric=False,
                  expected_rank=_ACA_EXPECTED_RANK):
    """Sample a bivariate function on a grid directly into HODLR form.

    Off-diagonal blocks are compressed by partially pivoted adaptive cross
    approximation capped at ``2 * expected_rank`` sweeps followed by an SVD
    recompression; blocks with a side below 64, and blocks where the
    sampling stagnates, fall back to dense evaluation plus truncated SVD,
    so construction never fails.  ``f`` must accept numpy arrays for either
    argument.  Set ``symmetric`` when f(x, y) == f(y, x) and the grids
    coincide to make the tree exactly symmetric.
    """
    grid_x = np.asarray(grid_x, dtype=float)
    grid_y = np.asarray(grid_y, dtype=float)
    if grid_x.size != grid_y.size:
        raise ValueError("grids must have equal length (square support)")
    probe = np.asarray(f(grid_x[:1], grid_y[:1]), dtype=float)
    if not np.all(np.isfinite(probe)):
        raise ValueError("sampler returned non-finite values")
    idx = np.arange(grid_x.size)

    def sample(i, j):
        xi = grid_x[i]
        yj = grid_y[j]
        if np.ndim(i) and np.ndim(j):
            return np.asarray(f(xi[:, None], yj[None, :]), dtype=float)
        return np.asarray(f(xi, yj), dtype=float)

    return _from_function(sample, idx, cfg, symmetric, expected_rank)


def _from_function(sample, idx, cfg, sym, expected_rank):
    n = idx.size
    if n <= cfg.block_size:
        block = sample(idx, idx)
        if not np.all(np.isfinite(block)):
            raise ValueError("sampler returned non-finite values")
        return HodlrMatrix(n, n, data=block)
    n1 = n // 2
    a21 = _function_block(sample, idx[n1:], idx[:n1], cfg, expected_rank)
    if sym:
        a12 = _mirror(a21)
    else:
        a12 = _function_block(sample, idx[:n1], idx[n1:], cfg, expected_rank)
    return HodlrMatrix(n, n,
                       a11=_from_function(sample, idx[:n1], cfg, sym, expected_rank),
                       a22=_from_function(sample, idx[n1:], cfg, sym, expected_rank),
                       a21=a21, a12=a12)


def _function_block(sample, rows, cols, cfg, expected_rank):
    m, n = rows.size, cols.size
    if min(m, n) <= _ACA_DENSE_CUTOFF:
        return _dense_block_factor(sample(rows, cols), cfg)
    tol = cfg.threshold if not cfg.absolute else 1e-15
    got = _aca_block(sample, rows, cols, tol, 2 * expected_rank)
    if got is None:
        return _dense_block_factor(sample(rows, cols), cfg)
    u, v = got
    dense.record_matmul(m + n, u.shape[1], u.shape[1])
    return _compress(u, v, cfg)


def _dense_block_factor(block, cfg):
    r = dense.truncated_svd(block, 0.0, None)
    keep = _truncate_sv(r.s, cfg)
    return LowRankFactor(r.u[:, :keep] * r.s[:keep], r.v[:, :keep])


def eye_like(h, value=1.0):
    """Identity (scaled) with the same tree shape as ``h``."""
    if h.is_leaf:
        return HodlrMatrix(h.rows, h.cols, data=value * np.eye(h.rows))
    return HodlrMatrix(h.rows, h.cols,
                       a11=eye_like(h.a11, value), a22=eye_like(h.a22, value),
                       a21=LowRankFactor.zero(h.rows - h.n1, h.n1),
                       a12=LowRankFactor.zero(h.n1, h.cols - h.n1))


def add_identity(h, alpha):
    """h + alpha * I, touching only the diagonal path (exact, no truncation)."""
    if h.is_leaf:
        d = h.data.copy()
        d[np.diag_indices(min(h.rows, h.cols))] += alpha
        return HodlrMatrix(h.rows, h.cols, data=d)
    return HodlrMatrix(h.rows, h.cols,
                       a11=add_identity(h.a11, alpha),
                       a22=add_identity(h.a22, alpha),
                       a21=h.a21, a12=h.a12)


# ---------------------------------------------------------------------------
# structural queries
# ---------------------------------------------------------------------------

def _same_shape(h1, h2):
    if h1.is_leaf != h2.is_leaf or h1.rows != h2.rows:
        return False
    if h1.is_leaf:
        return True
    return _same_shape(h1.a11, h2.a11) and _same_shape(h1.a22, h2.a22)


def hodlr_rank(h):
    """Maximum rank over all off-diagonal factors of the tree (0 for a leaf)."""
    if h.is_leaf:
        return 0
    return max(h.a21.rank, h.a12.rank,
               hodlr_rank(h.a11), hodlr_rank(h.a22))


def nbytes(h):
    """Bytes needed to store the tree's numerical payload."""
    if h.is_leaf:
        return h.data.nbytes
    fac = sum(f.u.nbytes + f.v.nbytes for f in (h.a21, h.a12))
    return fac + nbytes(h.a11) + nbytes(h.a22)


# ---------------------------------------------------------------------------
# matrix-vector / matrix-(thin)matrix products
# ---------------------------------------------------------------------------

def _matmat(h, x):
    single = x.ndim == 1
    xm = x[:, None] if single else x
    if xm.shape[0] != h.cols:
        raise ValueError("dimension mismatch in matrix-vector product")
    y = _matmat_rec(h, xm)
    return y[:, 0] if single else y


def _matmat_rec(h, x):
    if h.is_leaf:
        dense.record_matmul(h.rows, h.cols, x.shape[1])
        return h.data @ x
    n1 = h.n1
    x1, x2 = x[:n1], x[n1:]
    y1 = _matmat_rec(h.a11, x1)
    y2 = _matmat_rec(h.a22, x2)
    f = h.a12
    if f.rank:
        dense.record_matmul(f.rank, f.v.shape[0], x.shape[1])
        dense.record_matmul(f.u.shape[0], f.rank, x.shape[1])
        y1 = y1 + f.u @ (f.v.T @ x2)
    g = h.a21
    if g.rank:
        dense.record_matmul(g.rank, g.v.shape[0], x.shape[1])
        dense.record_matmul(g.u.shape[0], g.rank, x.shape[1])
        y2 = y2 + g.u @ (g.v.T @ x1)
    return np.vstack([y1, y2])


def _matmat_t(h, x):
    """h.T @ x without forming the transpose."""
    single = x.ndim == 1
    xm = x[:, None] if single else x
    if h.is_leaf:
        dense.record_matmul(h.cols, h.rows, xm.shape[1])
        y = h.data.T @ xm
        return y[:, 0] if single else y
    n1 = h.n1
    x1, x2 = xm[:n1], xm[n1:]
    y1 = _matmat_t(h.a11, x1)
    y2 = _matmat_t(h.a22, x2)
    g = h.a21  # contributes g.v @ (g.u.T @ x2) to rows [0, n1)
    if g.rank:
        y1 = y1 + g.v @ (g.u.T @ x2)
        dense.record_matmul(g.rank, g.u.shape[0], xm.shape[1])
        dense.record_matmul(g.v.shape[0], g.rank, xm.shape[1])
    f = h.a12
    if f.rank:
        y2 = y2 + f.v @ (f.u.T @ x1)
        dense.record_matmul(f.rank, f.u.shape[0], xm.shape[1])
        dense.record_matmul(f.v.shape[0], f.rank, xm.shape[1])
    y = np.vstack([y1, y2])
    return y[:, 0] if single else y


def matvec(h, x):
    """Product ``h @ x`` for a vector or thin dense matrix ``x``."""
    return _matmat(h, np.asarray(x, dtype=float))


def transpose(h):
    """Structural transpose (children transposed, factors swapped); shares arrays."""
    if h.is_leaf:
        return HodlrMatrix(h.cols, h.rows, data=np.ascontiguousarray(h.data.T))
    return HodlrMatrix(h.cols, h.rows,
                       a11=transpose(h.a11), a22=transpose(h.a22),
                       a21=LowRankFactor(h.a12.v, h.a12.u),
                       a12=LowRankFactor(h.a21.v, h.a21.u))


def scale(h, alpha):
    """alpha * h; scales leaves and one side of each factor."""
    alpha = float(alpha)
    if h.is_leaf:
        return HodlrMatrix(h.rows, h.cols, data=alpha * h.data)
    a21 = LowRankFactor(alpha * h.a21.u, h.a21.v)
    if h.a12.u is h.a21.v and h.a12.v is h.a21.u:
        a12 = _mirror(a21)
    else:
        a12 = LowRankFactor(alpha * h.a12.u, h.a12.v)
    return HodlrMatrix(h.rows, h.cols,
                       a11=scale(h.a11, alpha), a22=scale(h.a22, alpha),
                       a21=a21, a12=a12)


# ---------------------------------------------------------------------------
# addition / low-rank update
# ---------------------------------------------------------------------------

def add(h1, h2, cfg=DEFAULT_CONFIG):
    """h1 + h2 with blockwise re-truncation; trees must have identical shapes."""
    if h1.shape != h2.shape:
        raise ValueError("dimension mismatch in addition")
    if not _same_shape(h1, h2):
        raise ValueError("tree shapes differ; re-splitting is not supported")
    mirrored = _mirrored_tree(h1) and _mirrored_tree(h2)
    return _add(h1, h2, cfg, mirrored)


def _add(h1, h2, cfg, mirrored):
    if h1.is_leaf:
        return HodlrMatrix(h1.rows, h1.cols, data=h1.data + h2.data)
    a21 = _compress(np.hstack([h1.a21.u, h2.a21.u]),
                    np.hstack([h1.a21.v, h2.a21.v]), cfg)
    if mirrored:
        a12 = _mirror(a21)
    else:
        a12 = _compress(np.hstack([h1.a12.u, h2.a12.u]),
                        np.hstack([h1.a12.v, h2.a12.v]), cfg)
    return HodlrMatrix(h1.rows, h1.cols,
                       a11=_add(h1.a11, h2.a11, cfg, mirrored),
                       a22=_add(h1.a22, h2.a22, cfg, mirrored),
                       a21=a21, a12=a12)


def add_lowrank(h, u, v, cfg=DEFAULT_CONFIG):
    """h + u @ v.T distributed over the tree, re-truncating each factor."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    if u.ndim == 2 and u.shape[0] == 1 and h.rows > 1:
        u = u.T
    if v.ndim == 2 and v.shape[0] == 1 and h.cols > 1:
        v = v.T
    if u.shape[0] != h.rows or v.shape[0] != h.cols or u.shape[1] != v.shape[1]:
        raise ValueError("update factors have incompatible shapes")
    if h.is_leaf:
        dense.record_matmul(h.rows, u.shape[1], h.cols)
        return HodlrMatrix(h.rows, h.cols, data=h.data + u @ v.T)
    n1 = h.n1
    return HodlrMatrix(h.rows, h.cols,
                       a11=add_lowrank(h.a11, u[:n1], v[:n1], cfg),
                       a22=add_lowrank(h.a22, u[n1:], v[n1:], cfg),
                       a21=_compress(np.hstack([h.a21.u, u[n1:]]),
                                     np.hstack([h.a21.v, v[:n1]]), cfg),
                       a12=_compress(np.hstack([h.a12.u, u[:n1]]),
                                     np.hstack([h.a12.v, v[n1:]]), cfg))


# ---------------------------------------------------------------------------
# multiplication
# ---------------------------------------------------------------------------

def multiply(h1, h2, cfg=DEFAULT_CONFIG):
    """h1 @ h2 in HODLR arithmetic, re-truncated blockwise bottom-up."""
    if h1.cols != h2.rows:
        raise ValueError("dimension mismatch in multiplication")
    if not _same_shape(h1, h2):
        raise ValueError("tree shapes differ; re-splitting is not supported")
    return _multiply(h1, h2, cfg)


def _multiply(h1, h2, cfg):
    if h1.is_leaf:
        dense.record_matmul(h1.rows, h1.cols, h2.cols)
        return HodlrMatrix(h1.rows, h2.cols, data=h1.data @ h2.data)
    a, b = h1, h2
    # off-diagonal blocks of the product
    u12 = np.hstack([_matmat_rec(a.a11, b.a12.u), a.a12.u])
    v12 = np.hstack([b.a12.v, _matmat_t(b.a22, a.a12.v)])
    c12 = _compress(u12, v12, cfg)
    u21 = np.hstack([a.a21.u, _matmat_rec(a.a22, b.a21.u)])
    v21 = np.hstack([_matmat_t(b.a11, a.a21.v), b.a21.v])
    c21 = _compress(u21, v21, cfg)
    # diagonal blocks: recursive product plus one cross low-rank update
    c11 = _multiply(a.a11, b.a11, cfg)
    mix = a.a12.v.T @ b.a21.u
    dense.record_matmul(a.a12.rank, a.a12.v.shape[0], b.a21.rank)
    if mix.size:
        c11 = add_lowrank(c11, a.a12.u @ mix, b.a21.v, cfg)
    c22 = _multiply(a.a22, b.a22, cfg)
    mix = a.a21.v.T @ b.a12.u
    dense.record_matmul(a.a21.rank, a.a21.v.shape[0], b.a12.rank)
    if mix.size:
        c22 = add_lowrank(c22, a.a21.u @ mix, b.a12.v, cfg)
    return HodlrMatrix(h1.rows, h2.cols, a11=c11, a22=c22, a21=c21, a12=c12)


# ---------------------------------------------------------------------------
# solve / invert
# ---------------------------------------------------------------------------

def _solve_dense_rhs(h, b, cfg):
    """x with h @ x = b for a dense right-hand side, by recursive block SMW."""
    if h.is_leaf:
        return dense.solve_dense(h.data, b)
    n1 = h.n1
    x1 = _solve_dense_rhs(h.a11, b[:n1], cfg)
    x2 = _solve_dense_rhs(h.a22, b[n1:], cfg)
    k12, k21 = h.a12.rank, h.a21.rank
    if k12 == 0 and k21 == 0:
        return np.vstack([x1, x2])
    z1 = _solve_dense_rhs(h.a11, h.a12.u, cfg) if k12 else np.zeros((n1, 0))
    z2 = _solve_dense_rhs(h.a22, h.a21.u, cfg) if k21 else np.zeros((h.rows - n1, 0))
    cap = np.eye(k12 + k21)
    cap[:k12, k12:] += h.a12.v.T @ z2
    cap[k12:, :k12] += h.a21.v.T @ z1
    rhs = np.vstack([h.a12.v.T @ x2, h.a21.v.T @ x1])
    w = dense.solve_dense(cap, rhs)
    x1 = x1 - z1 @ w[:k12]
    x2 = x2 - z2 @ w[k12:]
    return np.vstack([x1, x2])


def solve(h, b, cfg=DEFAULT_CONFIG):
    """Solve h @ x = b; b may be a dense array (vector/matrix) or a HodlrMatrix.

    Dense right-hand sides use a recursive block solve; HODLR right-hand
    sides are handled as invert(h) @ b in hierarchical arithmetic.
    """
    if isinstance(b, HodlrMatrix):
        if h.cols != b.rows:
            raise ValueError("dimension mismatch in solve")
        return multiply(invert(h, cfg), b, cfg)
    b = np.asarray(b, dtype=float)
    single = b.ndim == 1
    bm = b[:, None] if single else b
    if bm.shape[0] != h.cols:
        raise ValueError("dimension mismatch in solve")
    x = _solve_dense_rhs(h, bm, cfg)
    return x[:, 0] if single else x


def invert(h, cfg=DEFAULT_CONFIG):
    """HODLR inverse by recursive block Sherman-Morrison-Woodbury."""
    if h.rows != h.cols:
        raise ValueError("only square matrices can be inverted")
    if h.is_leaf:
        return HodlrMatrix(h.rows, h.cols,
                           data=dense.solve_dense(h.data, np.eye(h.rows)))
    i11 = invert(h.a11, cfg)
    i22 = invert(h.a22, cfg)
    n1, n2 = h.n1, h.rows - h.n1
    k12, k21 = h.a12.rank, h.a21.rank
    base = HodlrMatrix(h.rows, h.cols, a11=i11, a22=i22,
                       a21=LowRankFactor.zero(n2, n1),
                       a12=LowRankFactor.zero(n1, n2))
    if k12 == 0 and k21 == 0:
        return base
    z1 = _matmat_rec(i11, h.a12.u) if k12 else np.zeros((n1, 0))
    z2 = _matmat_rec(i22, h.a21.u) if k21 else np.zeros((n2, 0))
    cap = np.eye(k12 + k21)
    cap[:k12, k12:] += h.a12.v.T @ z2
    cap[k12:, :k12] += h.a21.v.T @ z1
    t = dense.solve_dense(cap, np.eye(k12 + k21))
    g = np.zeros((h.rows, k12 + k21))
    g[:n1, :k12] = z1
    g[n1:, k12:] = z2
    r1 = _matmat_t(i11, h.a21.v) if k21 else np.zeros((n1, 0))
    r2 = _matmat_t(i22, h.a12.v) if k12 else np.zeros((n2, 0))
    vc = np.zeros((h.rows, k12 + k21))
    vc[:n1, k12:] = r1
    vc[n1:, :k12] = r2
    dense.record_matmul(h.rows, k12 + k21, k12 + k21)
    return add_lowrank(base, -(g @ t), vc, cfg)


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------

def _fro2(h):
    if h.is_leaf:
        return float(np.sum(h.data * h.data))
    total = _fro2(h.a11) + _fro2(h.a22)
    for f in (h.a21, h.a12):
        if f.rank:
            total += float(np.sum((f.u.T @ f.u) * (f.v.T @ f.v)))
    return total


def two_norm_est(h, tol=1e-3, max_iter=300, seed=0):
    """2-norm estimate by power iteration on h @ h.T with a fixed seed.

    A small subspace (block power iteration) is used so clustered leading
    singular values do not stall convergence below the 1e-3 target.
    """
    block = min(8, h.cols)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((h.cols, block))
    v, _ = np.linalg.qr(v)
    last = 0.0
    for _ in range(max_iter):
        w = _matmat(h, v)
        u = _matmat_t(h, w)
        est = np.sqrt(np.linalg.norm(u, 2))
        if est == 0.0:
            return 0.0
        v, _ = np.linalg.qr(u)
        if abs(est - last) <= 0.1 * tol * est:
            return est
        last = est
    return last


def norms(h):
    """(frobenius, two_norm_estimate); Frobenius is exact from the factors."""
    return np.sqrt(_fro2(h)), two_norm_est(h)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_MAGIC = b"QSH1"


def serialize(h, sink, block_size=None):
    """Write the tree to a binary stream (magic 'QSH1', little-endian).

    Header: magic, u64 rows, u64 cols, u32 block_size.  Nodes follow in
    pre-order: tag 0 = leaf (u64 r, u64 c, r*c f64), tag 1 = branch
    (for each of the a21/a12 factors: u32 rank, u64 m, u64 n, then u and v
    as f64 arrays; then the a11 and a22 subtrees).
    """
    bs = int(block_size) if block_size is not None else DEFAULT_CONFIG.block_size
    sink.write(_MAGIC)
    sink.write(struct.pack("<QQI", h.rows, h.cols, bs))
    _write_node(h, sink)


def _write_node(h, sink):
    if h.is_leaf:
        sink.write(struct.pack("<BQQ", 0, h.rows, h.cols))
        sink.write(np.ascontiguousarray(h.data, dtype="<f8").tobytes())
        return
    sink.write(struct.pack("<B", 1))
    for f in (h.a21, h.a12):
        sink.write(struct.pack("<IQQ", f.rank, f.u.shape[0], f.v.shape[0]))
        sink.write(np.ascontiguousarray(f.u, dtype="<f8").tobytes())
        sink.write(np.ascontiguousarray(f.v, dtype="<f8").tobytes())
    _write_node(h.a11, sink)
    _write_node(h.a22, sink)


class _Reader:
    def __init__(self, source):
        self.source = source
        self.offset = 0

    def read(self, n):
        buf = self.source.read(n)
        if len(buf) != n:
            raise FormatError(f"truncated stream at byte {self.offset}", offset=self.offset)
        self.offset += n
        return buf

    def unpack(self, fmt):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))

    def array(self, count):
        return np.frombuffer(self.read(8 * count), dtype="<f8").astype(float)


def deserialize(source):
    """Read a tree written by :func:`serialize`; round-trips bit-exactly."""
    r = _Reader(source)
    magic = r.read(4)
    if magic != _MAGIC:
        raise FormatError(f"bad magic bytes at byte 0: {magic!r}", offset=0)
    rows, cols, _bs = r.unpack("<QQI")
    h = _read_node(r)
    if h.rows != rows or h.cols != cols:
        raise FormatError(f"header dims {rows}x{cols} do not match tree "
                          f"{h.rows}x{h.cols} at byte {r.offset}", offset=r.offset)
    return h


def _read_node(r):
    (tag,) = r.unpack("<B")
    if tag == 0:
        rows, cols = r.unpack("<QQ")
        data = r.array(rows * cols).reshape(rows, cols)
        return HodlrMatrix(rows, cols, data=data)
    if tag != 1:
        raise FormatError(f"unknown node tag {tag} at byte {r.offset - 1}",
                          offset=r.offset - 1)
    factors = []
    for _ in range(2):
        rank, m, n = r.unpack("<IQQ")
        u = r.array(m * rank).reshape(m, rank)
        v = r.array(n * rank).reshape(n, rank)
        factors.append(LowRankFactor(u, v))
    a11 = _read_node(r)
    a22 = _read_node(r)
    rows = a11.rows + a22.rows
    cols = a11.cols + a22.cols
    return HodlrMatrix(rows, cols, a11=a11, a22=a22,
                       a21=factors[0], a12=factors[1])
