"""HODLR format: construction, truncated arithmetic, solve/invert, norms,
serialization.  Dense numpy arithmetic is the oracle throughout."""

import io

import numpy as np
import pytest

from qsylv import hodlr
from qsylv.errors import FormatError, SingularMatrixError
from qsylv.hodlr import (
    HodlrConfig,
    add,
    add_lowrank,
    deserialize,
    eye_like,
    from_banded,
    from_dense,
    from_function,
    hodlr_rank,
    invert,
    matvec,
    multiply,
    nbytes,
    norms,
    scale,
    serialize,
    solve,
    transpose,
)

CFG = HodlrConfig(threshold=1e-12, block_size=16)


def laplacian_diags(n, factor=1.0):
    return {0: 2.0 * factor * np.ones(n), 1: -factor * np.ones(n - 1),
            -1: -factor * np.ones(n - 1)}


def random_banded_dense(n, bw, seed):
    rng = np.random.default_rng(seed)
    a = np.zeros((n, n))
    for o in range(-bw, bw + 1):
        a += np.diag(rng.standard_normal(n - abs(o)), o)
    return a


def dense_of(diags, n):
    a = np.zeros((n, n))
    for o, v in diags.items():
        a += np.diag(v, o)
    return a


class TestFromDense:
    def test_identity_all_ranks_zero(self):
        h = from_dense(np.eye(1024), HodlrConfig(block_size=256))
        assert hodlr_rank(h) == 0

    def test_tridiagonal_rank_one(self):
        a = dense_of(laplacian_diags(128), 128)
        h = from_dense(a, CFG)
        assert hodlr_rank(h) == 1
        np.testing.assert_allclose(h.to_dense(), a, atol=1e-14)

    def test_log_kernel_rank_small(self):
        n = 300
        x = np.linspace(0, 1, n)
        c = np.log(1e-4 + np.abs(x[:, None] - x[None, :]))
        h = from_dense(c, HodlrConfig(threshold=1e-14, block_size=64))
        assert hodlr_rank(h) <= 20
        err = np.linalg.norm(h.to_dense() - c, 2)
        assert err <= 20 * 1e-14 * np.linalg.norm(c, 2)

    def test_reconstruction_error_bound(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((200, 200))
        cfg = HodlrConfig(threshold=1e-6, block_size=16)
        h = from_dense(a, cfg)
        depth = h.depth()
        err = np.linalg.norm(h.to_dense() - a, 2)
        assert err <= 10 * depth * cfg.threshold * np.linalg.norm(a, 2)

    def test_split_rule(self):
        h = from_dense(np.zeros((21, 21)), HodlrConfig(block_size=4))
        assert h.a11.rows == 10 and h.a22.rows == 11
        assert h.a11.a11.rows == 5 and h.a11.a22.rows == 5

    def test_symmetric_input_gives_mirrored_tree(self):
        rng = np.random.default_rng(1)
        m = rng.standard_normal((64, 64))
        h = from_dense(m + m.T, CFG)
        d = h.to_dense()
        np.testing.assert_array_equal(d, d.T)

    def test_nonsquare_rejected(self):
        with pytest.raises(ValueError):
            from_dense(np.zeros((4, 5)))


class TestFromBanded:
    def test_tridiagonal_exact(self):
        n = 2048
        diags = laplacian_diags(n)
        h = from_banded(diags, 1, HodlrConfig(block_size=256))
        assert hodlr_rank(h) == 1
        a = dense_of(diags, n)
        np.testing.assert_array_equal(h.to_dense(), a)

    @pytest.mark.parametrize("bw", [1, 2, 3, 4, 5, 6])
    def test_bandwidth_bound(self, bw):
        n = 512
        rng = np.random.default_rng(bw)
        diags = {o: rng.standard_normal(n - abs(o)) for o in range(-bw, bw + 1)}
        h = from_banded(diags, bw, HodlrConfig(block_size=32))
        assert hodlr_rank(h) <= bw
        np.testing.assert_allclose(h.to_dense(), dense_of(diags, n), atol=1e-13)

    def test_pentadiagonal_rank_two(self):
        n = 512
        rng = np.random.default_rng(42)
        diags = {o: rng.standard_normal(n - abs(o)) for o in (-2, -1, 0, 1, 2)}
        h = from_banded(diags, 2, HodlrConfig(block_size=64))
        assert hodlr_rank(h) <= 2

    def test_bandwidth_too_large_rejected(self):
        with pytest.raises(ValueError):
            from_banded(laplacian_diags(4), 4)

    def test_symmetric_band_mirrored(self):
        n = 96
        h = from_banded(laplacian_diags(n), 1, CFG)
        d = h.to_dense()
        np.testing.assert_array_equal(d, d.T)


class TestFromFunction:
    def test_separable_rank_one(self):
        n = 256
        x = np.linspace(0, 1, n)
        h = from_function(lambda a, b: a * b, x, x, HodlrConfig(block_size=32))
        assert hodlr_rank(h) == 1
        np.testing.assert_allclose(h.to_dense(), np.outer(x, x), atol=1e-12)

    def test_log_kernel_accuracy(self):
        n = 600
        x = np.linspace(0, 1, n)
        f = lambda a, b: np.log(1.0 + np.abs(a - b))
        cfg = HodlrConfig(threshold=1e-10, block_size=64)
        h = from_function(f, x, x, cfg, symmetric=True)
        exact = f(x[:, None], x[None, :])
        err = np.linalg.norm(h.to_dense() - exact, 2)
        assert err <= 50 * cfg.threshold * np.linalg.norm(exact, 2)
        assert 0 < hodlr_rank(h) <= 30

    def test_tau_sweep_rank_uniformly_bounded(self):
        n = 300
        x = np.linspace(0, 1, n)
        cfg = HodlrConfig(threshold=1e-14, block_size=256)
        ranks = []
        for tau in (1e-4, 1e-2, 1.0, 1e2, 1e6):
            h = from_function(lambda a, b, t=tau: np.log(t + np.abs(a - b)),
                              x, x, cfg, symmetric=True)
            ranks.append(hodlr_rank(h))
        assert max(ranks) <= 25
        assert ranks[-1] <= ranks[-2] <= ranks[-3]

    def test_symmetric_flag(self):
        n = 128
        x = np.linspace(0, 2, n)
        h = from_function(lambda a, b: np.cos(a - b), x, x, CFG, symmetric=True)
        d = h.to_dense()
        np.testing.assert_array_equal(d, d.T)


class TestArithmetic:
    @pytest.fixture()
    def pair(self):
        rng = np.random.default_rng(8)
        a = random_banded_dense(256, 2, 1)
        b = rng.standard_normal((256, 8))
        bd = b @ b.T + np.diag(np.linspace(1, 2, 256))
        return a, bd

    def test_add_matches_dense(self, pair):
        a, b = pair
        ha, hb = from_dense(a, CFG), from_dense(b, CFG)
        np.testing.assert_allclose(add(ha, hb, CFG).to_dense(), a + b,
                                   atol=1e-10 * np.linalg.norm(a + b, 2))

    def test_add_opposite_collapses_to_zero(self, pair):
        a, _ = pair
        ha = from_dense(a, CFG)
        z = add(ha, scale(ha, -1.0), CFG)
        assert hodlr_rank(z) == 0
        assert np.linalg.norm(z.to_dense()) == 0.0

    def test_multiply_identity(self, pair):
        a, _ = pair
        ha = from_dense(a, CFG)
        p = multiply(ha, eye_like(ha), CFG)
        np.testing.assert_allclose(p.to_dense(), a, atol=1e-11 * np.linalg.norm(a, 2))

    def test_multiply_matches_dense(self):
        n = 256
        a = random_banded_dense(n, 1, 3)
        b = random_banded_dense(n, 1, 4)
        ha = from_dense(a, CFG)
        hb = from_dense(b, CFG)
        p = multiply(ha, hb, CFG)
        rel = np.linalg.norm(p.to_dense() - a @ b, 2) / np.linalg.norm(a @ b, 2)
        assert rel <= 1e-11

    def test_matvec(self, pair):
        a, _ = pair
        ha = from_dense(a, CFG)
        rng = np.random.default_rng(5)
        x = rng.standard_normal(256)
        np.testing.assert_allclose(matvec(ha, x), a @ x, atol=1e-11 * np.linalg.norm(a @ x))

    def test_dense_equivalence_all_ops(self):
        # max relative deviation from dense arithmetic stays a small multiple
        # of depth * threshold across add/multiply on n <= 256
        rng = np.random.default_rng(12)
        n = 256
        cfg = HodlrConfig(threshold=1e-9, block_size=32)
        a = random_banded_dense(n, 3, 21)
        b = rng.standard_normal((n, 5))
        bmat = b @ b.T + np.eye(n)
        ha, hb = from_dense(a, cfg), from_dense(bmat, cfg)
        depth = ha.depth()
        bound = 50 * depth * cfg.threshold
        s = add(ha, hb, cfg).to_dense()
        assert np.linalg.norm(s - (a + bmat), 2) <= bound * np.linalg.norm(a + bmat, 2)
        p = multiply(ha, hb, cfg).to_dense()
        assert (np.linalg.norm(p - a @ bmat, 2)
                <= bound * np.linalg.norm(a, 2) * np.linalg.norm(bmat, 2))

    def test_subadditivity_of_ranks(self):
        n = 128
        for seed in range(3):
            a = random_banded_dense(n, 2, seed)
            b = random_banded_dense(n, 3, seed + 50)
            ha = from_dense(a, CFG)
            hb = from_dense(b, CFG)
            ra, rb = hodlr_rank(ha), hodlr_rank(hb)
            assert hodlr_rank(add(ha, hb, CFG)) <= ra + rb
            assert hodlr_rank(multiply(ha, hb, CFG)) <= ra + rb

    def test_symmetry_closure_of_add(self):
        n = 200
        a = dense_of(laplacian_diags(n), n)
        q = np.diag(np.linspace(1.0, 3.0, n))
        ha = from_dense(a, CFG)
        hq = from_dense(q, CFG)
        s = add(ha, hq, CFG).to_dense()
        np.testing.assert_array_equal(s, s.T)

    def test_shape_mismatch_rejected(self):
        h1 = from_dense(np.eye(32), CFG)
        h2 = from_dense(np.eye(48), CFG)
        with pytest.raises(ValueError):
            add(h1, h2, CFG)
        with pytest.raises(ValueError):
            multiply(h1, h2, CFG)

    def test_tree_shape_mismatch_rejected(self):
        h1 = from_dense(np.eye(64), HodlrConfig(block_size=16))
        h2 = from_dense(np.eye(64), HodlrConfig(block_size=32))
        with pytest.raises(ValueError):
            add(h1, h2, CFG)

    def test_transpose(self):
        a = random_banded_dense(100, 2, 9)
        h = from_dense(a, CFG)
        np.testing.assert_allclose(transpose(h).to_dense(), a.T, atol=1e-13)

    def test_add_lowrank(self):
        a = random_banded_dense(96, 1, 2)
        h = from_dense(a, CFG)
        rng = np.random.default_rng(0)
        u = rng.standard_normal((96, 2))
        v = rng.standard_normal((96, 2))
        out = add_lowrank(h, u, v, CFG)
        np.testing.assert_allclose(out.to_dense(), a + u @ v.T,
                                   atol=1e-11 * np.linalg.norm(a, 2))


class TestSolveInvert:
    def test_solve_identity(self):
        h = eye_like(from_dense(np.eye(128), CFG))
        rng = np.random.default_rng(1)
        b = rng.standard_normal((128, 3))
        np.testing.assert_allclose(solve(h, b, CFG), b)

    def test_invert_diagonal(self):
        d = np.linspace(1.0, 4.0, 64)
        h = from_dense(np.diag(d), CFG)
        np.testing.assert_allclose(invert(h, CFG).to_dense(), np.diag(1.0 / d),
                                   atol=1e-13)

    def test_solve_dense_rhs_residual(self):
        n = 256
        a = dense_of(laplacian_diags(n, (n - 1) ** 2), n)
        h = from_banded(laplacian_diags(n, (n - 1) ** 2), 1, CFG)
        rng = np.random.default_rng(3)
        b = rng.standard_normal((n, 4))
        x = solve(h, b, CFG)
        kappa = 4.0 / (2 - 2 * np.cos(np.pi / (n + 1)))  # ~ condition number
        assert np.linalg.norm(a @ x - b) <= 10 * kappa * CFG.threshold * np.linalg.norm(b)

    def test_invert_laplacian_roundtrip(self):
        n = 512
        fac = (n - 1) ** 2
        h = from_banded(laplacian_diags(n, fac), 1, HodlrConfig(block_size=64))
        hinv = invert(h, HodlrConfig(threshold=1e-12, block_size=64))
        prod = multiply(h, hinv, HodlrConfig(threshold=1e-12, block_size=64))
        err = np.linalg.norm(prod.to_dense() - np.eye(n), 2)
        assert err <= 1e-8

    def test_solve_hodlr_rhs(self):
        n = 128
        a = random_banded_dense(n, 1, 5) + 8 * np.eye(n)
        b = random_banded_dense(n, 2, 6)
        ha, hb = from_dense(a, CFG), from_dense(b, CFG)
        x = solve(ha, hb, CFG)
        rel = np.linalg.norm(a @ x.to_dense() - b, 2) / np.linalg.norm(b, 2)
        assert rel <= 1e-10 * np.linalg.cond(a)

    def test_singular_leaf_raises(self):
        a = np.zeros((64, 64))
        a[0, 0] = 1.0
        h = from_dense(a, CFG)
        with pytest.raises(SingularMatrixError):
            invert(h, CFG)


class TestNorms:
    def test_identity(self):
        h = from_dense(np.eye(100), CFG)
        fro, two = norms(h)
        assert abs(fro - 10.0) <= 1e-12
        assert abs(two - 1.0) <= 1e-2

    def test_scaled_diagonal(self):
        n = 64
        d = np.arange(1.0, n + 1)
        h = from_dense(np.diag(d), CFG)
        fro, two = norms(h)
        assert abs(fro - np.sqrt(np.sum(d**2))) <= 1e-12 * fro
        assert abs(two - n) <= 1e-2 * n

    def test_random_vs_dense_oracle(self):
        rng = np.random.default_rng(17)
        a = rng.standard_normal((128, 128))
        h = from_dense(a, HodlrConfig(threshold=1e-14, block_size=16))
        fro, two = norms(h)
        assert abs(fro - np.linalg.norm(a)) <= 1e-12 * fro
        assert abs(two - np.linalg.norm(a, 2)) <= 1e-2 * two


class TestSerialization:
    def roundtrip(self, h):
        buf = io.BytesIO()
        serialize(h, buf)
        buf.seek(0)
        return deserialize(buf)

    def assert_equal_trees(self, h1, h2):
        assert h1.shape == h2.shape
        assert h1.is_leaf == h2.is_leaf
        if h1.is_leaf:
            np.testing.assert_array_equal(h1.data, h2.data)
            return
        for f1, f2 in ((h1.a21, h2.a21), (h1.a12, h2.a12)):
            np.testing.assert_array_equal(f1.u, f2.u)
            np.testing.assert_array_equal(f1.v, f2.v)
        self.assert_equal_trees(h1.a11, h2.a11)
        self.assert_equal_trees(h1.a22, h2.a22)

    def test_roundtrip_identity(self):
        h = from_dense(np.eye(64), HodlrConfig(block_size=8))
        self.assert_equal_trees(h, self.roundtrip(h))

    def test_roundtrip_banded(self):
        n = 256
        rng = np.random.default_rng(4)
        diags = {o: rng.standard_normal(n - abs(o)) for o in range(-3, 4)}
        h = from_banded(diags, 3, HodlrConfig(block_size=32))
        self.assert_equal_trees(h, self.roundtrip(h))

    def test_corrupted_magic(self):
        buf = io.BytesIO()
        serialize(from_dense(np.eye(8), CFG), buf)
        raw = bytearray(buf.getvalue())
        raw[0:4] = b"XXXX"
        with pytest.raises(FormatError) as exc:
            deserialize(io.BytesIO(bytes(raw)))
        assert exc.value.offset == 0

    def test_truncated_stream(self):
        buf = io.BytesIO()
        serialize(from_dense(np.eye(32), HodlrConfig(block_size=8)), buf)
        raw = buf.getvalue()[:-16]
        with pytest.raises(FormatError) as exc:
            deserialize(io.BytesIO(raw))
        assert exc.value.offset is not None


class TestStorage:
    def test_storage_scaling_log_kernel(self):
        # bytes(H) for the Laplacian-equation kernel family grows like
        # n * log(n) * rank, not n^2
        sizes = (512, 1024, 2048, 4096)
        cfg = HodlrConfig(threshold=1e-12, block_size=256)
        measured = []
        for n in sizes:
            x = np.linspace(0, 1, n)
            h = from_function(lambda a, b: np.log(1 + np.abs(a - b)), x, x, cfg,
                              symmetric=True)
            measured.append(nbytes(h) / (n * np.log2(n) * max(hodlr_rank(h), 1)))
        assert max(measured) <= 10 * min(measured)
        dense_bytes = 8 * sizes[-1] ** 2
        x = np.linspace(0, 1, sizes[-1])
        h = from_function(lambda a, b: np.log(1 + np.abs(a - b)), x, x, cfg,
                          symmetric=True)
        assert nbytes(h) < dense_bytes / 4
