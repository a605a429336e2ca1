"""Rational matrix exponentials: Pade scaling-and-squaring and the
partial-fraction strategy, plus table generation/validation."""

import io

import numpy as np
import pytest

from qsylv import hodlr, ratexp
from qsylv.dense import sym_eig
from qsylv.hodlr import HodlrConfig, from_banded, from_dense, hodlr_rank
from qsylv.ratexp import (
    ChebyshevExpTable,
    PadeConfig,
    cf_exp_table,
    choose_strategy,
    expm_chebyshev,
    expm_pade,
)

CFG = HodlrConfig(threshold=1e-13, block_size=32)


def laplacian_hodlr(n, factor=1.0, block_size=32):
    diags = {0: 2.0 * factor * np.ones(n), 1: -factor * np.ones(n - 1),
             -1: -factor * np.ones(n - 1)}
    return from_banded(diags, 1, HodlrConfig(block_size=block_size))


def expm_oracle(a):
    w, q = sym_eig(a)
    return (q * np.exp(w)) @ q.T


class TestTables:
    @pytest.mark.parametrize("d", [8, 12, 14, 16])
    def test_builtin_tables_validate(self, d):
        table = ChebyshevExpTable.builtin(d)
        assert table.degree == d
        err = table.validate()
        assert err <= max(5.0 * 10.0 ** (-d), 3e-13)

    def test_generation_matches_builtin(self):
        fresh = cf_exp_table(12)
        shipped = ChebyshevExpTable.builtin(12)
        np.testing.assert_allclose(np.sort_complex(fresh.poles),
                                   np.sort_complex(shipped.poles), rtol=1e-9)

    def test_conjugate_pairs(self):
        table = ChebyshevExpTable.builtin(14)
        pairs, reals = table.conjugate_pairs()
        assert len(pairs) == 7 and not reals
        assert all(s.imag > 0 for s, _ in pairs)

    def test_roundtrip_text(self):
        table = ChebyshevExpTable.builtin(8)
        text = [f"{table.degree}"]
        for s, r in zip(table.poles, table.residues):
            text.append(f"{s.real:.17g} {s.imag:.17g} {r.real:.17g} {r.imag:.17g}")
        loaded = ChebyshevExpTable.load(io.StringIO("\n".join(text)))
        np.testing.assert_allclose(loaded.poles, table.poles)

    def test_corrupt_table_rejected(self):
        bad = "2\n-1.0 0.0 1.0 0.0\n-2.0 0.0 1.0 0.0\n"
        with pytest.raises(ValueError):
            ChebyshevExpTable.load(io.StringIO(bad))

    def test_unknown_builtin_degree(self):
        with pytest.raises(ValueError):
            ChebyshevExpTable.builtin(10)


class TestExpmPade:
    def test_zero_matrix(self):
        h = from_dense(np.zeros((48, 48)), CFG)
        np.testing.assert_allclose(expm_pade(h, CFG).to_dense(), np.eye(48),
                                   atol=1e-14)

    def test_diagonal(self):
        d = np.linspace(-2.0, 1.5, 40)
        h = from_dense(np.diag(d), CFG)
        np.testing.assert_allclose(expm_pade(h, CFG).to_dense(),
                                   np.diag(np.exp(d)), atol=1e-13)

    def test_negative_laplacian_vs_eig_oracle(self):
        n = 128
        a = -((np.diag(2.0 * np.ones(n)) + np.diag(-np.ones(n - 1), 1)
               + np.diag(-np.ones(n - 1), -1)))
        h = from_dense(a, CFG)
        e = expm_pade(h, CFG).to_dense()
        ref = expm_oracle(a)
        assert np.linalg.norm(e - ref, 2) <= 1e-11 * np.linalg.norm(ref, 2)

    def test_semigroup(self):
        n = 96
        rng = np.random.default_rng(2)
        m = rng.standard_normal((n, 4))
        a = -(m @ m.T + np.eye(n))
        h = from_dense(a, CFG)
        e1 = expm_pade(h, CFG)
        e2 = expm_pade(hodlr.scale(h, 2.0), CFG)
        lhs = hodlr.multiply(e1, e1, CFG).to_dense()
        assert np.linalg.norm(lhs - e2.to_dense(), 2) <= 1e-11

    def test_symmetric_output(self):
        h = laplacian_hodlr(64)
        e = expm_pade(hodlr.scale(h, -1.0), CFG).to_dense()
        assert np.linalg.norm(e - e.T, 2) <= 10 * CFG.threshold * np.linalg.norm(e, 2)

    def test_general_degree(self):
        d = np.linspace(-1.0, 0.5, 8)
        h = from_dense(np.diag(d), CFG)
        e = expm_pade(h, CFG, PadeConfig(degree=7)).to_dense()
        np.testing.assert_allclose(e, np.diag(np.exp(d)), atol=1e-10)


class TestExpmChebyshev:
    def test_identity_times_scalar(self):
        h = from_dense(np.eye(32), CFG)
        e = expm_chebyshev(1.0, h, ChebyshevExpTable.builtin(14), CFG)
        np.testing.assert_allclose(e.to_dense(), np.exp(-1.0) * np.eye(32),
                                   atol=1e-13)

    def test_wide_spectrum_uniform_accuracy(self):
        # eigenvalues spanning six orders of magnitude, accuracy independent
        # of the norm
        d = np.array([1.0, 1e3, 1e6])
        h = from_dense(np.diag(d), CFG)
        e = expm_chebyshev(1.0, h, ChebyshevExpTable.builtin(14), CFG).to_dense()
        expect = np.diag(np.exp(-d))
        assert np.max(np.abs(e - expect)) <= 1e-12

    def test_huge_t_decays_below_accuracy_floor(self):
        # t |H| ~ 1e9; the true exponential is far below the table accuracy
        n = 256
        h = laplacian_hodlr(n, factor=float((n - 1) ** 2), block_size=64)
        table = ChebyshevExpTable.builtin(14)
        e = expm_chebyshev(1e4, h, table, HodlrConfig(threshold=1e-13, block_size=64))
        fro, _ = hodlr.norms(e)
        assert fro <= np.sqrt(n) * 1e-12

    def test_tridiagonal_vs_eig_oracle(self):
        n = 96
        t = 0.37
        a = (np.diag(2.0 * np.ones(n)) + np.diag(-np.ones(n - 1), 1)
             + np.diag(-np.ones(n - 1), -1)) + 0.5 * np.eye(n)
        h = from_dense(a, CFG)
        e = expm_chebyshev(t, h, ChebyshevExpTable.builtin(14), CFG).to_dense()
        w, q = sym_eig(a)
        ref = (q * np.exp(-t * w)) @ q.T
        assert np.max(np.abs(e - ref)) <= 1e-12

    def test_symmetric_output(self):
        h = laplacian_hodlr(128, factor=5.0, block_size=32)
        e = expm_chebyshev(0.2, h, ChebyshevExpTable.builtin(14), CFG).to_dense()
        assert np.linalg.norm(e - e.T, 2) <= 1e-11

    def test_positive_diagonal(self):
        h = laplacian_hodlr(64)
        e = expm_chebyshev(0.5, h, ChebyshevExpTable.builtin(14), CFG).to_dense()
        assert np.all(np.diag(e) > 0)

    def test_non_spd_rejected(self):
        h = from_dense(-np.eye(16), CFG)
        with pytest.raises(ValueError):
            expm_chebyshev(1.0, h, ChebyshevExpTable.builtin(14), CFG)

    def test_nonpositive_t_rejected(self):
        h = from_dense(np.eye(8), CFG)
        with pytest.raises(ValueError):
            expm_chebyshev(0.0, h, ChebyshevExpTable.builtin(14), CFG)

    def test_solve_count_independent_of_t_and_norm(self):
        table = ChebyshevExpTable.builtin(14)
        counts = []
        for t, scale in ((1.0, 1.0), (1e6, 1.0), (1.0, 1e5), (3.14, 42.0)):
            h = from_dense(scale * np.eye(24) + np.diag(np.ones(23), 1)
                           + np.diag(np.ones(23), -1), CFG)
            before = ratexp.SOLVE_TALLY.count
            expm_chebyshev(t, h, table, CFG)
            counts.append(ratexp.SOLVE_TALLY.count - before)
        assert len(set(counts)) == 1
        assert counts[0] == 7  # ceil(14 / 2)


class TestChooseStrategy:
    def test_moderate_norm_pade(self):
        assert choose_strategy(1.0, 1.0) == "pade"

    def test_large_norm_chebyshev(self):
        assert choose_strategy(1.0, 1e6) == "chebyshev"

    def test_boundary_inclusive(self):
        assert choose_strategy(64.0, 1.0) == "pade"
        assert choose_strategy(64.0 + 1e-9, 1.0) == "chebyshev"
