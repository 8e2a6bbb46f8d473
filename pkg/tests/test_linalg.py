import numpy as np
import pytest

from ifepanel import PanelDataset, eig_tail_sum, factor_estimates, kernel_weight, projectors, top_eigvecs
from ifepanel.errors import PanelValidationError
from ifepanel.linalg import KernelConfig, annihilate, fix_column_signs, orth_basis

from conftest import dense_projectors


class TestProjectors:
    def test_identity_span(self):
        pair = projectors(np.eye(3))
        assert np.allclose(pair.p, np.eye(3), atol=1e-12)
        assert np.allclose(pair.m, np.zeros((3, 3)), atol=1e-12)

    def test_zero_column(self):
        pair = projectors(np.zeros((3, 1)))
        assert np.allclose(pair.p, np.zeros((3, 3)), atol=1e-12)
        assert np.allclose(pair.m, np.eye(3), atol=1e-12)

    def test_hand_computed_span(self):
        # a (a'a)^-1 a' for a = (1, 1, 0)': the 2x2 upper block is 1/2.
        pair = projectors(np.array([[1.0], [1.0], [0.0]]))
        expected = np.array([[0.5, 0.5, 0.0], [0.5, 0.5, 0.0], [0.0, 0.0, 0.0]])
        assert np.allclose(pair.p, expected, atol=1e-12)

    def test_nonfinite_rejected(self):
        with pytest.raises(PanelValidationError):
            projectors(np.array([[1.0], [np.nan], [0.0]]))

    @pytest.mark.parametrize("shape", [(4, 1), (5, 2), (6, 3), (3, 0)])
    def test_projector_laws(self, rng, shape):
        a = rng.standard_normal(shape)
        if shape[1] >= 2:
            a[:, -1] = a[:, 0]  # force rank deficiency
        pair = projectors(a)
        scale = max(1.0, np.linalg.norm(pair.p, "fro"))
        assert np.linalg.norm(pair.p + pair.m - np.eye(shape[0]), "fro") < 1e-10 * scale
        assert np.linalg.norm(pair.p @ pair.p - pair.p, "fro") < 1e-10 * scale
        assert np.linalg.norm(pair.m @ pair.m - pair.m, "fro") < 1e-10 * scale
        assert np.linalg.norm(pair.p - pair.p.T, "fro") < 1e-10 * scale


class TestEigTailSum:
    def test_diagonal_cases(self):
        s = np.diag([3.0, 2.0, 1.0])
        assert eig_tail_sum(s, 1) == pytest.approx(3.0, abs=1e-12)
        assert eig_tail_sum(s, 3) == 0.0
        assert eig_tail_sum(s, 0) == pytest.approx(6.0, abs=1e-12)

    def test_matches_full_decomposition_oracle(self, rng):
        a = rng.standard_normal((5, 5))
        s = a + a.T
        vals = np.sort(np.linalg.eigvalsh(s))[::-1]
        expected = np.trace(s) - vals[0] - vals[1]
        assert eig_tail_sum(s, 2) == pytest.approx(expected, abs=1e-10)

    def test_trace_identity(self, rng):
        for _ in range(10):
            a = rng.standard_normal((4, 4))
            s = a + a.T
            assert eig_tail_sum(s, 0) == pytest.approx(np.trace(s), abs=1e-10)

    def test_rejects_bad_inputs(self):
        with pytest.raises(PanelValidationError):
            eig_tail_sum(np.array([[1.0, 2.0], [0.0, 1.0]]), 1)
        with pytest.raises(PanelValidationError):
            eig_tail_sum(np.eye(3), 4)
        with pytest.raises(PanelValidationError):
            eig_tail_sum(np.eye(3), -1)


class TestTopEigvecs:
    def test_dominant_axis(self):
        vecs, degenerate = top_eigvecs(np.diag([5.0, 1.0, 1.0]), 1)
        assert np.allclose(np.abs(vecs[:, 0]), [1.0, 0.0, 0.0], atol=1e-12)
        assert vecs[0, 0] > 0  # sign rule
        assert not degenerate

    def test_fully_degenerate_spectrum(self):
        vecs, degenerate = top_eigvecs(np.eye(3), 2)
        assert degenerate
        assert np.allclose(vecs.T @ vecs, np.eye(2), atol=1e-12)

    def test_projector_trace_identity(self, rng):
        a = rng.standard_normal((6, 6))
        s = a @ a.T + 0.1 * np.eye(6)
        vecs, _ = top_eigvecs(s, 2)
        m = np.eye(6) - vecs @ vecs.T
        assert eig_tail_sum(s, 2) == pytest.approx(np.trace(m @ s), abs=1e-10)

    def test_sign_rule(self, rng):
        a = rng.standard_normal((5, 5))
        s = a + a.T
        vecs, _ = top_eigvecs(s, 3)
        for j in range(3):
            col = vecs[:, j]
            assert col[np.argmax(np.abs(col))] > 0

    def test_zero_subspace(self):
        vecs, degenerate = top_eigvecs(np.eye(4), 0)
        assert vecs.shape == (4, 0)
        assert not degenerate


class TestKernelWeight:
    @pytest.mark.parametrize("lag,m,expected", [
        (0, 3, 1.0), (3, 3, 1.0), (4, 3, 0.0), (-3, 3, 1.0), (-4, 3, 0.0), (1, 1, 1.0), (2, 1, 0.0),
    ])
    def test_truncation(self, lag, m, expected):
        assert kernel_weight(lag, KernelConfig(m)) == expected

    def test_bandwidth_validated(self):
        with pytest.raises(PanelValidationError):
            KernelConfig(0)


def als_min_frobenius(z, r, rng, n_starts=12, iters=400):
    """Independent oracle for min over rank-r factorizations of |Z - L F'|_F^2.

    Alternating least squares from random starts; no eigen-decomposition
    involved. Converges to the global minimum for generic inputs.
    """
    n, t = z.shape
    if r == 0:
        return float(np.sum(z * z))
    best = np.inf
    for _ in range(n_starts):
        f = rng.standard_normal((t, r))
        for _ in range(iters):
            lam = z @ f @ np.linalg.pinv(f.T @ f)
            f = z.T @ lam @ np.linalg.pinv(lam.T @ lam)
        resid = z - lam @ f.T
        best = min(best, float(np.sum(resid * resid)))
    return best


class TestObjectiveEquivalenceSuite:
    def test_gram_side_and_trace_forms_agree(self, rng):
        for trial in range(25):
            n = int(rng.integers(3, 9))
            t = int(rng.integers(3, 9))
            r = int(rng.integers(0, min(3, min(n, t))))
            z = rng.standard_normal((n, t))
            tail_t = eig_tail_sum(z.T @ z, r)
            tail_n = eig_tail_sum(z @ z.T, r)
            scale = max(1.0, abs(tail_t))
            assert abs(tail_t - tail_n) < 1e-9 * scale
            d = PanelDataset(y=z, x=[np.zeros_like(z)])
            lam, f, _ = factor_estimates(np.zeros(1), d, r)
            p_lam, m_lam = dense_projectors(lam)
            p_f, m_f = dense_projectors(f)
            trace_form = np.trace(m_lam @ z @ m_f @ z.T)
            assert abs(tail_t - trace_form) < 1e-9 * scale

    def test_matches_direct_factor_minimization(self, rng):
        for trial in range(6):
            n = int(rng.integers(3, 7))
            t = int(rng.integers(3, 7))
            r = int(rng.integers(0, 3))
            r = min(r, min(n, t) - 1)
            z = rng.standard_normal((n, t))
            tail = eig_tail_sum(z.T @ z, r)
            oracle = als_min_frobenius(z, r, rng)
            assert tail == pytest.approx(oracle, rel=1e-6, abs=1e-9)


class TestHelpers:
    def test_annihilate_matches_dense_projectors(self, rng):
        x = rng.standard_normal((6, 5))
        a = rng.standard_normal((6, 2))
        b = rng.standard_normal((5, 1))
        qa, qb = orth_basis(a), orth_basis(b)
        _, m_a = dense_projectors(a)
        _, m_b = dense_projectors(b)
        assert np.allclose(annihilate(x, qa, qb), m_a @ x @ m_b, atol=1e-12)

    def test_fix_column_signs(self):
        v = np.array([[0.1, -0.9], [-0.8, 0.2]])
        out = fix_column_signs(v.copy())
        assert out[1, 0] > 0 and out[0, 1] > 0
