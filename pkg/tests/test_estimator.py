import numpy as np
import pytest
import scipy.optimize

from ifepanel import (
    ModelSpec,
    PanelDataset,
    RestrictionSpec,
    factor_estimates,
    fit_at,
    minimize_profile,
    profile_gradient,
    profile_objective,
    restricted_minimize,
)
from ifepanel.errors import PanelValidationError
from ifepanel.estimator import OptimizerConfig, pooled_ols_vector

from conftest import dense_projectors, make_panel


def trace_form_oracle(z, r, rng, n_starts=12):
    """Direct numerical minimization of tr(Z M_f Z') over f, no eigensolver."""
    n, t = z.shape
    if r == 0:
        return float(np.sum(z * z))

    def value(f_flat):
        f = f_flat.reshape(t, r)
        _, m_f = dense_projectors(f)
        return float(np.trace(z @ m_f @ z.T))

    best = np.inf
    for _ in range(n_starts):
        res = scipy.optimize.minimize(value, rng.standard_normal(t * r), method="Nelder-Mead",
                                      options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 20000})
        best = min(best, res.fun)
    return best


class TestProfileObjective:
    def test_pure_factor_structure_reaches_zero(self, rng):
        d, lam, f, _ = make_panel(rng, 12, 9, k=1, beta=[0.0], r=2, noise=0.0)
        assert profile_objective(np.zeros(1), d, 2) < 1e-12

    def test_scalar_panel_reduces_to_squared_residual(self):
        d = PanelDataset(y=np.array([[2.0]]), x=[np.array([[1.0]])])
        assert profile_objective(np.array([1.0]), d, 0) == pytest.approx(1.0, abs=1e-15)

    def test_matches_trace_form_oracle(self):
        rng = np.random.default_rng(11)
        n, t, r = 5, 4, 1
        d = PanelDataset(y=rng.standard_normal((n, t)), x=[rng.standard_normal((n, t))])
        beta = np.array([0.3])
        value = profile_objective(beta, d, r)
        z = d.y - beta[0] * d.x[0]
        oracle = trace_form_oracle(z, r, rng) / (n * t)
        assert value == pytest.approx(oracle, rel=1e-9, abs=1e-12)

    def test_factor_count_bound(self, rng):
        d = PanelDataset(y=rng.standard_normal((6, 4)), x=[rng.standard_normal((6, 4))])
        with pytest.raises(PanelValidationError):
            profile_objective(np.zeros(1), d, 4)

    def test_transpose_symmetry(self, rng):
        d, *_ = make_panel(rng, 7, 5, k=2, r=1)
        beta = np.array([0.2, -0.4])
        a = profile_objective(beta, d, 1)
        b = profile_objective(beta, d.transposed(), 1)
        assert a == pytest.approx(b, abs=1e-10 * max(1.0, a))

    def test_monotone_in_factor_count(self, rng):
        d, *_ = make_panel(rng, 8, 7, k=1, r=2)
        beta = np.array([0.1])
        values = [profile_objective(beta, d, r) for r in range(4)]
        for lo, hi in zip(values[1:], values[:-1]):
            assert lo < hi

    def test_rotation_leaves_fitted_product_unchanged(self, rng):
        d, *_ = make_panel(rng, 9, 7, k=1, r=2)
        lam, f, _ = factor_estimates(np.array([0.3]), d, 2)
        a = rng.standard_normal((2, 2)) + 2 * np.eye(2)
        lam_rot = lam @ a.T
        f_rot = f @ np.linalg.inv(a)
        assert np.allclose(lam_rot @ f_rot.T, lam @ f.T, atol=1e-10)


class TestProfileGradient:
    def test_ols_case_matches_closed_form(self, rng):
        d, *_ = make_panel(rng, 6, 5, k=2, r=1)
        beta = np.array([0.4, -0.1])
        grad, degenerate = profile_gradient(beta, d, 0)
        resid = d.y - beta[0] * d.x[0] - beta[1] * d.x[1]
        nt = 30.0
        expected = [-2.0 / nt * np.sum(d.x[0] * resid), -2.0 / nt * np.sum(d.x[1] * resid)]
        assert np.allclose(grad, expected, atol=1e-12)
        assert not degenerate

    def test_central_differences(self, rng):
        checked = 0
        while checked < 12:
            n = int(rng.integers(6, 12))
            t = int(rng.integers(6, 12))
            r = int(rng.integers(0, 3))
            k = int(rng.integers(1, 3))
            d, *_ = make_panel(rng, n, t, k=k, r=max(r, 1))
            beta = rng.standard_normal(k) * 0.5
            grad, degenerate = profile_gradient(beta, d, r)
            if degenerate:
                continue
            step = 1e-6
            for j in range(k):
                up, dn = beta.copy(), beta.copy()
                up[j] += step
                dn[j] -= step
                fd = (profile_objective(up, d, r) - profile_objective(dn, d, r)) / (2 * step)
                assert grad[j] == pytest.approx(fd, rel=1e-5, abs=1e-9)
            checked += 1

    def test_vanishes_at_optimum(self, rng):
        d, *_ = make_panel(rng, 20, 12, k=1, r=1, noise=0.3)
        spec = ModelSpec(r=1)
        fit = minimize_profile(d, spec)
        grad, _ = profile_gradient(fit.beta_hat, d, 1)
        assert np.max(np.abs(grad)) < spec.optimizer.grad_tol


class TestMinimizeProfile:
    def test_noise_free_recovery(self):
        rng = np.random.default_rng(2)
        d, lam, f, beta = make_panel(rng, 40, 30, k=1, beta=[0.5], r=1, noise=0.0)
        fit = minimize_profile(d, ModelSpec(r=1))
        assert abs(fit.beta_hat[0] - 0.5) < 1e-6
        assert fit.converged

    def test_matches_grid_search(self):
        rng = np.random.default_rng(3)
        d, *_ = make_panel(rng, 6, 6, k=1, beta=[0.4], r=1, noise=0.05)
        fit = minimize_profile(d, ModelSpec(r=1))
        grid = np.arange(-1.0, 1.0 + 1e-9, 1e-3)
        values = [profile_objective(np.array([b]), d, 1) for b in grid]
        best = grid[int(np.argmin(values))]
        assert abs(fit.beta_hat[0] - best) <= 1e-3
        assert fit.objective <= min(values) + 1e-12

    def test_restarts_agree_on_well_behaved_instance(self):
        rng = np.random.default_rng(4)
        d, *_ = make_panel(rng, 25, 15, k=1, beta=[0.5], r=1, noise=0.2)
        fit = minimize_profile(d, ModelSpec(r=1, optimizer=OptimizerConfig(n_starts=5)))
        assert fit.n_restarts_agreeing == 5
        objectives = sorted(rec.objective for rec in fit.start_table)
        assert objectives[-1] - objectives[0] < 1e-6

    def test_objective_field_consistent(self, rng):
        d, *_ = make_panel(rng, 15, 10, k=2, r=1, noise=0.4)
        fit = minimize_profile(d, ModelSpec(r=1))
        assert fit.objective == pytest.approx(profile_objective(fit.beta_hat, d, 1), abs=1e-10)
        expected_resid = d.y - d.combine(fit.beta_hat) - fit.lambda_hat @ fit.f_hat.T
        assert np.allclose(fit.residuals, expected_resid, atol=1e-12)

    def test_r_zero_equals_closed_form(self, rng):
        d, *_ = make_panel(rng, 10, 8, k=2, r=1, noise=0.5)
        fit = minimize_profile(d, ModelSpec(r=0))
        assert np.allclose(fit.beta_hat, pooled_ols_vector(d), atol=1e-10)
        assert fit.lambda_hat.shape == (10, 0)

    def test_envelope_self_consistency(self, rng):
        d, *_ = make_panel(rng, 14, 11, k=2, r=1, noise=0.6)
        fit = minimize_profile(d, ModelSpec(r=1))
        nt = 14 * 11
        grad, _ = profile_gradient(fit.beta_hat, d, 1)
        for k in range(2):
            lhs = np.sum(d.x[k] * fit.residuals)
            assert lhs == pytest.approx(-nt / 2 * grad[k], abs=1e-8)


class TestFactorEstimates:
    def test_exact_product_recovery(self, rng):
        n, t, r = 10, 8, 2
        lam0 = rng.standard_normal((n, r))
        f0 = rng.standard_normal((t, r))
        d = PanelDataset(y=lam0 @ f0.T, x=[np.zeros((n, t))])
        lam, f, _ = factor_estimates(np.zeros(1), d, r)
        assert np.linalg.norm(lam @ f.T - lam0 @ f0.T, "fro") < 1e-10

    def test_zero_factor_request(self, rng):
        d, *_ = make_panel(rng, 6, 5)
        lam, f, degenerate = factor_estimates(np.zeros(1), d, 0)
        assert lam.shape == (6, 0) and f.shape == (5, 0) and not degenerate

    def test_tail_identity(self, rng):
        z = rng.standard_normal((8, 6))
        d = PanelDataset(y=z, x=[np.zeros((8, 6))])
        lam, f, _ = factor_estimates(np.zeros(1), d, 2)
        _, m_f = dense_projectors(f)
        from ifepanel import eig_tail_sum

        assert np.trace(z @ m_f @ z.T) == pytest.approx(eig_tail_sum(z.T @ z, 2), abs=1e-10)

    def test_normalization_and_loading_map(self, rng):
        z = rng.standard_normal((7, 9))  # N < T exercises the unit-side Gram
        d = PanelDataset(y=z, x=[np.zeros((7, 9))])
        lam, f, _ = factor_estimates(np.zeros(1), d, 2)
        assert np.allclose(f.T @ f / 9, np.eye(2), atol=1e-8)
        assert np.allclose(lam, z @ f / 9, atol=1e-10)
        # The fitted product is the closest rank-2 matrix (singular value oracle).
        u, s, vt = np.linalg.svd(z)
        truncated = (u[:, :2] * s[:2]) @ vt[:2]
        assert np.linalg.norm(lam @ f.T - truncated, "fro") < 1e-9

    def test_fit_at_matches_pieces(self, rng):
        d, *_ = make_panel(rng, 9, 7, k=1, r=1, noise=0.3)
        fr = fit_at(np.array([0.25]), d, ModelSpec(r=1))
        assert fr.objective == pytest.approx(profile_objective(np.array([0.25]), d, 1), abs=1e-14)


class TestRestrictedMinimize:
    def test_fully_pinned(self, rng):
        d, *_ = make_panel(rng, 10, 8, k=2, r=1, noise=0.4)
        beta0 = np.array([0.3, -0.2])
        rest = RestrictionSpec(h_matrix=np.eye(2), h_vector=beta0)
        fit = restricted_minimize(d, ModelSpec(r=1), rest)
        assert np.allclose(fit.beta_hat, beta0, atol=1e-12)
        assert fit.objective == pytest.approx(profile_objective(beta0, d, 1), abs=1e-12)

    def test_true_restriction_binds_at_truth(self):
        rng = np.random.default_rng(6)
        c = 0.37
        d, *_ = make_panel(rng, 30, 20, k=2, beta=[c, c], r=1, noise=0.0)
        rest = RestrictionSpec(h_matrix=[[1.0, -1.0]], h_vector=[0.0])
        fit = restricted_minimize(d, ModelSpec(r=1), rest)
        assert np.allclose(fit.beta_hat, [c, c], atol=1e-6)
        assert abs(fit.beta_hat[0] - fit.beta_hat[1]) < 1e-10

    def test_matches_one_dimensional_grid(self):
        rng = np.random.default_rng(7)
        d, *_ = make_panel(rng, 8, 7, k=2, beta=[0.2, 0.5], r=1, noise=0.05)
        rest = RestrictionSpec(h_matrix=[[1.0, 0.0]], h_vector=[0.2])
        fit = restricted_minimize(d, ModelSpec(r=1), rest)
        grid = np.arange(-1.0, 1.0 + 1e-9, 1e-3)
        values = [profile_objective(np.array([0.2, b]), d, 1) for b in grid]
        best = grid[int(np.argmin(values))]
        assert abs(fit.beta_hat[1] - best) <= 1e-3
        assert abs(fit.beta_hat[0] - 0.2) < 1e-10
