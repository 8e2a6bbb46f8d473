import math

import numpy as np
import pytest

from ifepanel import (
    EndogenousSpec,
    ModelSpec,
    PanelDataset,
    cce_pooled_ar1,
    lsmd_estimate,
    lsmd_step1,
    minimize_profile,
    pooled_ols,
)
from ifepanel.errors import PanelValidationError, SingularMatrixError
from ifepanel.estimator import OptimizerConfig

from conftest import make_panel

LEAN = OptimizerConfig(n_starts=2)


def endogenous_panel(rng, n, t, beta0=0.5, endo_strength=0.6, noise=1.0):
    """One endogenous regressor, one valid instrument kept aside."""
    lam = rng.standard_normal((n, 1))
    f = rng.standard_normal((t, 1))
    e = noise * rng.standard_normal((n, t))
    xi = rng.standard_normal((n, t))
    z = xi + 0.4 * rng.standard_normal((n, t))
    x = xi + endo_strength * e
    y = beta0 * x + lam @ f.T + e
    d = PanelDataset(y=y, x=[x])
    return d, z


class TestLsmdStep1:
    def test_valid_instrument_coefficient_vanishes_noise_free(self):
        rng = np.random.default_rng(31)
        n, t = 25, 15
        lam = rng.standard_normal((n, 1))
        f = rng.standard_normal((t, 1))
        x = rng.standard_normal((n, t))
        z = rng.standard_normal((n, t))
        beta0 = 0.5
        d = PanelDataset(y=beta0 * x + lam @ f.T, x=[x])
        es = EndogenousSpec(endog_idx=(0,), instruments=[z])
        _, gamma, _ = lsmd_step1(np.array([beta0]), d, ModelSpec(r=1, optimizer=LEAN), es)
        assert np.max(np.abs(gamma)) < 1e-8

    def test_instrument_duplicating_exogenous_regressor_errors(self):
        rng = np.random.default_rng(32)
        d, lam, f, beta = make_panel(rng, 15, 10, k=2, beta=[0.5, -0.3], r=1, noise=0.5)
        es = EndogenousSpec(endog_idx=(0,), instruments=[d.x[1].copy()])
        with pytest.raises(SingularMatrixError, match="collinear"):
            lsmd_step1(np.array([0.5]), d, ModelSpec(r=1, optimizer=LEAN), es)

    def test_matches_direct_reestimation_oracle(self):
        rng = np.random.default_rng(33)
        d, z = endogenous_panel(rng, 20, 12)
        es = EndogenousSpec(endog_idx=(0,), instruments=[z])
        spec = ModelSpec(r=1, optimizer=LEAN)
        wrong = np.array([0.1])
        _, gamma, _ = lsmd_step1(wrong, d, spec, es)
        assert np.max(np.abs(gamma)) > 1e-3
        partialled = PanelDataset(y=d.y - wrong[0] * d.x[0], x=[z])
        oracle = minimize_profile(partialled, spec)
        assert gamma[0] == pytest.approx(oracle.beta_hat[0], abs=1e-8)


class TestLsmdEstimate:
    def test_just_identified_weight_invariance(self):
        rng = np.random.default_rng(34)
        d, z = endogenous_panel(rng, 30, 12)
        spec = ModelSpec(r=1, optimizer=LEAN)
        res_id = lsmd_estimate(d, spec, EndogenousSpec(endog_idx=(0,), instruments=[z]))
        res_w = lsmd_estimate(
            d, spec, EndogenousSpec(endog_idx=(0,), instruments=[z], weight=np.array([[3.7]]))
        )
        assert res_id.beta_end[0] == pytest.approx(res_w.beta_end[0], abs=1e-6)
        assert np.linalg.norm(res_id.gamma_path[-1][1]) < 1e-5

    def test_recovers_truth_under_endogeneity(self):
        rng = np.random.default_rng(35)
        d, z = endogenous_panel(rng, 50, 20)
        spec = ModelSpec(r=1, optimizer=LEAN)
        plain = minimize_profile(d, spec)
        res = lsmd_estimate(d, spec, EndogenousSpec(endog_idx=(0,), instruments=[z]))
        assert abs(res.beta_end[0] - 0.5) < abs(plain.beta_hat[0] - 0.5)
        assert res.final_fit.beta_hat.size == 0  # no exogenous regressors kept

    def test_agrees_with_plain_fit_when_exogenous(self):
        diffs = []
        for rep in range(25):
            rng = np.random.default_rng(3600 + rep)
            n, t = 25, 12
            lam = rng.standard_normal((n, 1))
            f = rng.standard_normal((t, 1))
            e = rng.standard_normal((n, t))
            x = rng.standard_normal((n, t))
            z = x + 0.5 * rng.standard_normal((n, t))
            d = PanelDataset(y=0.5 * x + lam @ f.T + e, x=[x])
            spec = ModelSpec(r=1, optimizer=LEAN)
            plain = minimize_profile(d, spec).beta_hat[0]
            lsmd = lsmd_estimate(d, spec, EndogenousSpec(endog_idx=(0,), instruments=[z])).beta_end[0]
            diffs.append(lsmd - plain)
        diffs = np.asarray(diffs)
        se = diffs.std(ddof=1) / math.sqrt(diffs.size)
        assert abs(diffs.mean()) < max(2 * se, 5e-3)


class TestPooledOls:
    def test_exact_fit(self):
        x = np.arange(12, dtype=float).reshape(3, 4) + 1.0
        d = PanelDataset(y=2.0 * x, x=[x])
        assert pooled_ols(d)[0] == pytest.approx(2.0, abs=1e-12)

    def test_matches_normal_equations_oracle(self, rng):
        d, *_ = make_panel(rng, 9, 7, k=2, r=1, noise=0.8)
        beta = pooled_ols(d)
        gram = np.zeros((2, 2))
        rhs = np.zeros(2)
        for a in range(2):
            rhs[a] = np.sum(d.x[a] * d.y)
            for b in range(2):
                gram[a, b] = np.sum(d.x[a] * d.x[b])
        assert np.allclose(beta, np.linalg.solve(gram, rhs), atol=1e-10)

    def test_zero_regressor_rejected(self, rng):
        d = PanelDataset(y=rng.standard_normal((5, 4)), x=[np.zeros((5, 4))])
        with pytest.raises(SingularMatrixError):
            pooled_ols(d)

    def test_equals_zero_factor_profile_fit(self, rng):
        d, *_ = make_panel(rng, 10, 8, k=2, r=1, noise=0.5)
        fit = minimize_profile(d, ModelSpec(r=0))
        assert np.allclose(pooled_ols(d), fit.beta_hat, atol=1e-8)


class TestCcePooled:
    def test_single_unit_rejected(self):
        d = PanelDataset(y=np.arange(8.0).reshape(1, 8), x=[np.ones((1, 8))])
        with pytest.raises(PanelValidationError, match="N >= 2"):
            cce_pooled_ar1(d)

    def test_matches_full_design_matrix_oracle(self, rng):
        n, t = 5, 6
        y = rng.standard_normal((n, t))
        x = rng.standard_normal((n, t))
        d = PanelDataset(y=y, x=[x])
        rho = cce_pooled_ar1(d)
        # Big regression: outcome on the lag plus unit-specific loadings on
        # the two cross-sectional-average proxies.
        fp = np.column_stack([y.mean(axis=0), x.mean(axis=0)])
        rows = []
        target = []
        for i in range(n):
            for s in range(t):
                row = np.zeros(1 + 2 * n)
                row[0] = x[i, s]
                row[1 + 2 * i] = fp[s, 0]
                row[2 + 2 * i] = fp[s, 1]
                rows.append(row)
                target.append(y[i, s])
        coef, *_ = np.linalg.lstsq(np.asarray(rows), np.asarray(target), rcond=None)
        assert rho == pytest.approx(coef[0], abs=1e-10)

    def test_invariant_to_unit_relabeling(self, rng):
        n, t = 6, 7
        y = rng.standard_normal((n, t))
        x = rng.standard_normal((n, t))
        rho = cce_pooled_ar1(PanelDataset(y=y, x=[x]))
        perm = rng.permutation(n)
        rho_perm = cce_pooled_ar1(PanelDataset(y=y[perm], x=[x[perm]]))
        assert rho == pytest.approx(rho_perm, abs=1e-12)
