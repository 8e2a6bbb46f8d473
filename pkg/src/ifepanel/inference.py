"""Bias and variance estimation, corrected point estimates, and tests.

The least-squares estimator of the coefficients carries three first-order
bias terms: a serial-correlation term driven by predetermined regressors
(estimated with a truncation kernel over future lags), and two
heteroscedasticity terms across units and across periods. All three are
formed from the fitted loadings, factors, and residuals; the Hessian and
score-variance estimates follow the familiar sandwich pattern.

Three test statistics for a linear hypothesis H beta = h are provided in
uncorrected and bias-corrected variants. The corrected Wald statistic uses
the corrected point estimate; the corrected likelihood-ratio statistic
recentres the objective's argument by the estimated bias before both
minimizations; the corrected score statistic shifts the scaled gradient by
twice the bias estimate at the restricted fit.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg
from scipy.stats import chi2

from .data import ModelSpec, PanelDataset, RestrictionSpec, resolve_bandwidth, validate_dataset
from .errors import NumericalError, PanelValidationError, PanelWarning, SingularMatrixError
from .estimator import (
    FitResult,
    _minimize_affine,
    factor_estimates,
    minimize_profile,
    parallel_map,
    profile_objective,
    restricted_minimize,
    restriction_parameterization,
)
from .linalg import KernelConfig, annihilate, orth_basis

CONDITION_LIMIT = 1e12

# Small negative corrected-LR values are optimizer noise and clipped; values
# below this threshold indicate a failed minimization.
LR_NEGATIVE_TOL = -1e-8


@dataclass
class InferenceResult:
    """Sandwich pieces, bias estimates, and the corrected coefficient vector."""

    w_hat: np.ndarray
    omega_hat: np.ndarray
    b1_hat: np.ndarray
    b2_hat: np.ndarray
    b3_hat: np.ndarray
    kappa: float
    beta_star: np.ndarray
    cov_star: np.ndarray
    std_err: np.ndarray
    bandwidth_used: int

    @property
    def b_combined(self) -> np.ndarray:
        """The single bias vector combining all three terms at sqrt(NT) scale."""
        return -self.kappa * self.b1_hat - self.b2_hat / self.kappa - self.kappa * self.b3_hat


@dataclass
class TestResult:
    statistic: float
    df: int
    p_value: float
    variant: str
    c_hat: Optional[float] = None


def _fit_bases(fit: FitResult):
    return orth_basis(fit.lambda_hat), orth_basis(fit.f_hat)


def _xhat_list(fit: FitResult, d: PanelDataset):
    q_lam, q_f = _fit_bases(fit)
    return [annihilate(xk, q_lam, q_f) for xk in d.x]


def _pair_sums(mats_a, mats_b, weight=None):
    k = len(mats_a)
    out = np.empty((k, k))
    for a in range(k):
        for b in range(a, k):
            prod = mats_a[a] * mats_b[b]
            if weight is not None:
                prod = prod * weight
            out[a, b] = out[b, a] = float(np.sum(prod))
    return out


def _guarded_condition(mat, name, floor=0.0):
    """Raise when the symmetric matrix is numerically singular.

    ``floor`` is an absolute eigenvalue threshold (for matrices whose natural
    scale is known externally, e.g. projected-out regressors leaving a
    uniformly tiny Hessian)."""
    vals = np.linalg.eigvalsh(0.5 * (mat + mat.T))
    lo, hi = vals[0], vals[-1]
    if hi <= floor or lo <= floor or lo <= 0 or hi / lo > CONDITION_LIMIT:
        raise SingularMatrixError(
            f"{name} is singular or ill-conditioned (condition number above "
            f"{CONDITION_LIMIT:.0e}); check for collinear regressors via the diagnostics"
        )


def _negligible_objective(value, d: PanelDataset) -> bool:
    """Objective values at rounding scale relative to the outcome are a perfect fit."""
    scale = float(np.mean(d.y * d.y)) + 1e-300
    return value <= 1e-12 * scale


def w_hat(fit: FitResult, d: PanelDataset, guard=True) -> np.ndarray:
    """Approximate Hessian: mean outer product of the doubly projected regressors.

    With ``guard`` set (the default), a singular or ill-conditioned result
    raises instead of being returned, since every downstream use inverts it.
    The guard compares against the unprojected regressor scale, so regressors
    entirely absorbed by the factor structure are reported as collinear.
    """
    nt = d.n_units * d.n_periods
    xhats = _xhat_list(fit, d)
    out = _pair_sums(xhats, xhats) / nt
    if guard:
        raw_scale = max(float(np.sum(xk * xk)) for xk in d.x) / nt
        _guarded_condition(out, "the Hessian estimate", floor=1e-12 * raw_scale)
    return out


def omega_hat(fit: FitResult, d: PanelDataset) -> np.ndarray:
    """Score-variance estimate: residual-squared weighted analog of the Hessian."""
    nt = d.n_units * d.n_periods
    xhats = _xhat_list(fit, d)
    return _pair_sums(xhats, xhats, weight=fit.residuals**2) / nt


def bias_hats(fit: FitResult, d: PanelDataset, cfg: KernelConfig):
    """The three bias-component estimates (each a K-vector).

    The first sums kernel-weighted products of residuals with future
    regressor values through the factor projector (lags 1..M only); the
    second and third weight diagonal entries of loading/factor-side
    smoothing matrices by squared residuals.
    """
    n, t = d.n_units, d.n_periods
    if cfg.bandwidth_m >= t:
        warnings.warn(
            f"bandwidth M={cfg.bandwidth_m} is at least T={t}; the truncation kernel "
            "saturates and the bandwidth no longer controls anything",
            PanelWarning,
        )
    k = d.n_regressors
    e = fit.residuals
    lam, f = fit.lambda_hat, fit.f_hat
    r = lam.shape[1]
    b1 = np.zeros(k)
    b2 = np.zeros(k)
    b3 = np.zeros(k)
    if r == 0:
        return b1, b2, b3
    q_lam, q_f = _fit_bases(fit)
    p_f = q_f @ q_f.T
    lags = np.subtract.outer(np.arange(t), np.arange(t))  # lags[t, s] = t - s
    future = (-lags >= 1) & (-lags <= cfg.bandwidth_m)
    w_mat = np.where(future, p_f, 0.0)
    ew = e @ w_mat
    e2 = e**2
    row_e2 = e2.sum(axis=1)  # per unit
    col_e2 = e2.sum(axis=0)  # per period
    ff_inv = np.linalg.pinv(f.T @ f)
    ll_inv = np.linalg.pinv(lam.T @ lam)
    smooth_cols = f @ ff_inv @ ll_inv  # T x R
    smooth_rows = lam @ ll_inv @ ff_inv  # N x R
    for kk in range(k):
        xk = d.x[kk]
        b1[kk] = float(np.sum(ew * xk)) / n
        left = annihilate(xk, q_lam, None) @ smooth_cols  # N x R
        b2[kk] = float(np.dot(row_e2, np.sum(left * lam, axis=1))) / t
        right = annihilate(xk.T, q_f, None) @ smooth_rows  # T x R
        b3[kk] = float(np.dot(col_e2, np.sum(right * f, axis=1))) / n
    return b1, b2, b3


def bias_corrected(fit: FitResult, d: PanelDataset, cfg: KernelConfig) -> InferenceResult:
    """Corrected coefficients and sandwich covariance from a completed fit.

    beta_star = beta_hat + W^-1 (B1/T + B2/N + B3/T); the covariance of the
    corrected estimate is W^-1 Omega W^-1 / (NT).
    """
    n, t = d.n_units, d.n_periods
    nt = n * t
    w = w_hat(fit, d)
    om = omega_hat(fit, d)
    b1, b2, b3 = bias_hats(fit, d, cfg)
    cho = scipy.linalg.cho_factor(w)
    correction = scipy.linalg.cho_solve(cho, b1 / t + b2 / n + b3 / t)
    w_inv = scipy.linalg.cho_solve(cho, np.eye(w.shape[0]))
    cov_star = w_inv @ om @ w_inv / nt
    cov_star = 0.5 * (cov_star + cov_star.T)
    return InferenceResult(
        w_hat=w,
        omega_hat=om,
        b1_hat=b1,
        b2_hat=b2,
        b3_hat=b3,
        kappa=float(np.sqrt(n / t)),
        beta_star=fit.beta_hat + correction,
        cov_star=cov_star,
        std_err=np.sqrt(np.clip(np.diag(cov_star), 0.0, None)),
        bandwidth_used=cfg.bandwidth_m,
    )


def jackknife(d: PanelDataset, spec: ModelSpec, threads=None) -> np.ndarray:
    """Split-panel jackknife coefficients: 3 b_full - mean(time halves) - mean(unit halves).

    Odd panel dimensions are trimmed by dropping the last unit or period with
    a warning; all five fits run on the trimmed panel with the same settings.
    """
    d = validate_dataset(d)
    n, t = d.n_units, d.n_periods
    n_eff = n - (n % 2)
    t_eff = t - (t % 2)
    if n_eff != n or t_eff != t:
        warnings.warn(
            f"jackknife needs even panel dimensions; using N={n_eff}, T={t_eff}",
            PanelWarning,
        )
    if n_eff < 4 or t_eff < 4:
        raise PanelValidationError("panel too small to split for the jackknife")

    def subpanel(rows, cols):
        return PanelDataset(
            y=d.y[rows][:, cols].copy(),
            x=[xk[rows][:, cols].copy() for xk in d.x],
            regressor_names=list(d.regressor_names),
            low_rank_flags=list(d.low_rank_flags),
        )

    all_rows = np.arange(n_eff)
    all_cols = np.arange(t_eff)
    jobs = [
        ("full panel", all_rows, all_cols),
        ("first time half", all_rows, all_cols[: t_eff // 2]),
        ("second time half", all_rows, all_cols[t_eff // 2 :]),
        ("first unit half", all_rows[: n_eff // 2], all_cols),
        ("second unit half", all_rows[n_eff // 2 :], all_cols),
    ]

    def run(job):
        label, rows, cols = job
        try:
            return minimize_profile(subpanel(rows, cols), spec).beta_hat
        except Exception as exc:
            raise NumericalError(f"jackknife subfit failed on the {label}: {exc}") from exc

    betas = parallel_map(run, jobs, threads=threads)
    full, t1, t2, n1, n2 = betas
    return 3.0 * full - 0.5 * (t1 + t2) - 0.5 * (n1 + n2)


def _chi2_result(stat, df, variant, c_hat=None) -> TestResult:
    stat = float(max(0.0, stat))
    return TestResult(
        statistic=stat,
        df=int(df),
        p_value=float(chi2.sf(stat, df)),
        variant=variant,
        c_hat=c_hat,
    )


def _sandwich_quadform(hd, w, om, h_mat, nt):
    """nt * hd'(H W^-1 Om W^-1 H')^-1 hd for the restriction deviation hd = H beta - h."""
    if np.linalg.norm(hd) == 0.0:
        return 0.0
    w_inv_ht = np.linalg.solve(w, h_mat.T)
    middle = w_inv_ht.T @ om @ w_inv_ht
    _guarded_condition(middle, "the test's inner matrix")
    sol = np.linalg.solve(middle, hd)
    return nt * float(hd @ sol)


def wald_star(fit: FitResult, inf: InferenceResult, rest: RestrictionSpec) -> TestResult:
    """Bias-corrected Wald statistic: quadratic form in H beta_star - h."""
    if rest.h_matrix.shape[1] != fit.beta_hat.size:
        raise PanelValidationError("restriction dimension does not match the fit")
    nt = _nt_from(fit)
    hd = rest.h_matrix @ inf.beta_star - rest.h_vector
    stat = _sandwich_quadform(hd, inf.w_hat, inf.omega_hat, rest.h_matrix, nt)
    return _chi2_result(stat, rest.n_restrictions, "WD*")


def wald_uncorrected(fit: FitResult, inf: InferenceResult, rest: RestrictionSpec) -> TestResult:
    nt = _nt_from(fit)
    hd = rest.h_matrix @ fit.beta_hat - rest.h_vector
    stat = _sandwich_quadform(hd, inf.w_hat, inf.omega_hat, rest.h_matrix, nt)
    return _chi2_result(stat, rest.n_restrictions, "WD")


def _nt_from(fit):
    return fit.residuals.shape[0] * fit.residuals.shape[1]


def _ensure_fit_inf(d, spec, fit, inf):
    if fit is None:
        fit = minimize_profile(d, spec)
    if inf is None:
        inf = bias_corrected(fit, d, resolve_bandwidth(spec.bandwidth, d.n_periods))
    return fit, inf


def lr_star(d: PanelDataset, spec: ModelSpec, rest: RestrictionSpec,
            fit: FitResult = None, inf: InferenceResult = None,
            use_restricted_shift=False) -> TestResult:
    """Bias-corrected likelihood-ratio statistic.

    Both minimizations evaluate the objective at a bias-recentred argument
    beta + (NT)^-1/2 W^-1 B; the shift is built from the unrestricted fit and
    held fixed (``use_restricted_shift=True`` instead builds it from the
    restricted fit, an alternative whose power properties are not
    characterized). Valid under homoscedastic errors, where the scale
    estimate c_hat is the unrestricted objective value.
    """
    d = validate_dataset(d)
    fit, inf = _ensure_fit_inf(d, spec, fit, inf)
    n, t = d.n_units, d.n_periods
    nt = n * t
    if use_restricted_shift:
        rfit = restricted_minimize(d, spec, rest)
        rinf = bias_corrected(rfit, d, resolve_bandwidth(spec.bandwidth, t))
        shift = np.linalg.solve(rinf.w_hat, rinf.b_combined) / np.sqrt(nt)
    else:
        shift = np.linalg.solve(inf.w_hat, inf.b_combined) / np.sqrt(nt)
    c_hat = fit.objective
    if _negligible_objective(c_hat, d):
        # Perfect fit: both shifted minima are zero and the statistic is degenerate.
        return _chi2_result(0.0, rest.n_restrictions, "LR*", c_hat=c_hat)
    k = d.n_regressors
    records_full = _minimize_affine(
        d, spec.r, spec.optimizer, np.zeros(k), np.eye(k),
        shift=shift, extra_starts=[fit.beta_hat - shift],
    )
    min_full = records_full[0].objective
    particular, basis = restriction_parameterization(rest, k)
    if basis.shape[1] == 0:
        min_restricted = profile_objective(particular + shift, d, spec.r)
    else:
        rfit0 = restricted_minimize(d, spec, rest)
        theta0, *_ = np.linalg.lstsq(basis, rfit0.beta_hat - particular, rcond=None)
        records_rest = _minimize_affine(
            d, spec.r, spec.optimizer, particular, basis,
            shift=shift, extra_starts=[theta0],
        )
        min_restricted = records_rest[0].objective
    raw = nt * (min_restricted - min_full) / c_hat
    if raw < LR_NEGATIVE_TOL:
        raise NumericalError(
            f"corrected LR statistic is {raw:.3e} < 0; restricted minimization failed"
        )
    return _chi2_result(raw, rest.n_restrictions, "LR*", c_hat=c_hat)


def lr_uncorrected(d: PanelDataset, spec: ModelSpec, rest: RestrictionSpec,
                   fit: FitResult = None) -> TestResult:
    """Likelihood-ratio statistic: scaled objective difference restricted vs full."""
    d = validate_dataset(d)
    if fit is None:
        fit = minimize_profile(d, spec)
    c_hat = fit.objective
    if _negligible_objective(c_hat, d):
        return _chi2_result(0.0, rest.n_restrictions, "LR", c_hat=c_hat)
    rfit = restricted_minimize(d, spec, rest)
    nt = d.n_units * d.n_periods
    raw = nt * (rfit.objective - fit.objective) / c_hat
    if raw < LR_NEGATIVE_TOL:
        raise NumericalError(
            f"LR statistic is {raw:.3e} < 0; restricted minimization failed"
        )
    return _chi2_result(raw, rest.n_restrictions, "LR", c_hat=c_hat)


def _score_vector(fit: FitResult, d: PanelDataset):
    """Gradient of the full least-squares objective at the fitted incidentals."""
    nt = d.n_units * d.n_periods
    xs = d.regressor_array()
    return -2.0 / nt * np.tensordot(xs, fit.residuals, axes=([1, 2], [0, 1]))


def _lm_statistic(rfit, d, rest, b_tilde):
    # A perfect restricted fit has zero gradient and zero bias by definition;
    # short-circuit before the (then-degenerate) variance algebra.
    if float(np.max(np.abs(rfit.residuals))) <= 1e-12 * (1.0 + float(np.max(np.abs(d.y)))):
        return 0.0
    n, t = d.n_units, d.n_periods
    nt = n * t
    grad = _score_vector(rfit, d)
    vec = np.sqrt(nt) * grad + 2.0 * b_tilde
    w_t = w_hat(rfit, d)
    om_t = omega_hat(rfit, d)
    h_mat = rest.h_matrix
    w_inv_vec = np.linalg.solve(w_t, vec)
    hv = h_mat @ w_inv_vec
    if np.linalg.norm(hv) == 0.0:
        return 0.0
    w_inv_ht = np.linalg.solve(w_t, h_mat.T)
    middle = w_inv_ht.T @ om_t @ w_inv_ht
    _guarded_condition(middle, "the test's inner matrix")
    return 0.25 * float(hv @ np.linalg.solve(middle, hv))


def lm_star(d: PanelDataset, spec: ModelSpec, rest: RestrictionSpec,
            cfg: KernelConfig = None, rfit: FitResult = None) -> TestResult:
    """Bias-corrected score statistic from the restricted fit.

    All ingredients (gradient, Hessian, score variance, bias) are evaluated
    at the restricted estimate; the scaled gradient is shifted by twice the
    combined bias estimate.
    """
    d = validate_dataset(d)
    cfg = resolve_bandwidth(spec.bandwidth if cfg is None else cfg, d.n_periods)
    if rfit is None:
        rfit = restricted_minimize(d, spec, rest)
    b1, b2, b3 = bias_hats(rfit, d, cfg)
    kappa = np.sqrt(d.n_units / d.n_periods)
    b_tilde = -kappa * b1 - b2 / kappa - kappa * b3
    stat = _lm_statistic(rfit, d, rest, b_tilde)
    return _chi2_result(stat, rest.n_restrictions, "LM*")


def lm_uncorrected(d: PanelDataset, spec: ModelSpec, rest: RestrictionSpec,
                   rfit: FitResult = None) -> TestResult:
    d = validate_dataset(d)
    if rfit is None:
        rfit = restricted_minimize(d, spec, rest)
    stat = _lm_statistic(rfit, d, rest, np.zeros(d.n_regressors))
    return _chi2_result(stat, rest.n_restrictions, "LM")


def uncorrected_tests(fit: FitResult, inf: InferenceResult, rest: RestrictionSpec,
                      d: PanelDataset, spec: ModelSpec):
    """The plain Wald, likelihood-ratio, and score statistics (no bias handling)."""
    wd = wald_uncorrected(fit, inf, rest)
    lr = lr_uncorrected(d, spec, rest, fit=fit)
    lm = lm_uncorrected(d, spec, rest)
    return wd, lr, lm
