"""Instrument-based estimation for endogenous regressors and baseline estimators.

The least squares-minimum distance procedure handles regressors that are
correlated with the error term: for a trial value of the endogenous
coefficients, the instruments are added to an auxiliary interactive-effects
regression of the partialled outcome; valid instruments are excluded from the
true model, so their auxiliary coefficients should be driven to zero. The
outer step minimizes a quadratic form in those coefficients, and a final
refit without the instruments recovers the exogenous coefficients.

Also provided: pooled least squares (ignores the factor structure entirely)
and a cross-sectional-average proxy estimator for the first-order
autoregressive layout, both used as comparison baselines.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import List, Union

import numpy as np
import scipy.optimize

from .data import ModelSpec, PanelDataset, validate_dataset
from .errors import OptimizationError, PanelValidationError, PanelWarning, SingularMatrixError
from .estimator import FitResult, factor_estimates, minimize_profile, pooled_ols_vector, profile_objective
from .inference import w_hat
from .linalg import annihilate, as_matrix, orth_basis

# Relative central-difference step for the outer quadratic-form gradient; the
# inner coefficient map is itself an argmin, so analytic derivatives are not
# available.
OUTER_FD_STEP = 1e-5


@dataclass
class EndogenousSpec:
    """Which regressors are endogenous, the instrument matrices, and the weight."""

    endog_idx: tuple
    instruments: List[np.ndarray]
    weight: Union[np.ndarray, str] = "identity"

    def __post_init__(self):
        self.endog_idx = tuple(int(i) for i in self.endog_idx)
        self.instruments = [
            as_matrix(z, name=f"instrument matrix {j + 1}") for j, z in enumerate(self.instruments)
        ]
        if len(self.instruments) < len(self.endog_idx):
            raise PanelValidationError(
                "need at least as many instruments as endogenous regressors"
            )
        if isinstance(self.weight, str):
            if self.weight != "identity":
                raise PanelValidationError(f"unknown weight setting {self.weight!r}")
        else:
            w = np.asarray(self.weight, dtype=float)
            L = len(self.instruments)
            if w.shape != (L, L):
                raise PanelValidationError("weight matrix shape does not match instrument count")
            if np.linalg.norm(w - w.T) > 1e-10 or np.any(np.linalg.eigvalsh(0.5 * (w + w.T)) <= 0):
                raise PanelValidationError("weight matrix must be symmetric positive definite")
            self.weight = 0.5 * (w + w.T)

    def weight_matrix(self):
        L = len(self.instruments)
        return np.eye(L) if isinstance(self.weight, str) else self.weight


@dataclass
class LsmdResult:
    beta_end: np.ndarray
    beta_exo: np.ndarray
    gamma_path: list = field(default_factory=list)
    final_fit: FitResult = None


def _split_spec(d: PanelDataset, es: EndogenousSpec):
    endog = sorted(es.endog_idx)
    if any(i < 0 or i >= d.n_regressors for i in endog):
        raise PanelValidationError("endogenous index out of range")
    if len(set(endog)) != len(endog):
        raise PanelValidationError("duplicate endogenous indices")
    exog = [i for i in range(d.n_regressors) if i not in set(endog)]
    return endog, exog


def _augmented_dataset(beta_end, d, es, endog, exog):
    y_part = d.y - sum(b * d.x[i] for b, i in zip(beta_end, endog))
    xs = [d.x[i] for i in exog] + list(es.instruments)
    names = [d.regressor_names[i] for i in exog] + [f"z{j + 1}" for j in range(len(es.instruments))]
    flags = [d.low_rank_flags[i] for i in exog] + [False] * len(es.instruments)
    return PanelDataset(y=y_part, x=xs, regressor_names=names, low_rank_flags=flags)


def lsmd_step1(beta_end, d: PanelDataset, spec: ModelSpec, es: EndogenousSpec):
    """Auxiliary regression of the partialled outcome on exogenous regressors
    plus instruments.

    Returns ``(beta_exo_tilde, gamma_tilde, fit)`` where gamma_tilde collects
    the instrument coefficients. Collinearity between instruments and
    exogenous regressors is caught by the Hessian condition guard.
    """
    d = validate_dataset(d)
    endog, exog = _split_spec(d, es)
    beta_end = np.atleast_1d(np.asarray(beta_end, dtype=float))
    if beta_end.size != len(endog):
        raise PanelValidationError("beta_end length does not match the endogenous index set")
    aug = _augmented_dataset(beta_end, d, es, endog, exog)
    fit = minimize_profile(aug, ModelSpec(r=spec.r, bandwidth=spec.bandwidth, optimizer=spec.optimizer))
    w_hat(fit, aug)  # raises on collinear regressor/instrument sets
    n_exo = len(exog)
    return fit.beta_hat[:n_exo], fit.beta_hat[n_exo:], fit


def lsmd_estimate(d: PanelDataset, spec: ModelSpec, es: EndogenousSpec) -> LsmdResult:
    """Full three-step procedure for endogenous regressors.

    The outer step minimizes gamma' W gamma over the endogenous coefficients
    by multistart quasi-Newton with central-difference gradients; the final
    step refits without the instruments at the chosen value.
    """
    d = validate_dataset(d)
    endog, exog = _split_spec(d, es)
    weight = es.weight_matrix()
    path = []

    def gamma_of(beta_end):
        _, gamma, _ = lsmd_step1(beta_end, d, spec, es)
        return gamma

    def objective(beta_end):
        gamma = gamma_of(beta_end)
        value = float(gamma @ weight @ gamma)
        path.append((np.array(beta_end, dtype=float), gamma.copy(), value))
        return value

    def gradient(beta_end):
        grad = np.zeros(len(beta_end))
        for i in range(len(beta_end)):
            step = OUTER_FD_STEP * max(1.0, abs(beta_end[i]))
            up = np.array(beta_end, dtype=float)
            dn = up.copy()
            up[i] += step
            dn[i] -= step
            grad[i] = (objective(up) - objective(dn)) / (2 * step)
        return grad

    ols = pooled_ols_vector(d)
    center = ols[endog]
    cfg = spec.optimizer
    rng = np.random.default_rng(771177)
    scale = np.maximum(np.abs(center), 0.5)
    starts = [center]
    for _ in range(cfg.n_starts - 1):
        direction = rng.standard_normal(center.size)
        norm = np.max(np.abs(direction))
        starts.append(center + cfg.start_spread * scale * (direction / norm if norm else direction))

    candidates = []
    for x0 in starts:
        res = scipy.optimize.minimize(
            objective, x0, jac=gradient, method="BFGS",
            options={"gtol": max(cfg.grad_tol, 1e-10), "maxiter": cfg.max_iter},
        )
        grad_norm = float(np.linalg.norm(gradient(res.x), np.inf))
        candidates.append((float(res.fun), tuple(res.x), np.asarray(res.x), bool(res.success), grad_norm))
    usable = [c for c in candidates if np.isfinite(c[0])]
    if not usable or not any(c[3] or c[4] < 1e-4 for c in usable):
        raise OptimizationError(
            "outer minimization of the instrument-coefficient quadratic form did not converge",
            [{"beta_end": list(b), "gamma": list(g), "value": v} for b, g, v in path],
        )
    usable.sort(key=lambda c: (c[0], c[1]))
    beta_end = usable[0][2]

    y_final = d.y - sum(b * d.x[i] for b, i in zip(beta_end, endog))
    if exog:
        final_d = PanelDataset(
            y=y_final,
            x=[d.x[i] for i in exog],
            regressor_names=[d.regressor_names[i] for i in exog],
            low_rank_flags=[d.low_rank_flags[i] for i in exog],
        )
        final_fit = minimize_profile(final_d, ModelSpec(r=spec.r, bandwidth=spec.bandwidth,
                                                        optimizer=spec.optimizer))
        beta_exo = final_fit.beta_hat
    else:
        lam, f, degenerate = factor_estimates(np.zeros(0), _no_regressor_panel(y_final), spec.r)
        residuals = y_final - lam @ f.T
        final_fit = FitResult(
            beta_hat=np.zeros(0), lambda_hat=lam, f_hat=f, residuals=residuals,
            objective=profile_objective(np.zeros(0), _no_regressor_panel(y_final), spec.r),
            n_restarts_agreeing=1, converged=True, degenerate_gap=degenerate, start_table=[],
        )
        beta_exo = np.zeros(0)
    return LsmdResult(beta_end=beta_end, beta_exo=beta_exo, gamma_path=path, final_fit=final_fit)


def _no_regressor_panel(y):
    return PanelDataset(y=y, x=[], regressor_names=[], low_rank_flags=[])


def pooled_ols(d: PanelDataset) -> np.ndarray:
    """Pooled least squares over all observations, ignoring any factor structure."""
    d = validate_dataset(d)
    xs = d.regressor_array()
    k = d.n_regressors
    gram = np.empty((k, k))
    rhs = np.empty(k)
    for a in range(k):
        rhs[a] = float(np.sum(xs[a] * d.y))
        for b in range(a, k):
            gram[a, b] = gram[b, a] = float(np.sum(xs[a] * xs[b]))
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularMatrixError("pooled regressor Gram matrix is singular")
    return np.linalg.solve(gram, rhs)


def cce_pooled_ar1(d: PanelDataset) -> float:
    """Cross-sectional-average proxy estimator for the AR(1) layout.

    Expects the first regressor to hold the lagged outcome. The factor
    proxies are the per-period cross-sectional means of the outcome and its
    lag; the common autoregressive coefficient is then estimated by least
    squares with unit-specific proxy loadings, implemented by projecting each
    unit's series off the proxy span.
    """
    d = validate_dataset(d)
    if d.n_units < 2:
        raise PanelValidationError(
            "proxy estimator needs N >= 2: with one unit the proxies reproduce "
            "the unit's own series and the fit is perfect"
        )
    y = d.y
    x = d.x[0]
    proxies = np.column_stack([y.mean(axis=0), x.mean(axis=0)])  # T x 2
    svals = np.linalg.svd(proxies, compute_uv=False)
    if svals[0] <= 0 or svals[1] / svals[0] < 1e-10:
        warnings.warn(
            "factor proxies are collinear; dropping the redundant proxy column",
            PanelWarning,
        )
        proxies = proxies[:, :1]
    q = orth_basis(proxies)
    x_resid = annihilate(x.T, q, None).T
    y_resid = annihilate(y.T, q, None).T
    denom = float(np.sum(x_resid * x_resid))
    if denom <= 0:
        raise SingularMatrixError("lagged outcome lies in the proxy span for every unit")
    return float(np.sum(x_resid * y_resid)) / denom
