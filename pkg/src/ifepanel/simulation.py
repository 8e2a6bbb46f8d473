"""Data generators, Monte Carlo harness, and the quadratic-expansion diagnostic.

The core design is a first-order autoregressive panel with a factor
structure: heavy-tailed idiosyncratic errors, loadings drawn around one, and
autoregressive factors. A long burn-in guarantees the retained sample follows
the stationary distribution. Every replication derives its own seed from the
master seed by a splittable scheme, so results are independent of execution
order and thread count.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np
import scipy.signal
from scipy.stats import chi2

from .data import ModelSpec, PanelDataset, RestrictionSpec, resolve_bandwidth
from .errors import NumericalError, PanelValidationError, PanelWarning, SingularMatrixError
from .estimator import (
    OptimizerConfig,
    _minimize_affine,
    fit_at,
    minimize_profile,
    parallel_map,
    profile_objective,
)
from .extensions import cce_pooled_ar1, pooled_ols
from .inference import (
    _lm_statistic,
    _negligible_objective,
    _sandwich_quadform,
    bias_corrected,
    bias_hats,
    jackknife,
    w_hat,
)
from .linalg import KernelConfig, annihilate, orth_basis

ESTIMATOR_NAMES = ("OLS", "FLS", "BC-FLS", "JK-FLS", "CCE")
TEST_NAMES = ("WD", "LR", "LM", "WD*", "LR*", "LM*")
# Calibration hook: a statistic drawn exactly from its reference distribution,
# used to validate the harness's size computation itself.
SELF_TEST_NAME = "SELFTEST"

NOMINAL_LEVEL = 0.05


@dataclass(frozen=True)
class DgpConfig:
    """Autoregressive panel design with interactive factor structure.

    The errors are drawn iid from a Student t with ``error_df`` degrees of
    freedom (built as a normal over the square root of a scaled chi-square,
    both from the replication's stream) or from a centered normal with
    standard deviation ``error_sigma``. Each factor follows an AR(1) with
    autocorrelation ``rho_f`` and stationary standard deviation ``sigma_f``;
    loadings are standard normal around one. ``burn_in`` leading periods are
    generated and discarded; the outcome starts at zero before the burn-in.
    """

    n: int
    t: int
    rho0: float
    r_true: int = 1
    rho_f: float = 0.5
    sigma_f: float = 0.5
    burn_in: int = 1000
    error_dist: str = "student_t"
    error_df: float = 5.0
    error_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if abs(self.rho0) >= 1:
            raise PanelValidationError(f"|rho0| must be below 1 for stationarity, got {self.rho0}")
        if abs(self.rho_f) >= 1:
            raise PanelValidationError(f"|rho_f| must be below 1, got {self.rho_f}")
        if self.sigma_f < 0:
            raise PanelValidationError("sigma_f must be non-negative")
        if self.burn_in < 0:
            raise PanelValidationError("burn_in must be non-negative")
        if self.error_dist not in ("student_t", "normal"):
            raise PanelValidationError(f"unknown error distribution {self.error_dist!r}")
        if self.r_true < 0:
            raise PanelValidationError("r_true must be non-negative")


@dataclass(frozen=True)
class TruthRecord:
    """Generated quantities retained for simulation-side diagnostics."""

    lambda0: np.ndarray
    f0: np.ndarray
    e: np.ndarray
    beta0: np.ndarray


def simulate_ar1(cfg: DgpConfig):
    """Generate one panel from the autoregressive factor design.

    Returns ``(dataset, truth)`` where the dataset's single regressor is the
    lagged outcome. Identical configurations (including the seed) produce
    bit-identical output.
    """
    if cfg.burn_in < 200:
        warnings.warn(
            f"burn_in={cfg.burn_in} is low; the retained sample may not be stationary",
            PanelWarning,
        )
    rng = np.random.default_rng(cfg.seed)
    n, t, r = cfg.n, cfg.t, cfg.r_true
    total = cfg.burn_in + t
    lam = rng.normal(1.0, 1.0, size=(n, r))
    if r:
        f_init = rng.normal(0.0, cfg.sigma_f, size=r)
        sigma_u = math.sqrt(max(0.0, 1.0 - cfg.rho_f**2)) * cfg.sigma_f
        u = rng.normal(0.0, sigma_u, size=(total, r))
        zi = np.tile((cfg.rho_f * f_init)[None, :], (1, 1))
        f_series, _ = scipy.signal.lfilter([1.0], [1.0, -cfg.rho_f], u, axis=0, zi=zi)
    else:
        f_series = np.zeros((total, 0))
    if cfg.error_dist == "student_t":
        z = rng.standard_normal(size=(n, total))
        v = rng.chisquare(cfg.error_df, size=(n, total))
        e_all = z / np.sqrt(v / cfg.error_df)
    elif cfg.error_sigma > 0:
        e_all = rng.normal(0.0, cfg.error_sigma, size=(n, total))
    else:
        e_all = np.zeros((n, total))
    innovations = lam @ f_series.T + e_all
    y_all = scipy.signal.lfilter([1.0], [1.0, -cfg.rho0], innovations, axis=1)
    b = cfg.burn_in
    y = y_all[:, b:].copy()
    if b >= 1:
        x1 = y_all[:, b - 1 : b + t - 1].copy()
    else:
        x1 = np.hstack([np.zeros((n, 1)), y_all[:, : t - 1]])
    dataset = PanelDataset(y=y, x=[x1], regressor_names=["y_lag1"], low_rank_flags=[False])
    truth = TruthRecord(
        lambda0=lam,
        f0=f_series[b:].copy(),
        e=e_all[:, b:].copy(),
        beta0=np.array([cfg.rho0]),
    )
    return dataset, truth


def rep_seed(master_seed, rep, stream=0) -> int:
    """Independent 64-bit seed for one replication (splittable scheme)."""
    ss = np.random.SeedSequence((int(master_seed) & (2**64 - 1), int(rep), int(stream)))
    return int(ss.generate_state(2, dtype=np.uint32).view(np.uint64)[0])


@dataclass
class McConfig:
    """Replication plan: design, estimators and tests requested, bandwidth."""

    dgp: DgpConfig
    reps: int
    estimators: Sequence[str] = ("FLS",)
    r_fit: int = 1
    bandwidth: Union[int, str] = "auto"
    tests: Sequence[str] = ()
    alternatives: str = "none"  # "none" or "local" (+/- (NT)^{-1/2})
    threads: int = 1
    optimizer: Optional[OptimizerConfig] = None

    def __post_init__(self):
        if self.reps < 1:
            raise PanelValidationError("reps must be at least 1")
        self.estimators = tuple(self.estimators)
        self.tests = tuple(self.tests)
        for name in self.estimators:
            if name not in ESTIMATOR_NAMES:
                raise PanelValidationError(f"unknown estimator {name!r}")
        for name in self.tests:
            if name not in TEST_NAMES + (SELF_TEST_NAME,):
                raise PanelValidationError(f"unknown test {name!r}")
        if self.alternatives not in ("none", "local"):
            raise PanelValidationError(f"unknown alternatives setting {self.alternatives!r}")
        if self.optimizer is None:
            self.optimizer = OptimizerConfig()

    def model_spec(self) -> ModelSpec:
        return ModelSpec(r=self.r_fit, bandwidth=self.bandwidth, optimizer=self.optimizer)


@dataclass
class EstimatorStats:
    bias: float
    std: float
    rmse: float
    n_reps: int


@dataclass
class TestStats:
    size: float
    power_left: float
    power_right: float
    size_corrected_power_left: float
    size_corrected_power_right: float
    n_reps: int


@dataclass
class McSummary:
    estimators: dict = field(default_factory=dict)
    tests: dict = field(default_factory=dict)
    bias_fraction: Optional[float] = None
    rep_failures: int = 0


def _run_reps(cfg: McConfig, worker):
    """Execute one callable per replication, collecting numerical failures."""

    def safe(rep):
        try:
            return worker(rep)
        except (NumericalError, np.linalg.LinAlgError) as exc:
            return ("__failed__", rep, str(exc))

    results = parallel_map(safe, range(cfg.reps), threads=cfg.threads)
    good = [r for r in results if not (isinstance(r, tuple) and r and r[0] == "__failed__")]
    failures = cfg.reps - len(good)
    if failures > 0.05 * cfg.reps:
        raise NumericalError(
            f"{failures} of {cfg.reps} replications failed; the configuration is likely mis-set"
        )
    return good, failures


def _moment_stats(draws, target) -> EstimatorStats:
    arr = np.asarray(draws, dtype=float)
    bias = float(np.mean(arr) - target)
    std = float(np.sqrt(np.mean((arr - np.mean(arr)) ** 2)))
    rmse = float(np.sqrt(np.mean((arr - target) ** 2)))
    return EstimatorStats(bias=bias, std=std, rmse=rmse, n_reps=arr.size)


def mc_estimators(cfg: McConfig) -> McSummary:
    """Bias, dispersion, and root mean squared error per requested estimator.

    When both the plain and the bias-corrected least-squares estimators are
    requested, the summary also reports the fraction of the mean bias removed
    by the correction (NaN when the mean bias is statistically zero).
    """
    if cfg.reps < 2:
        raise PanelValidationError("estimator summaries need at least 2 replications")
    rho0 = cfg.dgp.rho0
    wants_fls = any(e in cfg.estimators for e in ("FLS", "BC-FLS", "JK-FLS"))

    def worker(rep):
        dgp = replace(cfg.dgp, seed=rep_seed(cfg.dgp.seed, rep))
        d, _ = simulate_ar1(dgp)
        spec = cfg.model_spec()
        out = {}
        fit = None
        if wants_fls and ("FLS" in cfg.estimators or "BC-FLS" in cfg.estimators):
            fit = minimize_profile(d, spec)
        if "OLS" in cfg.estimators:
            out["OLS"] = float(pooled_ols(d)[0])
        if "FLS" in cfg.estimators:
            out["FLS"] = float(fit.beta_hat[0])
        if "BC-FLS" in cfg.estimators:
            inf = bias_corrected(fit, d, resolve_bandwidth(cfg.bandwidth, d.n_periods))
            out["BC-FLS"] = float(inf.beta_star[0])
        if "JK-FLS" in cfg.estimators:
            out["JK-FLS"] = float(jackknife(d, spec)[0])
        if "CCE" in cfg.estimators:
            out["CCE"] = float(cce_pooled_ar1(d))
        return out

    good, failures = _run_reps(cfg, worker)
    summary = McSummary(rep_failures=failures)
    for name in cfg.estimators:
        summary.estimators[name] = _moment_stats([g[name] for g in good], rho0)
    if "FLS" in cfg.estimators and "BC-FLS" in cfg.estimators:
        fls = np.array([g["FLS"] for g in good])
        bc = np.array([g["BC-FLS"] for g in good])
        dev_mean = float(np.mean(fls - rho0))
        dev_se = float(np.std(fls - rho0, ddof=1) / math.sqrt(len(fls))) if len(fls) > 1 else math.inf
        if abs(dev_mean) < 2.0 * dev_se:
            summary.bias_fraction = math.nan
        else:
            summary.bias_fraction = float(-np.mean(bc - fls) / dev_mean)
    return summary


def _battery(d, spec, fit, inf, shift, min_full_shifted, h_value, variants, cfg_kernel):
    """All requested statistics for the hypothesis that the first coefficient
    equals ``h_value``; shared expensive pieces are passed in."""
    n, t = d.n_units, d.n_periods
    nt = n * t
    k = d.n_regressors
    h_mat = np.zeros((1, k))
    h_mat[0, 0] = 1.0
    h_vec = np.array([h_value])
    rest = RestrictionSpec(h_matrix=h_mat, h_vector=h_vec)
    beta_restricted = fit.beta_hat.copy()
    beta_restricted[0] = h_value
    out = {}
    needs_rfit = any(v in variants for v in ("LR", "LM", "LM*"))
    rfit = fit_at(beta_restricted, d, spec) if needs_rfit else None
    if "WD" in variants:
        hd = h_mat @ fit.beta_hat - h_vec
        out["WD"] = _sandwich_quadform(hd, inf.w_hat, inf.omega_hat, h_mat, nt)
    if "WD*" in variants:
        hd = h_mat @ inf.beta_star - h_vec
        out["WD*"] = _sandwich_quadform(hd, inf.w_hat, inf.omega_hat, h_mat, nt)
    c_hat = fit.objective
    degenerate_scale = _negligible_objective(c_hat, d)
    if "LR" in variants:
        out["LR"] = 0.0 if degenerate_scale else max(
            0.0, nt * (rfit.objective - fit.objective) / c_hat
        )
    if "LR*" in variants:
        if degenerate_scale:
            out["LR*"] = 0.0
        else:
            value = profile_objective(beta_restricted + shift, d, spec.r)
            out["LR*"] = max(0.0, nt * (value - min_full_shifted) / c_hat)
    if "LM" in variants:
        out["LM"] = _lm_statistic(rfit, d, rest, np.zeros(k))
    if "LM*" in variants:
        b1, b2, b3 = bias_hats(rfit, d, cfg_kernel)
        kappa = math.sqrt(n / t)
        b_tilde = -kappa * b1 - b2 / kappa - kappa * b3
        out["LM*"] = _lm_statistic(rfit, d, rest, b_tilde)
    return out


def mc_tests(cfg: McConfig) -> McSummary:
    """Size, raw power, and size-corrected power for the requested statistics.

    Every replication is generated under the null value; the power entries
    test the locally shifted hypotheses rho0 -/+ (NT)^{-1/2} against the same
    draws. Size-corrected power replaces the asymptotic critical value by the
    empirical 95th percentile of the statistic under the null.
    """
    if cfg.reps < 100:
        raise PanelValidationError("test calibration needs at least 100 replications")
    if not cfg.tests:
        raise PanelValidationError("no tests requested")
    rho0 = cfg.dgp.rho0
    nt = cfg.dgp.n * cfg.dgp.t
    delta = 1.0 / math.sqrt(nt)
    targets = {"h0": rho0}
    if cfg.alternatives == "local":
        targets["left"] = rho0 - delta
        targets["right"] = rho0 + delta
    variants = tuple(v for v in cfg.tests if v != SELF_TEST_NAME)
    wants_self = SELF_TEST_NAME in cfg.tests
    needs_lr_star = "LR*" in variants

    def worker(rep):
        dgp = replace(cfg.dgp, seed=rep_seed(cfg.dgp.seed, rep))
        d, _ = simulate_ar1(dgp)
        spec = cfg.model_spec()
        kernel = resolve_bandwidth(cfg.bandwidth, d.n_periods)
        out = {}
        if variants:
            fit = minimize_profile(d, spec)
            inf = bias_corrected(fit, d, kernel)
            shift = np.linalg.solve(inf.w_hat, inf.b_combined) / math.sqrt(nt)
            min_full_shifted = None
            if needs_lr_star and not _negligible_objective(fit.objective, d):
                records = _minimize_affine(
                    d, spec.r, spec.optimizer, np.zeros(d.n_regressors),
                    np.eye(d.n_regressors), shift=shift,
                    extra_starts=[fit.beta_hat - shift],
                )
                min_full_shifted = records[0].objective
            for label, h_value in targets.items():
                stats = _battery(d, spec, fit, inf, shift, min_full_shifted,
                                 h_value, variants, kernel)
                for name, value in stats.items():
                    out.setdefault(name, {})[label] = value
        if wants_self:
            rng = np.random.default_rng(rep_seed(cfg.dgp.seed, rep, stream=1))
            draw = float(rng.chisquare(1))
            out[SELF_TEST_NAME] = {label: draw for label in targets}
        return out

    good, failures = _run_reps(cfg, worker)
    critical = float(chi2.ppf(1.0 - NOMINAL_LEVEL, 1))
    summary = McSummary(rep_failures=failures)
    for name in cfg.tests:
        h0 = np.array([g[name]["h0"] for g in good])
        size = float(np.mean(h0 > critical))
        empirical = float(np.quantile(h0, 1.0 - NOMINAL_LEVEL))
        if cfg.alternatives == "local":
            left = np.array([g[name]["left"] for g in good])
            right = np.array([g[name]["right"] for g in good])
            stats = TestStats(
                size=size,
                power_left=float(np.mean(left > critical)),
                power_right=float(np.mean(right > critical)),
                size_corrected_power_left=float(np.mean(left > empirical)),
                size_corrected_power_right=float(np.mean(right > empirical)),
                n_reps=h0.size,
            )
        else:
            stats = TestStats(size=size, power_left=math.nan, power_right=math.nan,
                              size_corrected_power_left=math.nan,
                              size_corrected_power_right=math.nan, n_reps=h0.size)
        summary.tests[name] = stats
    return summary


def bias_fraction(cfg: McConfig, bandwidths: Sequence[int]):
    """Fraction of the estimator bias removed by the correction, per bandwidth.

    Reported as mean(correction) / (-mean bias) for the first coefficient,
    which is 1 when the correction matches the bias exactly. Cells where the
    mean bias is within two Monte Carlo standard errors of zero are flagged
    as not applicable and reported as NaN.
    """
    if cfg.reps < 2:
        raise PanelValidationError("bias-fraction summaries need at least 2 replications")
    bandwidths = [int(m) for m in bandwidths]
    rho0 = cfg.dgp.rho0
    nt = cfg.dgp.n * cfg.dgp.t

    def worker(rep):
        dgp = replace(cfg.dgp, seed=rep_seed(cfg.dgp.seed, rep))
        d, _ = simulate_ar1(dgp)
        fit = minimize_profile(d, cfg.model_spec())
        w = w_hat(fit, d)
        dev = float(fit.beta_hat[0] - rho0)
        kappa = math.sqrt(d.n_units / d.n_periods)
        corrections = {}
        for m in bandwidths:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", PanelWarning)
                b1, b2, b3 = bias_hats(fit, d, KernelConfig(m))
            b_comb = -kappa * b1 - b2 / kappa - kappa * b3
            corrections[m] = float(-np.linalg.solve(w, b_comb)[0] / math.sqrt(nt))
        return dev, corrections

    good, failures = _run_reps(cfg, worker)
    devs = np.array([g[0] for g in good])
    dev_mean = float(np.mean(devs))
    dev_se = float(np.std(devs, ddof=1) / math.sqrt(devs.size)) if devs.size > 1 else math.inf
    applicable = bool(abs(dev_mean) >= 2.0 * dev_se)
    rows = []
    for m in bandwidths:
        corr_mean = float(np.mean([g[1][m] for g in good]))
        rows.append({
            "rho0": rho0,
            "m": m,
            "fraction": -corr_mean / dev_mean if applicable else math.nan,
            "applicable": applicable,
            "n_reps": int(devs.size),
            "rep_failures": int(failures),
        })
    return rows


@dataclass
class ExpansionDiagnostic:
    """First-order expansion quantities evaluated at the generated truth."""

    w_nt: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    predicted_dev: np.ndarray
    actual_dev: np.ndarray
    gap: float


def expansion_quantities(truth: TruthRecord, d: PanelDataset):
    """Approximated Hessian and the two score pieces at the true quantities.

    The first score piece is the doubly projected error/regressor product;
    the second collects the three second-order trace terms, each contracted
    through the loading/factor smoothing maps.
    """
    lam0, f0, e = truth.lambda0, truth.f0, truth.e
    n, t = d.n_units, d.n_periods
    nt = n * t
    q_lam = orth_basis(lam0)
    q_f = orth_basis(f0)
    k = d.n_regressors
    xhats = [annihilate(xk, q_lam, q_f) for xk in d.x]
    w_nt = np.empty((k, k))
    for a in range(k):
        for b in range(a, k):
            w_nt[a, b] = w_nt[b, a] = float(np.sum(xhats[a] * xhats[b])) / nt
    e_hat = annihilate(e, q_lam, q_f)
    c1 = np.array([float(np.sum(e_hat * xk)) for xk in d.x]) / math.sqrt(nt)
    c2 = np.zeros(k)
    if lam0.shape[1]:
        ll_inv = np.linalg.pinv(lam0.T @ lam0)
        ff_inv = np.linalg.pinv(f0.T @ f0)
        e_mf = annihilate(e, None, q_f)  # e M_f
        e_ml = annihilate(e, q_lam, None)  # M_l e
        smooth_f = f0 @ ff_inv @ ll_inv  # T x R
        smooth_l = lam0 @ ll_inv @ ff_inv  # N x R
        for kk in range(k):
            xk = d.x[kk]
            xk_ml = annihilate(xk, q_lam, None)
            xk_mf = annihilate(xk, None, q_f)
            t1 = np.trace(((lam0.T @ e_mf) @ e.T) @ xk_ml @ smooth_f)
            t2 = np.trace(((f0.T @ e_ml.T) @ e_mf) @ xk.T @ smooth_l)
            t3 = np.trace(((f0.T @ e_ml.T) @ xk_mf) @ e.T @ smooth_l)
            c2[kk] = -(t1 + t2 + t3) / math.sqrt(nt)
    return w_nt, c1, c2


def expansion_diagnostic(truth: TruthRecord, d: PanelDataset, spec: ModelSpec) -> ExpansionDiagnostic:
    """Compare the realized estimation error with its first-order prediction.

    The prediction is W^-1 C / sqrt(NT) with both pieces evaluated at the
    generated loadings, factors, and errors; the gap is the norm of
    (actual - predicted).
    """
    w_nt, c1, c2 = expansion_quantities(truth, d)
    vals = np.linalg.eigvalsh(w_nt)
    if vals[0] <= 0 or vals[-1] / vals[0] > 1e12:
        raise SingularMatrixError("the expansion Hessian is singular")
    predicted = np.linalg.solve(w_nt, c1 + c2) / math.sqrt(d.n_units * d.n_periods)
    fit = minimize_profile(d, spec)
    actual = fit.beta_hat - truth.beta0
    return ExpansionDiagnostic(
        w_nt=w_nt,
        c1=c1,
        c2=c2,
        predicted_dev=predicted,
        actual_dev=actual,
        gap=float(np.linalg.norm(actual - predicted)),
    )


# ---------------------------------------------------------------------------
# Study presets and serialization
# ---------------------------------------------------------------------------

TABLE_IDS = ("1", "2", "3", "6", "7", "8", "S1", "S2", "S3")

_ESTIMATOR_GRID_T = (5, 10, 20, 40, 80)
_ESTIMATOR_GRID_RHO = (0.3, 0.9)
_TEST_GRID = ((100, 20, 4), (400, 80, 6), (400, 20, 4), (1600, 80, 6))
_TEST_GRID_RHO = (0.0, 0.6)
_BASE_REPS = 10_000


def _scaled_reps(scale, minimum):
    reps = int(round(_BASE_REPS * scale))
    return max(minimum, reps)


def run_table(table, scale=1.0, seed=0, threads=1):
    """Run one of the preset study designs at a replication scale factor.

    Returns ``(rows, records)``: a flat list of row dicts (one per
    cell/estimator or cell/test) and a nested record mirroring the preset's
    layout. Output is deterministic in (table, scale, seed) and independent
    of the thread count.
    """
    table = str(table)
    if table not in TABLE_IDS:
        raise PanelValidationError(f"unknown table preset {table!r}")
    if scale <= 0:
        raise PanelValidationError("scale must be positive")
    rows = []
    cells = []
    cell_index = 0
    if table in ("1", "2", "S1", "S2", "S3"):
        reps = _scaled_reps(scale, 2)
        estimators = ("OLS", "FLS", "BC-FLS")
        if table.startswith("S"):
            estimators = estimators + ("CCE",)
        r_true = 2 if table == "S3" else 1
        r_fit = 2 if table in ("2", "S2", "S3") else r_true
        for rho0 in _ESTIMATOR_GRID_RHO:
            for t in _ESTIMATOR_GRID_T:
                dgp = DgpConfig(n=100, t=t, rho0=rho0, r_true=r_true,
                                seed=rep_seed(seed, cell_index, stream=7))
                cfg = McConfig(dgp=dgp, reps=reps, estimators=estimators,
                               r_fit=r_fit, bandwidth="auto", threads=threads)
                summary = mc_estimators(cfg)
                meta = {"table": table, "rho0": rho0, "n": 100, "t": t,
                        "m": resolve_bandwidth("auto", t).bandwidth_m,
                        "r_true": r_true, "r_fit": r_fit, "reps": reps}
                rows.extend(estimator_rows(meta, summary))
                cells.append({"meta": meta, "summary": summary_record(summary)})
                cell_index += 1
    elif table == "3":
        reps = _scaled_reps(scale, 2)
        for rho0 in (0.0, 0.3, 0.6, 0.9):
            dgp = DgpConfig(n=100, t=20, rho0=rho0,
                            seed=rep_seed(seed, cell_index, stream=7))
            cfg = McConfig(dgp=dgp, reps=reps, estimators=("FLS",), threads=threads)
            fr_rows = bias_fraction(cfg, bandwidths=range(1, 9))
            meta = {"table": table, "rho0": rho0, "n": 100, "t": 20, "reps": reps}
            for fr in fr_rows:
                rows.append({**meta, "kind": "bias_fraction", "m": fr["m"],
                             "fraction": fr["fraction"], "applicable": fr["applicable"],
                             "n_reps": fr["n_reps"]})
            cells.append({"meta": meta, "fractions": fr_rows})
            cell_index += 1
    else:  # tables 6, 7, 8: size / power / size-corrected power
        reps = _scaled_reps(scale, 100)
        for rho0 in _TEST_GRID_RHO:
            for n, t, m in _TEST_GRID:
                dgp = DgpConfig(n=n, t=t, rho0=rho0,
                                seed=rep_seed(seed, cell_index, stream=7))
                cfg = McConfig(dgp=dgp, reps=reps, estimators=(), tests=TEST_NAMES,
                               bandwidth=m, alternatives="local", threads=threads)
                summary = mc_tests(cfg)
                meta = {"table": table, "rho0": rho0, "n": n, "t": t, "m": m, "reps": reps}
                rows.extend(test_rows(meta, summary))
                cells.append({"meta": meta, "summary": summary_record(summary)})
                cell_index += 1
    records = {"table": table, "scale": scale, "seed": seed, "cells": cells}
    return rows, records


def estimator_rows(meta, summary: McSummary):
    rows = []
    for name, st in summary.estimators.items():
        rows.append({**meta, "kind": "estimator", "name": name, "bias": st.bias,
                     "std": st.std, "rmse": st.rmse, "n_reps": st.n_reps,
                     "rep_failures": summary.rep_failures})
    if summary.bias_fraction is not None:
        rows.append({**meta, "kind": "bias_fraction", "name": "BC-FLS",
                     "fraction": summary.bias_fraction})
    return rows


def test_rows(meta, summary: McSummary):
    rows = []
    for name, st in summary.tests.items():
        rows.append({**meta, "kind": "test", "name": name, "size": st.size,
                     "power_left": st.power_left, "power_right": st.power_right,
                     "sc_power_left": st.size_corrected_power_left,
                     "sc_power_right": st.size_corrected_power_right,
                     "n_reps": st.n_reps, "rep_failures": summary.rep_failures})
    return rows


def summary_record(summary: McSummary):
    return {
        "estimators": {
            name: {"bias": st.bias, "std": st.std, "rmse": st.rmse, "n_reps": st.n_reps}
            for name, st in summary.estimators.items()
        },
        "tests": {
            name: {
                "size": st.size,
                "power_left": st.power_left,
                "power_right": st.power_right,
                "size_corrected_power_left": st.size_corrected_power_left,
                "size_corrected_power_right": st.size_corrected_power_right,
                "n_reps": st.n_reps,
            }
            for name, st in summary.tests.items()
        },
        "bias_fraction": summary.bias_fraction,
        "rep_failures": summary.rep_failures,
    }


def _format_cell(value):
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def _parse_cell(text):
    if text == "":
        return None
    if text == "true":
        return True
    if text == "false":
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def rows_to_csv_text(rows) -> str:
    """Serialize row dicts to CSV; floats keep full precision via repr."""
    header = []
    for row in rows:
        for key in row:
            if key not in header:
                header.append(key)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_format_cell(row[k]) if k in row else "" for k in header))
    return "\n".join(lines) + "\n"


def write_rows_csv(rows, path):
    with open(path, "w", newline="") as fh:
        fh.write(rows_to_csv_text(rows))


def read_rows_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = []
        for rec in reader:
            row = {}
            for key, text in zip(header, rec):
                value = _parse_cell(text)
                if value is not None:
                    row[key] = value
            rows.append(row)
    return rows


def write_records_json(records, path):
    with open(path, "w") as fh:
        json.dump(records, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def read_records_json(path):
    with open(path) as fh:
        return json.load(fh)


def format_estimator_table(rows) -> str:
    """Human-readable layout: estimators as columns, bias/std/rmse row triples."""
    cells = {}
    names = []
    for row in rows:
        if row.get("kind") != "estimator":
            continue
        key = (row.get("rho0"), row.get("t"), row.get("n"))
        cells.setdefault(key, {})[row["name"]] = row
        if row["name"] not in names:
            names.append(row["name"])
    lines = []
    header = f"{'cell':<24}{'':<6}" + "".join(f"{name:>12}" for name in names)
    lines.append(header)
    lines.append("-" * len(header))
    for key in sorted(cells, key=lambda k: tuple(str(v) for v in k)):
        rho0, t, n = key
        label = f"rho0={rho0} N={n} T={t}"
        for stat in ("bias", "std", "rmse"):
            values = "".join(
                f"{cells[key][name][stat]:>12.4f}" if name in cells[key] else f"{'':>12}"
                for name in names
            )
            lines.append(f"{label:<24}{stat:<6}{values}")
            label = ""
        lines.append("")
    return "\n".join(lines)


def format_test_table(rows, stat_pair=("size",)) -> str:
    """Human-readable layout for test summaries."""
    cells = {}
    names = []
    for row in rows:
        if row.get("kind") != "test":
            continue
        key = (row.get("rho0"), row.get("n"), row.get("t"), row.get("m"))
        cells.setdefault(key, {})[row["name"]] = row
        if row["name"] not in names:
            names.append(row["name"])
    lines = []
    header = f"{'cell':<28}{'stat':<16}" + "".join(f"{name:>9}" for name in names)
    lines.append(header)
    lines.append("-" * len(header))
    for key in sorted(cells, key=lambda k: tuple(str(v) for v in k)):
        rho0, n, t, m = key
        label = f"rho0={rho0} N={n} T={t} M={m}"
        for stat in stat_pair:
            values = "".join(
                f"{cells[key][name].get(stat, float('nan')):>9.3f}" if name in cells[key] else f"{'':>9}"
                for name in names
            )
            lines.append(f"{label:<28}{stat:<16}{values}")
            label = ""
        lines.append("")
    return "\n".join(lines)
