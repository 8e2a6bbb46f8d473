"""Profile least-squares estimation with interactive fixed effects.

Concentrating the loadings and factors out of the least-squares problem
leaves a profile objective in the coefficients alone: for residual matrix
Z = Y - beta . X it equals the mean of the T - R smallest eigenvalues of
Z'Z. The eigen-decomposition always runs on the smaller Gram matrix (T x T
when T <= N, else N x N), which carries the same nonzero spectrum at cost
O(min(N,T)^3) per evaluation.

The objective's exact gradient follows from the envelope theorem: holding
the concentrated-out loadings and factors at their optimum, the partial
derivative in beta_k is -(2/NT) tr(X_k' e_hat) with e_hat the residual after
removing the fitted rank-R part. The gradient is unreliable exactly at
eigenvalue crossings, which are therefore flagged.
"""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
import scipy.optimize

from .data import ModelSpec, PanelDataset, RestrictionSpec, validate_dataset
from .errors import OptimizationError, PanelValidationError, PanelWarning, SingularMatrixError
from .linalg import fix_column_signs

# Relative eigen-gap below which the envelope gradient is flagged as
# untrustworthy (possible eigenvalue crossing at position R).
RELATIVE_GAP_TOL = 1e-10

# Starts agreeing with the best objective within this absolute tolerance are
# counted as having found the same optimum.
RESTART_AGREEMENT_TOL = 1e-6

THREADS_ENV_VAR = "IFEPANEL_THREADS"


def _default_threads():
    try:
        return max(1, int(os.environ.get(THREADS_ENV_VAR, "1")))
    except ValueError:
        return 1


def parallel_map(fn, items, threads=None):
    """Map preserving input order; uses a thread pool when threads > 1."""
    items = list(items)
    threads = _default_threads() if threads is None else max(1, int(threads))
    if threads == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class OptimizerConfig:
    """Multistart local-optimization policy for the profile objective."""

    n_starts: int = 5
    start_spread: float = 0.5
    max_iter: int = 500
    grad_tol: float = 1e-8
    step_tol: float = 1e-10
    method: str = "quasi-newton-with-envelope-gradient"

    def __post_init__(self):
        if self.n_starts < 1:
            raise PanelValidationError("n_starts must be at least 1")
        if self.grad_tol <= 0 or self.step_tol <= 0:
            raise PanelValidationError("optimizer tolerances must be positive")
        if self.method not in ("quasi-newton-with-envelope-gradient", "derivative-free-simplex"):
            raise PanelValidationError(f"unknown optimizer method {self.method!r}")


@dataclass
class StartRecord:
    """Per-start optimizer diagnostics exposed when restarts disagree."""

    start_point: np.ndarray
    beta: np.ndarray
    objective: float
    grad_norm: float
    success: bool
    message: str
    n_evaluations: int
    method: str


@dataclass
class FitResult:
    """Estimated coefficients, factor structure, and optimizer diagnostics."""

    beta_hat: np.ndarray
    lambda_hat: np.ndarray
    f_hat: np.ndarray
    residuals: np.ndarray
    objective: float
    n_restarts_agreeing: int
    converged: bool
    degenerate_gap: bool
    start_table: list = field(default_factory=list)


def _check_factor_count(d: PanelDataset, r):
    if int(r) != r or r < 0:
        raise PanelValidationError(f"factor count must be a non-negative integer, got {r!r}")
    if r > min(d.n_units, d.n_periods) - 1:
        raise PanelValidationError(
            f"factor count R={r} exceeds min(N,T) - 1 = {min(d.n_units, d.n_periods) - 1}"
        )
    return int(r)


def _gram_eig(z):
    """Eigen-decomposition of the smaller Gram matrix of z.

    Returns (side, values_desc, vectors_desc) where side is 't' when the
    T x T Gram z'z was used and 'n' for the N x N Gram z z'. The Gram is
    symmetrized before decomposition.
    """
    n, t = z.shape
    if t <= n:
        gram, side = z.T @ z, "t"
    else:
        gram, side = z @ z.T, "n"
    gram = 0.5 * (gram + gram.T)
    vals, vecs = np.linalg.eigh(gram)
    return side, vals[::-1], vecs[:, ::-1]


def _tail_value(vals_desc, r, nt):
    tail = float(np.sum(vals_desc[r:]))
    return max(0.0, tail) / nt


def _relative_gap_degenerate(vals_desc, r):
    p = vals_desc.size
    if r == 0 or r >= p:
        return False
    top = vals_desc[0]
    if top <= 0.0:
        return False
    return bool(vals_desc[r - 1] - vals_desc[r] < RELATIVE_GAP_TOL * top)


def _factor_pair_from_eig(z, side, vals_desc, vecs_desc, r):
    """Map top eigenvectors of the smaller Gram to (loadings, factors).

    Factors are normalized to f'f/T = I. Eigenvectors on the N side are
    mapped through z; columns belonging to a numerically zero eigenvalue are
    completed to an orthonormal set (their loadings are exactly zero, so the
    fitted rank-R part is unaffected).
    """
    n, t = z.shape
    if r == 0:
        return np.zeros((n, 0)), np.zeros((t, 0))
    if side == "t":
        v = vecs_desc[:, :r].copy()
    else:
        u = vecs_desc[:, :r]
        scale = max(vals_desc[0], 0.0)
        cols = []
        for j in range(r):
            mapped = z.T @ u[:, j]
            norm = np.linalg.norm(mapped)
            if norm**2 > 1e-14 * max(scale, 1e-300):
                cols.append(mapped / norm)
            else:
                cols.append(None)
        v = np.zeros((t, r))
        missing = [j for j, c in enumerate(cols) if c is None]
        present = [j for j, c in enumerate(cols) if c is not None]
        for j in present:
            v[:, j] = cols[j]
        if missing:
            # Deterministic orthonormal completion of the computed columns.
            base = v[:, present] if present else np.zeros((t, 0))
            q, _ = np.linalg.qr(np.hstack([base, np.eye(t)]))
            fill = q[:, len(present) : len(present) + len(missing)]
            for idx, j in enumerate(missing):
                v[:, j] = fill[:, idx]
    v = fix_column_signs(v)
    f_hat = np.sqrt(t) * v
    lambda_hat = z @ v / np.sqrt(t)
    return lambda_hat, f_hat


def profile_objective(beta, d: PanelDataset, r) -> float:
    """Profile least-squares objective at ``beta``: mean tail eigenvalue sum.

    Equals (NT)^-1 times the sum of the T - R smallest eigenvalues of the
    residual Gram matrix; never negative.
    """
    r = _check_factor_count(d, r)
    z = d.y - d.combine(beta)
    n, t = z.shape
    gram = z.T @ z if t <= n else z @ z.T
    gram = 0.5 * (gram + gram.T)
    vals = np.linalg.eigvalsh(gram)  # ascending
    tail = float(np.sum(vals[: vals.size - r]))
    return max(0.0, tail) / (n * t)


def profile_gradient(beta, d: PanelDataset, r):
    """Exact envelope gradient of the profile objective.

    Returns ``(gradient, degenerate)``; the gradient is the K-vector with
    entries -(2/NT) tr(X_k' e_hat) at the concentrated optimum, and
    ``degenerate`` flags a relative eigen-gap below 1e-10 at position R,
    where the envelope identity can fail.
    """
    _, grad, degenerate = profile_value_and_gradient(beta, d, r)
    return grad, degenerate


def profile_value_and_gradient(beta, d: PanelDataset, r):
    """Objective, gradient, and gap flag from a single eigen-decomposition."""
    r = _check_factor_count(d, r)
    beta = np.asarray(beta, dtype=float)
    z = d.y - d.combine(beta)
    n, t = z.shape
    nt = n * t
    if r == 0:
        value = float(np.sum(z * z)) / nt
        resid = z
        degenerate = False
    else:
        side, vals_desc, vecs_desc = _gram_eig(z)
        value = _tail_value(vals_desc, r, nt)
        lam, f = _factor_pair_from_eig(z, side, vals_desc, vecs_desc, r)
        resid = z - lam @ f.T
        degenerate = _relative_gap_degenerate(vals_desc, r)
    xs = d.regressor_array()
    grad = -2.0 / nt * np.tensordot(xs, resid, axes=([1, 2], [0, 1]))
    return value, grad, degenerate


def factor_estimates(beta, d: PanelDataset, r):
    """Loadings and factors minimizing the objective at ``beta``.

    Returns ``(lambda_hat, f_hat, degenerate)`` with f_hat'f_hat/T = I and
    lambda_hat = Z f_hat / T; the product lambda_hat @ f_hat' is invariant to
    the sign/rotation convention. ``degenerate`` flags an eigen-gap collapse
    at position R.
    """
    r = _check_factor_count(d, r)
    z = d.y - d.combine(beta)
    if r == 0:
        return np.zeros((d.n_units, 0)), np.zeros((d.n_periods, 0)), False
    side, vals_desc, vecs_desc = _gram_eig(z)
    lam, f = _factor_pair_from_eig(z, side, vals_desc, vecs_desc, r)
    return lam, f, _relative_gap_degenerate(vals_desc, r)


def pooled_ols_vector(d: PanelDataset) -> np.ndarray:
    """Minimum-norm pooled least-squares coefficients (used for starts)."""
    k = d.n_regressors
    xs = d.regressor_array()
    gram = np.empty((k, k))
    rhs = np.empty(k)
    for a in range(k):
        rhs[a] = float(np.sum(xs[a] * d.y))
        for b in range(a, k):
            gram[a, b] = gram[b, a] = float(np.sum(xs[a] * xs[b]))
    sol, *_ = np.linalg.lstsq(gram, rhs, rcond=None)
    return sol


def _default_box(d: PanelDataset, spec: ModelSpec):
    """Box constraints: user-supplied, or +/- 10x pooled-OLS magnitude when
    low-rank regressors are present (compactness is needed only for those)."""
    if spec.parameter_box is not None:
        box = spec.parameter_box
        if box.shape[0] != d.n_regressors:
            raise PanelValidationError("parameter_box rows do not match the number of regressors")
        return box
    if d.n_low_rank == 0:
        return None
    ols = pooled_ols_vector(d)
    half = 10.0 * np.maximum(np.abs(ols), 1.0)
    return np.column_stack([ols - half, ols + half])


def _generate_starts(center, n_starts, spread, box=None):
    """Deterministic multistart points: the center plus scaled perturbations."""
    center = np.asarray(center, dtype=float)
    starts = [center]
    rng = np.random.default_rng(202306)
    scale = np.maximum(np.abs(center), 0.5)
    for _ in range(n_starts - 1):
        direction = rng.standard_normal(center.size)
        norm = np.max(np.abs(direction))
        if norm > 0:
            direction = direction / norm
        starts.append(center + spread * scale * direction)
    if box is not None:
        starts = [np.clip(s, box[:, 0], box[:, 1]) for s in starts]
    return starts


def _run_single_start(value_and_grad, value_only, x0, cfg: OptimizerConfig, box, method):
    evaluations = {"count": 0}

    def fun_with_grad(x):
        evaluations["count"] += 1
        val, grad = value_and_grad(x)
        return val, grad

    def fun_plain(x):
        evaluations["count"] += 1
        return value_only(x)

    # Line-search stalls near machine-precision minima are expected; success
    # is judged by the gradient norm below, not by scipy's flag alone.
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if method == "quasi-newton-with-envelope-gradient":
            if box is None:
                res = scipy.optimize.minimize(
                    fun_with_grad, x0, jac=True, method="BFGS",
                    options={"gtol": cfg.grad_tol, "maxiter": cfg.max_iter},
                )
            else:
                res = scipy.optimize.minimize(
                    fun_with_grad, x0, jac=True, method="L-BFGS-B",
                    bounds=[tuple(b) for b in box],
                    options={"gtol": cfg.grad_tol, "ftol": 1e-15, "maxiter": cfg.max_iter},
                )
        else:
            res = scipy.optimize.minimize(
                fun_plain, x0, method="Nelder-Mead",
                options={"xatol": cfg.step_tol, "fatol": 1e-14,
                         "maxiter": cfg.max_iter * max(4, x0.size * 4)},
            )
            if box is not None:
                res.x = np.clip(res.x, box[:, 0], box[:, 1])
    beta = np.asarray(res.x, dtype=float)
    value, grad = value_and_grad(beta)
    return StartRecord(
        start_point=np.asarray(x0, dtype=float),
        beta=beta,
        objective=float(value),
        grad_norm=float(np.linalg.norm(grad, np.inf)),
        success=bool(res.success) or float(np.linalg.norm(grad, np.inf)) < cfg.grad_tol,
        message=str(res.message),
        n_evaluations=evaluations["count"],
        method=method,
    )


def _newton_polish(value_and_grad, theta, max_steps=3):
    """Damped Newton refinement from the best multistart solution.

    The envelope gradient is exact, so a Hessian from central differences of
    the gradient gives quadratic local convergence; steps are only accepted
    while both the value and the gradient norm improve. This pushes the
    optimum to machine precision where line searches stall.
    """
    theta = np.asarray(theta, dtype=float)
    val, grad = value_and_grad(theta)
    for _ in range(max_steps):
        gnorm = float(np.linalg.norm(grad, np.inf))
        if gnorm == 0.0:
            break
        k = theta.size
        h = 1e-6 * np.maximum(np.abs(theta), 1.0)
        hess = np.zeros((k, k))
        for j in range(k):
            up, dn = theta.copy(), theta.copy()
            up[j] += h[j]
            dn[j] -= h[j]
            _, grad_up = value_and_grad(up)
            _, grad_dn = value_and_grad(dn)
            hess[:, j] = (grad_up - grad_dn) / (2.0 * h[j])
        hess = 0.5 * (hess + hess.T)
        if np.linalg.eigvalsh(hess)[0] <= 0.0:
            break
        cand = theta - np.linalg.solve(hess, grad)
        cand_val, cand_grad = value_and_grad(cand)
        if cand_val <= val and float(np.linalg.norm(cand_grad, np.inf)) < gnorm:
            theta, val, grad = cand, cand_val, cand_grad
        else:
            break
    return theta, val, grad


def _minimize_affine(d, r, cfg: OptimizerConfig, beta_particular, basis, shift=None,
                     box=None, extra_starts=(), threads=None):
    """Minimize the (optionally shifted) profile objective over an affine set.

    The coefficient vector is beta_particular + basis @ theta; ``shift`` is
    added to the coefficient before evaluating the objective (used by the
    recentred likelihood-ratio statistic). Returns the best record list
    sorted by (objective, lexicographic beta).
    """
    beta_particular = np.asarray(beta_particular, dtype=float)
    basis = np.asarray(basis, dtype=float)

    def to_beta(theta):
        return beta_particular + basis @ theta

    def value_and_grad(theta):
        beta = to_beta(theta)
        arg = beta if shift is None else beta + shift
        val, grad, _ = profile_value_and_gradient(arg, d, r)
        return val, basis.T @ grad

    def value_only(theta):
        beta = to_beta(theta)
        arg = beta if shift is None else beta + shift
        return profile_objective(arg, d, r)

    ols = pooled_ols_vector(d)
    theta_center, *_ = np.linalg.lstsq(basis, ols - beta_particular, rcond=None)
    theta_box = box if basis.shape == (basis.shape[0], basis.shape[0]) and np.allclose(basis, np.eye(basis.shape[0])) else None
    starts = _generate_starts(theta_center, cfg.n_starts, cfg.start_spread, theta_box)
    starts.extend(np.asarray(s, dtype=float) for s in extra_starts)

    def solve(x0):
        return _run_single_start(value_and_grad, value_only, x0, cfg, theta_box, cfg.method)

    records = parallel_map(solve, starts, threads=threads)
    # Fall back to the derivative-free simplex when the envelope gradient is
    # untrustworthy at the incumbent optimum.
    if cfg.method == "quasi-newton-with-envelope-gradient":
        best = min(records, key=lambda rec: rec.objective)
        arg = to_beta(best.beta) if shift is None else to_beta(best.beta) + shift
        _, _, degenerate = profile_value_and_gradient(arg, d, r)
        if degenerate:
            def solve_simplex(x0):
                return _run_single_start(value_and_grad, value_only, x0, cfg,
                                         theta_box, "derivative-free-simplex")

            records.extend(parallel_map(solve_simplex, starts, threads=threads))
    for rec in records:
        rec.start_point = to_beta(rec.start_point)
        rec.beta = to_beta(rec.beta)
    usable = [rec for rec in records if np.isfinite(rec.objective)]
    if not usable:
        raise OptimizationError("no optimizer start produced a finite objective", records)
    # Line searches routinely stall within a few orders of magnitude of the
    # strict tolerance; only starts far from any stationary point count as
    # failed here. The strict criterion is reported via FitResult.converged.
    loose_tol = 1e4 * cfg.grad_tol
    if not any(rec.success or rec.grad_norm < loose_tol for rec in usable):
        lines = "; ".join(
            f"start {i}: obj={rec.objective:.6g} grad={rec.grad_norm:.3g} ({rec.message})"
            for i, rec in enumerate(usable)
        )
        raise OptimizationError(f"no optimizer start converged: {lines}", records)
    usable.sort(key=lambda rec: (rec.objective, tuple(rec.beta)))
    best = usable[0]
    if basis.shape[1] and theta_box is None:
        theta0 = np.linalg.lstsq(basis, best.beta - beta_particular, rcond=None)[0]
        theta, val, grad = _newton_polish(value_and_grad, theta0)
        if val <= best.objective:
            best.beta = to_beta(theta)
            best.objective = float(val)
            best.grad_norm = float(np.linalg.norm(grad, np.inf))
            usable.sort(key=lambda rec: (rec.objective, tuple(rec.beta)))
    return usable


def _build_fit(d, spec, records):
    best = records[0]
    beta = best.beta
    lam, f, degenerate = factor_estimates(beta, d, spec.r)
    residuals = d.y - d.combine(beta) - lam @ f.T
    objective = profile_objective(beta, d, spec.r)
    agreeing = sum(1 for rec in records if rec.objective - best.objective <= RESTART_AGREEMENT_TOL)
    return FitResult(
        beta_hat=beta,
        lambda_hat=lam,
        f_hat=f,
        residuals=residuals,
        objective=objective,
        n_restarts_agreeing=agreeing,
        converged=bool(best.grad_norm < spec.optimizer.grad_tol),
        degenerate_gap=degenerate,
        start_table=records,
    )


def minimize_profile(d: PanelDataset, spec: ModelSpec, threads=None) -> FitResult:
    """Global minimization of the profile objective over the parameter box.

    Runs the configured multistart policy (pooled least squares plus
    perturbed starts) and reports the best local solution; restarts whose
    optimum lies within 1e-6 of the best objective are counted in
    ``n_restarts_agreeing``. A solution on the box boundary triggers a
    warning since interior-point inference assumptions then fail.
    """
    d = validate_dataset(d)
    r = _check_factor_count(d, spec.r)
    box = _default_box(d, spec)
    if r == 0:
        return _ols_fit(d, spec, box)
    k = d.n_regressors
    records = _minimize_affine(d, r, spec.optimizer, np.zeros(k), np.eye(k), box=box, threads=threads)
    fit = _build_fit(d, spec, records)
    if box is not None:
        scale = np.maximum(np.abs(fit.beta_hat), 1.0)
        at_edge = (fit.beta_hat - box[:, 0] < 1e-9 * scale) | (box[:, 1] - fit.beta_hat < 1e-9 * scale)
        if np.any(at_edge):
            warnings.warn(
                "estimate lies on the parameter box boundary; interior-point "
                "inference assumptions are violated",
                PanelWarning,
            )
    return fit


def _ols_fit(d, spec, box):
    """Closed-form pooled least squares; the R = 0 profile objective is the plain SSR."""
    k = d.n_regressors
    xs = d.regressor_array()
    gram = np.empty((k, k))
    rhs = np.empty(k)
    for a in range(k):
        rhs[a] = float(np.sum(xs[a] * d.y))
        for b in range(a, k):
            gram[a, b] = gram[b, a] = float(np.sum(xs[a] * xs[b]))
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularMatrixError("pooled regressor Gram matrix is singular")
    beta = np.linalg.solve(gram, rhs)
    if box is not None:
        clipped = np.clip(beta, box[:, 0], box[:, 1])
        if not np.allclose(clipped, beta):
            res = scipy.optimize.minimize(
                lambda b: profile_value_and_gradient(b, d, 0)[:2], clipped, jac=True,
                method="L-BFGS-B", bounds=[tuple(b) for b in box],
            )
            beta = res.x
    residuals = d.y - d.combine(beta)
    value, grad, _ = profile_value_and_gradient(beta, d, 0)
    record = StartRecord(
        start_point=beta.copy(), beta=beta.copy(), objective=value,
        grad_norm=float(np.linalg.norm(grad, np.inf)), success=True,
        message="closed-form least squares", n_evaluations=1, method="closed-form",
    )
    return FitResult(
        beta_hat=beta,
        lambda_hat=np.zeros((d.n_units, 0)),
        f_hat=np.zeros((d.n_periods, 0)),
        residuals=residuals,
        objective=value,
        n_restarts_agreeing=1,
        converged=bool(record.grad_norm < spec.optimizer.grad_tol),
        degenerate_gap=False,
        start_table=[record],
    )


def fit_at(beta, d: PanelDataset, spec: ModelSpec) -> FitResult:
    """Build a :class:`FitResult` at a fixed coefficient vector (no optimization)."""
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    lam, f, degenerate = factor_estimates(beta, d, spec.r)
    residuals = d.y - d.combine(beta) - lam @ f.T
    value = profile_objective(beta, d, spec.r)
    record = StartRecord(
        start_point=beta.copy(), beta=beta.copy(), objective=value, grad_norm=0.0,
        success=True, message="fixed point evaluation", n_evaluations=1, method="exact",
    )
    return FitResult(
        beta_hat=beta, lambda_hat=lam, f_hat=f, residuals=residuals,
        objective=value, n_restarts_agreeing=1, converged=True,
        degenerate_gap=degenerate, start_table=[record],
    )


def restriction_parameterization(rest: RestrictionSpec, k):
    """Particular solution and null-space basis of H beta = h.

    Raises when the restriction is infeasible; the basis has K - r columns.
    """
    h_mat, h_vec = rest.h_matrix, rest.h_vector
    if h_mat.shape[1] != k:
        raise PanelValidationError(
            f"restriction matrix has {h_mat.shape[1]} columns, expected {k}"
        )
    particular, *_ = np.linalg.lstsq(h_mat, h_vec, rcond=None)
    if np.linalg.norm(h_mat @ particular - h_vec) > 1e-10 * (1.0 + np.linalg.norm(h_vec)):
        raise PanelValidationError("restriction H beta = h has no solution")
    basis = scipy.linalg.null_space(h_mat)
    return particular, basis


def restricted_minimize(d: PanelDataset, spec: ModelSpec, rest: RestrictionSpec,
                        threads=None) -> FitResult:
    """Minimize the profile objective subject to H beta = h.

    The coefficient is reparameterized as a particular solution plus a
    null-space contribution, so the restriction holds to machine precision in
    the returned fit. A full-rank square H pins the coefficient completely
    and no optimization is run.
    """
    d = validate_dataset(d)
    r = _check_factor_count(d, spec.r)
    particular, basis = restriction_parameterization(rest, d.n_regressors)
    if basis.shape[1] == 0:
        beta = particular
        lam, f, degenerate = factor_estimates(beta, d, r)
        residuals = d.y - d.combine(beta) - lam @ f.T
        value = profile_objective(beta, d, r)
        record = StartRecord(
            start_point=beta.copy(), beta=beta.copy(), objective=value, grad_norm=0.0,
            success=True, message="restriction pins all coefficients",
            n_evaluations=1, method="exact",
        )
        return FitResult(
            beta_hat=beta, lambda_hat=lam, f_hat=f, residuals=residuals,
            objective=value, n_restarts_agreeing=1, converged=True,
            degenerate_gap=degenerate, start_table=[record],
        )
    records = _minimize_affine(d, r, spec.optimizer, particular, basis, threads=threads)
    return _build_fit(d, spec, records)
