"""Panel data model, validation, CSV ingestion, and identification diagnostics.

A panel holds an N x T outcome matrix together with K regressor matrices of
the same shape. Regressors declared "low rank" (time-invariant or common
variables, or products of the two) need extra care for identification; the
diagnostics here report sample analogs of the relevant non-collinearity
quantities and leave the pass/fail judgement to the user, since no
finite-sample thresholds exist for the underlying constants.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd

from .errors import PanelValidationError, PanelWarning
from .linalg import KernelConfig, annihilate, as_matrix, orth_basis

# Singular-value ratio above which a declared rank-one regressor is reported
# as numerically higher rank.
RANK_ONE_RATIO_TOL = 1e-8


@dataclass
class PanelDataset:
    """Outcome matrix ``y`` (N x T) and K regressor matrices of the same shape.

    ``low_rank_flags[k]`` marks regressor k as declared rank one. Estimation
    requires N >= 2, T >= 2, and K >= 1; those are enforced by
    :func:`validate_dataset`, not at construction, so that small algebraic
    examples can still be expressed.
    """

    y: np.ndarray
    x: list
    regressor_names: list = field(default_factory=list)
    low_rank_flags: list = field(default_factory=list)

    def __post_init__(self):
        self.y = as_matrix(self.y, name="outcome matrix y")
        self.x = [as_matrix(xk, name=f"regressor matrix {k + 1}") for k, xk in enumerate(self.x)]
        if not self.regressor_names:
            self.regressor_names = [f"x{k + 1}" for k in range(len(self.x))]
        if not self.low_rank_flags:
            self.low_rank_flags = [False] * len(self.x)
        if len(self.regressor_names) != len(self.x) or len(self.low_rank_flags) != len(self.x):
            raise PanelValidationError("regressor names/flags do not match the number of regressors")
        self._x_arr = None

    @property
    def n_units(self):
        return self.y.shape[0]

    @property
    def n_periods(self):
        return self.y.shape[1]

    @property
    def n_regressors(self):
        return len(self.x)

    @property
    def n_low_rank(self):
        return int(sum(bool(f) for f in self.low_rank_flags))

    def regressor_array(self) -> np.ndarray:
        """Regressors stacked as a (K, N, T) array (cached)."""
        if self._x_arr is None:
            self._x_arr = np.stack(self.x, axis=0) if self.x else np.zeros((0,) + self.y.shape)
        return self._x_arr

    def combine(self, beta) -> np.ndarray:
        """The N x T matrix sum_k beta_k * X_k."""
        beta = np.asarray(beta, dtype=float)
        if beta.shape != (self.n_regressors,):
            raise PanelValidationError(
                f"coefficient vector has length {beta.size}, expected {self.n_regressors}"
            )
        if self.n_regressors == 0:
            return np.zeros_like(self.y)
        return np.tensordot(beta, self.regressor_array(), axes=1)

    def transposed(self) -> "PanelDataset":
        """The same panel with the unit and time dimensions exchanged."""
        return PanelDataset(
            y=self.y.T.copy(),
            x=[xk.T.copy() for xk in self.x],
            regressor_names=list(self.regressor_names),
            low_rank_flags=list(self.low_rank_flags),
        )


@dataclass(frozen=True)
class RestrictionSpec:
    """Linear restriction H beta = h with H of full row rank r <= K."""

    h_matrix: np.ndarray
    h_vector: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "h_matrix", np.atleast_2d(np.asarray(self.h_matrix, dtype=float)))
        object.__setattr__(self, "h_vector", np.atleast_1d(np.asarray(self.h_vector, dtype=float)))
        h = self.h_matrix
        if h.shape[0] != self.h_vector.shape[0]:
            raise PanelValidationError("restriction matrix and vector have mismatched row counts")
        if h.shape[0] > h.shape[1]:
            raise PanelValidationError("more restrictions than coefficients")
        if np.linalg.matrix_rank(h) != h.shape[0]:
            raise PanelValidationError("restriction matrix is rank deficient")

    @property
    def n_restrictions(self):
        return self.h_matrix.shape[0]


@dataclass
class ModelSpec:
    """Estimation settings: factor count, bias-correction bandwidth, optimizer.

    ``bandwidth`` is either a positive integer, a :class:`KernelConfig`, or
    the string ``"auto"`` which resolves to max(1, floor(log2 T)).
    ``parameter_box`` is an optional (K, 2) array of finite per-coefficient
    bounds; when absent and low-rank regressors are present, a default box of
    +/- 10x the pooled least-squares magnitude is imposed at fit time.
    """

    r: int
    bandwidth: Union[int, str, KernelConfig] = "auto"
    optimizer: "OptimizerConfig | None" = None
    parameter_box: Optional[np.ndarray] = None

    def __post_init__(self):
        if int(self.r) != self.r or self.r < 0:
            raise PanelValidationError(f"factor count must be a non-negative integer, got {self.r!r}")
        self.r = int(self.r)
        if self.parameter_box is not None:
            box = np.asarray(self.parameter_box, dtype=float)
            if box.ndim != 2 or box.shape[1] != 2:
                raise PanelValidationError("parameter_box must have shape (K, 2)")
            if not np.all(np.isfinite(box)):
                raise PanelValidationError("parameter_box bounds must be finite")
            if np.any(box[:, 0] > box[:, 1]):
                raise PanelValidationError("parameter_box has lower bound above upper bound")
            self.parameter_box = box
        if self.optimizer is None:
            from .estimator import OptimizerConfig

            self.optimizer = OptimizerConfig()


def resolve_bandwidth(bandwidth, n_periods) -> KernelConfig:
    """Resolve a bandwidth setting to a concrete :class:`KernelConfig`."""
    if isinstance(bandwidth, KernelConfig):
        return bandwidth
    if isinstance(bandwidth, str):
        if bandwidth != "auto":
            raise PanelValidationError(f"unknown bandwidth setting {bandwidth!r}")
        return KernelConfig(max(1, int(math.floor(math.log2(max(2, n_periods))))))
    return KernelConfig(int(bandwidth))


@dataclass
class DiagnosticsReport:
    """Sample non-collinearity statistics; NaN marks a quantity that does not apply."""

    highrank_stat: float
    lowrank_loading_eig: float
    lowrank_factor_eig: float
    pooled_noncollinearity_eig: float
    warnings: list = field(default_factory=list)


def validate_dataset(d: PanelDataset) -> PanelDataset:
    """Enforce the estimation-grade invariants; returns the dataset unchanged.

    Checks shared N x T shape with N, T >= 2, at least one regressor, finite
    entries (already enforced at construction), and warns when a regressor
    declared low rank has numerical rank above one.
    """
    if d.n_regressors == 0:
        raise PanelValidationError("at least one regressor is required for estimation")
    if d.n_units < 2 or d.n_periods < 2:
        raise PanelValidationError(
            f"panel must have N >= 2 and T >= 2, got N={d.n_units}, T={d.n_periods}"
        )
    shape = d.y.shape
    for name, xk in zip(d.regressor_names, d.x):
        if xk.shape != shape:
            raise PanelValidationError(
                f"regressor {name!r} has shape {xk.shape}, expected {shape}"
            )
    for name, xk, is_low in zip(d.regressor_names, d.x, d.low_rank_flags):
        if not is_low:
            continue
        svals = np.linalg.svd(xk, compute_uv=False)
        if svals[0] > 0 and svals.size > 1 and svals[1] / svals[0] > RANK_ONE_RATIO_TOL:
            warnings.warn(
                f"regressor {name!r} is declared low-rank but has singular-value ratio "
                f"{svals[1] / svals[0]:.3g}; diagnostics use its best rank-one approximation",
                PanelWarning,
            )
    return d


def _split_regressors(d: PanelDataset):
    low = [k for k, f in enumerate(d.low_rank_flags) if f]
    high = [k for k, f in enumerate(d.low_rank_flags) if not f]
    return low, high


def _tail_sum_of_outer(mat, skip, n_rows):
    """Sum of eigenvalues of ``mat @ mat.T`` beyond the ``skip`` largest.

    Computed from the singular values of ``mat``; the outer product has
    ``n_rows`` eigenvalues, the trailing ones identically zero.
    """
    svals = np.linalg.svd(mat, compute_uv=False)
    eigs = np.zeros(n_rows)
    eigs[: svals.size] = svals**2
    return float(np.sum(eigs[skip:]))


def highrank_diagnostic(d: PanelDataset, r) -> float:
    """Smallest tail eigenvalue sum of unit combinations of high-rank regressors.

    For unit vectors alpha over the high-rank coefficient space, the statistic
    is the minimum over alpha of the sum of eigenvalues of
    (alpha . X_high)(alpha . X_high)'/(NT) beyond the 2r + K1 largest. For a
    single high-rank regressor the minimum is exact; for several, a
    deterministic sphere lattice of 2 K2^2 directions is refined by projected
    gradient descent to tolerance 1e-8 on the statistic.
    """
    validate_dataset(d)
    low, high = _split_regressors(d)
    if not high:
        raise PanelValidationError("no high-rank regressors to diagnose")
    n, t = d.n_units, d.n_periods
    skip = 2 * int(r) + len(low)
    if n <= skip:
        raise PanelValidationError(
            f"tail empty: need N > 2r + K1 = {skip}, got N={n}"
        )
    xs = [d.x[k] for k in high]
    nt = n * t

    def stat(alpha):
        alpha = np.asarray(alpha, dtype=float)
        combo = np.tensordot(alpha, np.stack(xs), axes=1)
        return _tail_sum_of_outer(combo, skip, n) / nt

    k2 = len(xs)
    if k2 == 1:
        return stat(np.ones(1))

    # Deterministic lattice: +/- axes and +/- two-axis diagonals (2 K2^2 points).
    directions = []
    for i in range(k2):
        e = np.zeros(k2)
        e[i] = 1.0
        directions.extend([e, -e])
    for i in range(k2):
        for j in range(i + 1, k2):
            for si in (1.0, -1.0):
                for sj in (1.0, -1.0):
                    e = np.zeros(k2)
                    e[i], e[j] = si / math.sqrt(2), sj / math.sqrt(2)
                    directions.append(e)
    best = min(directions, key=stat)
    return _refine_on_sphere(stat, best, tol=1e-8)


def _refine_on_sphere(fn, x0, tol, max_iter=200):
    """Projected gradient descent for a smooth function on the unit sphere."""
    x = np.asarray(x0, dtype=float)
    x = x / np.linalg.norm(x)
    val = fn(x)
    step = 1.0
    h = 1e-6
    for _ in range(max_iter):
        grad = np.zeros_like(x)
        for i in range(x.size):
            d = np.zeros_like(x)
            d[i] = h
            grad[i] = (fn((x + d) / np.linalg.norm(x + d)) - fn((x - d) / np.linalg.norm(x - d))) / (2 * h)
        grad -= np.dot(grad, x) * x
        gnorm = np.linalg.norm(grad)
        if gnorm < tol:
            break
        improved = False
        while step > 1e-12:
            cand = x - step * grad
            cand /= np.linalg.norm(cand)
            cand_val = fn(cand)
            if cand_val < val - 1e-16:
                improvement = val - cand_val
                x, val = cand, cand_val
                step *= 1.5
                improved = True
                if improvement < tol:
                    return float(val)
                break
            step *= 0.5
        if not improved:
            break
    return float(val)


def lowrank_separation_diagnostic(d: PanelDataset, lambda_hat, f_hat):
    """Separation of estimated loadings/factors from the low-rank regressor spans.

    The low-rank regressors' leading singular pairs are collected into an
    N x K1 matrix w and a T x K1 matrix v; returned are the smallest
    eigenvalues of lambda' M_w lambda / N and f' M_v f / T.
    """
    low, _ = _split_regressors(d)
    if not low:
        raise PanelValidationError("no low-rank regressors to diagnose")
    lam = as_matrix(lambda_hat, name="loading matrix", min_cols=1)
    f = as_matrix(f_hat, name="factor matrix", min_cols=1)
    w_cols, v_cols = [], []
    for k in low:
        u_mat, _, vt_mat = np.linalg.svd(d.x[k], full_matrices=False)
        w_cols.append(u_mat[:, 0])
        v_cols.append(vt_mat[0, :])
    w = np.column_stack(w_cols)
    v = np.column_stack(v_cols)
    lam_res = annihilate(lam, orth_basis(w), None)
    f_res = annihilate(f, orth_basis(v), None)
    # lambda' M_w lambda equals (M_w lambda)'(M_w lambda) by idempotence.
    loading_eig = float(np.linalg.eigvalsh(lam_res.T @ lam_res / d.n_units)[0])
    factor_eig = float(np.linalg.eigvalsh(f_res.T @ f_res / d.n_periods)[0])
    return loading_eig, factor_eig


def pooled_noncollinearity_eig(d: PanelDataset) -> float:
    """Smallest eigenvalue of the pooled regressor second-moment matrix."""
    k = d.n_regressors
    gram = np.empty((k, k))
    xs = d.regressor_array()
    for a in range(k):
        for b in range(a, k):
            gram[a, b] = gram[b, a] = float(np.sum(xs[a] * xs[b]))
    gram /= d.n_units * d.n_periods
    return float(np.linalg.eigvalsh(gram)[0])


def diagnostics_report(d: PanelDataset, r, lambda_hat=None, f_hat=None) -> DiagnosticsReport:
    """Assemble the identification diagnostics; low-rank entries need a fit."""
    notes = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        validate_dataset(d)
        low, high = _split_regressors(d)
        high_stat = math.nan
        if high:
            try:
                high_stat = highrank_diagnostic(d, r)
            except PanelValidationError as exc:
                notes.append(str(exc))
        loading_eig = factor_eig = math.nan
        if low:
            if lambda_hat is None or f_hat is None:
                notes.append("low-rank separation diagnostics need estimated loadings and factors")
            else:
                loading_eig, factor_eig = lowrank_separation_diagnostic(d, lambda_hat, f_hat)
    notes.extend(str(w.message) for w in caught)
    return DiagnosticsReport(
        highrank_stat=high_stat,
        lowrank_loading_eig=loading_eig,
        lowrank_factor_eig=factor_eig,
        pooled_noncollinearity_eig=pooled_noncollinearity_eig(d),
        warnings=notes,
    )


REQUIRED_CSV_COLUMNS = ("unit", "time", "y")


def load_panel_csv(path, low_rank: Sequence[str] = ()) -> PanelDataset:
    """Read a long-format CSV with columns ``unit,time,y,x1..xK`` into a panel.

    The (unit, time) pairs must form a complete rectangle; unbalanced panels
    and duplicate rows are rejected. Units and times are sorted ascending.
    Low-rank declarations are supplied by name through ``low_rank``; they are
    configuration, not part of the file format.
    """
    frame = pd.read_csv(path, float_precision="round_trip")
    for col in REQUIRED_CSV_COLUMNS:
        if col not in frame.columns:
            raise PanelValidationError(f"input file is missing required column '{col}'")
    x_names = [c for c in frame.columns if c not in REQUIRED_CSV_COLUMNS]
    for name in low_rank:
        if name not in x_names:
            raise PanelValidationError(f"low-rank flag names unknown regressor '{name}'")
    if frame.duplicated(subset=["unit", "time"]).any():
        raise PanelValidationError("duplicate (unit, time) rows in input file")
    units = np.sort(frame["unit"].unique())
    times = np.sort(frame["time"].unique())
    if len(frame) != len(units) * len(times):
        raise PanelValidationError(
            "unbalanced panel: (unit, time) pairs do not form a complete rectangle"
        )
    mats = {}
    for col in ("y", *x_names):
        pivot = frame.pivot(index="unit", columns="time", values=col)
        pivot = pivot.reindex(index=units, columns=times)
        if pivot.isna().any().any():
            raise PanelValidationError(
                "unbalanced panel: (unit, time) pairs do not form a complete rectangle"
            )
        mats[col] = pivot.to_numpy(dtype=float)
    return PanelDataset(
        y=mats["y"],
        x=[mats[name] for name in x_names],
        regressor_names=list(x_names),
        low_rank_flags=[name in set(low_rank) for name in x_names],
    )
