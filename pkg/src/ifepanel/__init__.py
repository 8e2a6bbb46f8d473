"""Linear panel regression with interactive fixed effects.

Profile least-squares estimation of coefficient vectors in the presence of
unit-specific loadings interacted with time-specific factors, with analytic
and split-panel-jackknife bias corrections, bias-corrected Wald / likelihood
ratio / score tests, instrument-based estimation for endogenous regressors,
and a Monte Carlo harness for calibration studies.
"""

from .data import (
    DiagnosticsReport,
    ModelSpec,
    PanelDataset,
    RestrictionSpec,
    diagnostics_report,
    highrank_diagnostic,
    load_panel_csv,
    lowrank_separation_diagnostic,
    resolve_bandwidth,
    validate_dataset,
)
from .errors import (
    NumericalError,
    OptimizationError,
    PanelValidationError,
    PanelWarning,
    SingularMatrixError,
)
from .estimator import (
    FitResult,
    OptimizerConfig,
    factor_estimates,
    fit_at,
    minimize_profile,
    profile_gradient,
    profile_objective,
    restricted_minimize,
)
from .extensions import (
    EndogenousSpec,
    LsmdResult,
    cce_pooled_ar1,
    lsmd_estimate,
    lsmd_step1,
    pooled_ols,
)
from .inference import (
    InferenceResult,
    TestResult,
    bias_corrected,
    bias_hats,
    jackknife,
    lm_star,
    lm_uncorrected,
    lr_star,
    lr_uncorrected,
    omega_hat,
    uncorrected_tests,
    w_hat,
    wald_star,
    wald_uncorrected,
)
from .linalg import (
    KernelConfig,
    ProjectorPair,
    eig_tail_sum,
    kernel_weight,
    projectors,
    top_eigvecs,
)
from .simulation import (
    DgpConfig,
    ExpansionDiagnostic,
    McConfig,
    McSummary,
    bias_fraction,
    expansion_diagnostic,
    mc_estimators,
    mc_tests,
    run_table,
    simulate_ar1,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
