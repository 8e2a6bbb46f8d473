"""Dense symmetric eigen-decompositions, projectors, and kernel weights.

Numerical kernels shared by the estimation and inference modules: orthogonal
projectors onto (possibly rank-deficient) column spans, tail sums of
eigenvalue spectra, leading invariant subspaces with a deterministic sign
convention, and the truncation kernel used by the serial-correlation bias
estimator.

Everything here is pure and reentrant; concurrent use on shared read-only
arrays is safe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import PanelValidationError

# Gram matrices accumulate rounding asymmetry; inputs are symmetrized after
# this relative check passes.
SYMMETRY_TOL = 1e-8

# Absolute spectral-gap threshold below which a leading invariant subspace is
# reported as degenerate (eigenvector choice no longer well determined).
DEGENERATE_GAP_TOL = 1e-12


@dataclass(frozen=True)
class ProjectorPair:
    """Orthogonal projector ``p`` onto a column span and its complement ``m``.

    Both matrices are n x n, symmetric, idempotent, and sum to the identity.
    """

    p: np.ndarray
    m: np.ndarray


@dataclass(frozen=True)
class KernelConfig:
    """Bandwidth for the truncation kernel (weight 1 up to lag ``bandwidth_m``)."""

    bandwidth_m: int

    def __post_init__(self):
        if int(self.bandwidth_m) != self.bandwidth_m or self.bandwidth_m < 1:
            raise PanelValidationError(
                f"bandwidth_m must be a positive integer, got {self.bandwidth_m!r}"
            )


def as_matrix(a, name="matrix", min_cols=1):
    """Coerce to a dense float matrix and validate shape and finiteness."""
    arr = np.asarray(a, dtype=float)
    if arr.ndim != 2:
        raise PanelValidationError(f"{name} must be two-dimensional, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < min_cols:
        raise PanelValidationError(f"{name} has invalid shape {arr.shape}")
    if arr.size and not np.all(np.isfinite(arr)):
        raise PanelValidationError(f"{name} contains non-finite entries")
    return arr


def projectors(a) -> ProjectorPair:
    """Build the projector pair for the column span of ``a`` (n x r, r >= 0).

    Uses an orthonormal basis of the span, so rank-deficient ``a`` (including
    zero columns, or r = 0) is handled: the projector covers only the actual
    span. Equivalent to a (a'a)^+ a' with the Moore-Penrose pseudoinverse.
    """
    a = as_matrix(a, name="projector input", min_cols=0)
    n = a.shape[0]
    if a.shape[1] == 0:
        p = np.zeros((n, n))
    else:
        q = scipy.linalg.orth(a)
        p = q @ q.T
    p = 0.5 * (p + p.T)
    return ProjectorPair(p=p, m=np.eye(n) - p)


def orth_basis(a) -> np.ndarray:
    """Orthonormal basis of the column span of ``a``; (n, 0) when the span is trivial."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise PanelValidationError(f"basis input must be two-dimensional, got shape {a.shape}")
    if a.shape[1] == 0 or not np.any(a):
        return np.zeros((a.shape[0], 0))
    return scipy.linalg.orth(a)


def annihilate(x, q_left=None, q_right=None) -> np.ndarray:
    """Project the columns of ``x`` off ``q_left`` and its rows off ``q_right``.

    ``q_left`` and ``q_right`` must have orthonormal columns (see
    :func:`orth_basis`); the result is M_left @ x @ M_right computed without
    forming the n x n projectors.
    """
    out = np.asarray(x, dtype=float)
    if q_left is not None and q_left.shape[1]:
        out = out - q_left @ (q_left.T @ out)
    if q_right is not None and q_right.shape[1]:
        out = out - (out @ q_right) @ q_right.T
    return out


def _symmetrized(s, name):
    s = as_matrix(s, name=name)
    if s.shape[0] != s.shape[1]:
        raise PanelValidationError(f"{name} must be square, got shape {s.shape}")
    scale = max(1.0, float(np.linalg.norm(s, "fro")))
    if np.linalg.norm(s - s.T, "fro") > SYMMETRY_TOL * scale:
        raise PanelValidationError(f"{name} is asymmetric beyond tolerance {SYMMETRY_TOL:g}")
    return 0.5 * (s + s.T)


def eig_tail_sum(s, r) -> float:
    """Sum of the p - r smallest eigenvalues of the symmetric matrix ``s``.

    Eigenvalues are counted with multiplicity; ``r = 0`` returns the trace and
    ``r = p`` returns zero.
    """
    s = _symmetrized(s, "eig_tail_sum input")
    p = s.shape[0]
    if not 0 <= r <= p:
        raise PanelValidationError(f"tail index r={r} outside [0, {p}]")
    if r == p:
        return 0.0
    vals = np.linalg.eigvalsh(s)  # ascending
    return float(np.sum(vals[: p - r]))


def top_eigvecs(s, r):
    """Orthonormal eigenvectors for the ``r`` largest eigenvalues of ``s``.

    Returns ``(vectors, degenerate)`` where ``vectors`` is p x r with columns
    ordered by descending eigenvalue and signed so that the entry of largest
    magnitude in each column is positive, and ``degenerate`` flags a spectral
    gap below :data:`DEGENERATE_GAP_TOL` between positions r and r+1 (the
    returned span is then not uniquely determined).
    """
    s = _symmetrized(s, "top_eigvecs input")
    p = s.shape[0]
    if not 0 <= r <= p:
        raise PanelValidationError(f"subspace size r={r} outside [0, {p}]")
    if r == 0:
        return np.zeros((p, 0)), False
    vals, vecs = np.linalg.eigh(s)
    vals_desc = vals[::-1]
    vecs_desc = vecs[:, ::-1]
    degenerate = bool(r < p and (vals_desc[r - 1] - vals_desc[r]) < DEGENERATE_GAP_TOL)
    return fix_column_signs(vecs_desc[:, :r].copy()), degenerate


def fix_column_signs(v) -> np.ndarray:
    """Flip columns so the entry of largest magnitude in each is positive."""
    v = np.asarray(v, dtype=float)
    for j in range(v.shape[1]):
        col = v[:, j]
        if col.size and col[int(np.argmax(np.abs(col)))] < 0:
            v[:, j] = -col
    return v


def kernel_weight(lag, cfg: KernelConfig) -> float:
    """Truncation kernel: 1 for lags within the bandwidth, 0 beyond it."""
    return 1.0 if abs(int(lag)) <= cfg.bandwidth_m else 0.0
