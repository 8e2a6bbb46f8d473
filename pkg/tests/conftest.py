import numpy as np
import pytest

from ifepanel import PanelDataset


def make_panel(rng, n, t, k=1, beta=None, r=1, noise=1.0, factor_scale=1.0):
    """Random panel with an exact factor structure plus optional noise."""
    beta = np.full(k, 0.5) if beta is None else np.asarray(beta, dtype=float)
    xs = [rng.standard_normal((n, t)) for _ in range(k)]
    lam = rng.standard_normal((n, r))
    f = rng.standard_normal((t, r))
    y = sum(b * x for b, x in zip(beta, xs)) + factor_scale * lam @ f.T
    if noise:
        y = y + noise * rng.standard_normal((n, t))
    return PanelDataset(y=y, x=xs), lam, f, beta


def dense_projectors(a):
    """Independent projector route used by the oracles: pseudoinverse form."""
    a = np.asarray(a, dtype=float)
    if a.shape[1] == 0:
        p = np.zeros((a.shape[0], a.shape[0]))
    else:
        p = a @ np.linalg.pinv(a.T @ a) @ a.T
    return p, np.eye(a.shape[0]) - p


def nan_equal(a, b):
    if isinstance(a, float) and isinstance(b, float):
        return (np.isnan(a) and np.isnan(b)) or a == b
    return a == b


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
