"""Orthogonal outcome decomposition for two-by-two designs.

The outcome admits the representation

    y = m(x) + A(z) nu(x) + B(z) sigma(x) + C(z) tau(x) + eps,

where A, B, C are functions of (s, t) and the cell probabilities whose
conditional expectations vanish given x (and given x with either
indicator).  ``verify_decomposition`` checks the identity exactly on
arbitrary cell values and doubles as this module's test oracle.
"""
from __future__ import annotations

import numpy as np

from .data import CELL_PAIRS


class ConditioningError(ValueError):
    """Raised when s, t are too correlated for the decomposition to be stable."""


def conditioning_factor(s, t, delta):
    """f = 1 - delta^2 / (s(1-s)t(1-t)); must stay positive."""
    return 1.0 - delta**2 / (s * (1.0 - s) * t * (1.0 - t))


def abc(s_obs, t_obs, s, t, e11, delta, f_min: float = 0.05):
    """Coefficients (a, b, c) of the orthogonal decomposition.

    Parameters are broadcastable arrays: the observed indicators, the
    marginal probabilities s(x), t(x), the joint cell probability
    e11(x), and the covariance delta(x) = e11 - s*t.

    Raises
    ------
    ConditioningError
        If the conditioning factor falls below ``f_min`` anywhere.
    """
    s_obs = np.asarray(s_obs, dtype=float)
    t_obs = np.asarray(t_obs, dtype=float)
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    e11 = np.asarray(e11, dtype=float)
    delta = np.asarray(delta, dtype=float)
    f = conditioning_factor(s, t, delta)
    f_worst = float(np.min(f))
    if f_worst < f_min:
        raise ConditioningError(
            f"conditioning factor {f_worst:.4g} below f_min={f_min}; "
            "state and time are too correlated given covariates"
        )
    a = (t_obs - t - delta * (s_obs - s) / (s * (1.0 - s))) / f
    b = (s_obs - s - delta * (t_obs - t) / (t * (1.0 - t))) / f
    c = s_obs * t_obs - e11 - (e11 / t) * a - (e11 / s) * b
    return a, b, c


def h_residual(y, m, a, b, nu, sigma):
    """Transformed outcome y - (m + a*nu + b*sigma)."""
    return np.asarray(y, dtype=float) - (
        np.asarray(m, dtype=float)
        + np.asarray(a, dtype=float) * np.asarray(nu, dtype=float)
        + np.asarray(b, dtype=float) * np.asarray(sigma, dtype=float)
    )


def nuisances_from_cells(g_cells, e_cells):
    """Marginal quantities (m, nu, sigma, tau, s, t, delta) implied by cell values.

    ``g_cells`` and ``e_cells`` hold the conditional means and the cell
    probabilities for (s, t) in the order (0,0), (0,1), (1,0), (1,1),
    along the last axis.
    """
    g = np.asarray(g_cells, dtype=float)
    e = np.asarray(e_cells, dtype=float)
    g00, g01, g10, g11 = (g[..., i] for i in range(4))
    e00, e01, e10, e11 = (e[..., i] for i in range(4))
    s = e10 + e11
    t = e01 + e11
    m = e00 * g00 + e01 * g01 + e10 * g10 + e11 * g11
    nu = (e11 * g11 + e01 * g01) / t - (e10 * g10 + e00 * g00) / (1.0 - t)
    sigma = (e11 * g11 + e10 * g10) / s - (e01 * g01 + e00 * g00) / (1.0 - s)
    tau = g11 - g10 - g01 + g00
    delta = e11 - s * t
    return m, nu, sigma, tau, s, t, delta


def verify_decomposition(g_cells, e_cells, f_min: float = 0.05) -> float:
    """Max absolute residual of the decomposition identity over the four cells.

    Computes m, nu, sigma, tau, delta from the supplied cells and checks
    that m + A*nu + B*sigma + C*tau reproduces g(s, t) at every cell.
    Returns the worst absolute discrepancy; exact inputs give ~1e-15.
    """
    e = np.asarray(e_cells, dtype=float)
    if np.any(e <= 0):
        raise ValueError("cell probabilities must be positive")
    if not np.allclose(e.sum(axis=-1), 1.0, atol=1e-8):
        raise ValueError("cell probabilities must sum to 1")
    g = np.asarray(g_cells, dtype=float)
    m, nu, sigma, tau, s, t, delta = nuisances_from_cells(g, e)
    e11 = e[..., 3]
    worst = 0.0
    for idx, (sv, tv) in enumerate(CELL_PAIRS):
        a, b, c = abc(sv, tv, s, t, e11, delta, f_min=f_min)
        fitted = m + a * nu + b * sigma + c * tau
        worst = max(worst, float(np.max(np.abs(fitted - g[..., idx]))))
    return worst
