"""Treatment-effect estimators for the two-by-two design.

The transformed-regression estimator regresses the transformed outcome
on the orthogonalized treatment interaction; the heterogeneous-effect
fit turns the same moment into a penalized regression; the weighting
estimators combine an outcome model with inverse cell probabilities.
Two textbook baselines (four-cell sample means and a linear interaction
model) round out the menu.
"""
from __future__ import annotations

import numpy as np
from scipy import linalg

from .config import DEFAULT_RIDGE_LAMBDAS, EstimationConfig
from .data import Dataset, EstimateReport, FoldAssignment, Method
from .hermite import HermiteBasis, Standardizer, feature_matrix
from .nuisance import CrossFittedNuisances, EffectModel, fit_effect_from_residuals
from .orthogonal import abc, h_residual


class DegenerateDesignError(ValueError):
    pass


class RankDeficiencyError(ValueError):
    pass


def assemble_abch(data: Dataset, nuisances: CrossFittedNuisances):
    """Per-observation (a, b, c, h) implied by the fitted nuisances.

    The container already enforces the conditioning floor, so the
    threshold here is only a backstop against rounding.
    """
    a, b, c = abc(
        data.s,
        data.t,
        nuisances.s_hat,
        nuisances.t_hat,
        nuisances.e11_hat,
        nuisances.delta_hat,
        f_min=0.0,
    )
    h = h_residual(data.y, nuisances.m_hat, a, b, nuisances.nu_hat, nuisances.sigma_hat)
    return a, b, c, h


def tr_core(h: np.ndarray, c: np.ndarray, fold_of: np.ndarray, k: int):
    """Fold-weighted slope of h on c and its plug-in variance.

    Returns (tau_hat, std_err, per-fold slopes).
    """
    n = h.shape[0]
    slopes = np.empty(k)
    weights = np.empty(k)
    for j in range(k):
        members = fold_of == j
        denom = float(np.sum(c[members] ** 2))
        if denom <= 0.0:
            raise DegenerateDesignError(f"sum of squared c is zero in fold {j}")
        slopes[j] = float(np.sum(h[members] * c[members])) / denom
        weights[j] = members.sum() / n
    tau_hat = float(slopes @ weights)
    c2_mean = float(np.mean(c**2))
    v_tr = float(np.mean((h - tau_hat * c) ** 2 * c**2)) / c2_mean**2
    return tau_hat, float(np.sqrt(v_tr / n)), slopes


def tr_estimate(
    data: Dataset,
    nuisances: CrossFittedNuisances,
    folds: FoldAssignment,
    level: float = 0.95,
    method: Method = Method.TR,
) -> EstimateReport:
    """Transformed regression: per-fold OLS slopes combined by fold size."""
    a, b, c, h = assemble_abch(data, nuisances)
    tau_hat, se, slopes = tr_core(h, c, folds.fold_of, folds.k)
    diag = {f"slope_fold_{j}": float(v) for j, v in enumerate(slopes)}
    diag["c2_mean"] = float(np.mean(c**2))
    return EstimateReport.from_normal(method, tau_hat, se, data.n, level, diag)


def hte_fit(
    data: Dataset,
    nuisances: CrossFittedNuisances,
    folds: FoldAssignment,
    basis: HermiteBasis,
    lambdas=DEFAULT_RIDGE_LAMBDAS,
):
    """Cross-fitted heterogeneous effect on the Hermite basis.

    Per fold, the effect coefficients minimize the squared transformed
    moment sum((h - c * (theta0 + theta' phi(x)))^2) plus a ridge
    penalty on theta (chosen by cross-validation), fit on the fold
    complement and evaluated on the held-out fold.

    Returns (tau_x, models): out-of-fold effect estimates for every
    observation and the per-fold models.
    """
    tau_x = np.empty(data.n)
    models: list[EffectModel] = []
    a, b, c, h = assemble_abch(data, nuisances)
    for k in range(folds.k):
        held = folds.members(k)
        train = np.flatnonzero(folds.fold_of != k)
        std = Standardizer.fit(data.x[train])
        f_train = feature_matrix(basis, std.apply(data.x[train]))
        model = fit_effect_from_residuals(f_train, h[train], c[train], lambdas)
        tau_x[held] = model.predict(feature_matrix(basis, std.apply(data.x[held])))
        models.append(model)
    return tau_x, models


def inverse_cell_weights(data: Dataset, nuisances: CrossFittedNuisances) -> np.ndarray:
    """Signed inverse probability of each observation's own cell.

    The sign is +1 when s = t and -1 otherwise, so the weighted outcome
    mean telescopes into the double difference.
    """
    sign = np.where(data.s == data.t, 1.0, -1.0)
    return sign / nuisances.own_cell_probability(data.s, data.t)


def outcome_model_values(data, nuisances, tau_x):
    """Fitted g(z) = m + a*nu + b*sigma + c*tau(x) for each observation."""
    a, b, c, h = assemble_abch(data, nuisances)
    return data.y - h + c * tau_x, c, h


def aipw_estimate(
    data: Dataset,
    nuisances: CrossFittedNuisances,
    tau_x: np.ndarray,
    folds: FoldAssignment | None = None,
    level: float = 0.95,
) -> EstimateReport:
    """Doubly robust combination of the outcome model and inverse cell weights."""
    g_hat, _, _ = outcome_model_values(data, nuisances, tau_x)
    gamma = inverse_cell_weights(data, nuisances)
    psi = tau_x + gamma * (data.y - g_hat)
    tau_hat = float(np.mean(psi))
    se = float(np.std(psi, ddof=1) / np.sqrt(data.n))
    diag = {"max_abs_weight": float(np.max(np.abs(gamma)))}
    return EstimateReport.from_normal(Method.AIPW, tau_hat, se, data.n, level, diag)


def ipw_estimate(
    data: Dataset, nuisances: CrossFittedNuisances, level: float = 0.95
) -> EstimateReport:
    """Plain inverse-probability weighting; intervals are flagged unreliable."""
    gamma = inverse_cell_weights(data, nuisances)
    summands = gamma * data.y
    tau_hat = float(np.mean(summands))
    se = float(np.std(summands, ddof=1) / np.sqrt(data.n))
    diag = {"ci_unreliable": 1.0, "max_abs_weight": float(np.max(np.abs(gamma)))}
    return EstimateReport.from_normal(Method.IPW, tau_hat, se, data.n, level, diag)


def ols_baseline(data: Dataset, level: float = 0.95) -> EstimateReport:
    """Linear interaction model y ~ 1 + x + s + t + s*t, HC1 standard errors."""
    n = data.n
    design = np.column_stack([np.ones(n), data.x, data.s, data.t, data.s * data.t])
    ncol = design.shape[1]
    if np.linalg.matrix_rank(design) < ncol:
        raise RankDeficiencyError("design matrix is rank deficient (collinear columns)")
    gram = design.T @ design
    beta = linalg.solve(gram, design.T @ data.y, assume_a="pos")
    resid = data.y - design @ beta
    bread = linalg.inv(gram)
    meat = design.T @ (design * resid[:, None] ** 2)
    cov = bread @ meat @ bread * (n / (n - ncol))
    tau_hat = float(beta[-1])
    se = float(np.sqrt(cov[-1, -1]))
    return EstimateReport.from_normal(Method.OLS, tau_hat, se, n, level)


def sample_means(data: Dataset, level: float = 0.95) -> EstimateReport:
    """Double difference of the four cell means."""
    data.validate_for_estimation()
    cells = data.cells()
    mu = np.empty(4)
    var_term = 0.0
    for code in range(4):
        yc = data.y[cells == code]
        mu[code] = yc.mean()
        var_term += float(np.var(yc, ddof=1) / yc.shape[0]) if yc.shape[0] > 1 else 0.0
    tau_hat = float(mu[3] - mu[2] - mu[1] + mu[0])
    return EstimateReport.from_normal(Method.SAMPLE_MEANS, tau_hat, np.sqrt(var_term), data.n, level)


def weighted_target(dgp, reps: int = 200_000, seed: int = 0, d: int | None = None):
    """Monte Carlo estimate of the variance-weighted effect average.

    The target is E[w(X) tau(X)] / E[w(X)] with w(x) the conditional
    second moment of the orthogonalized interaction, computed exactly
    from the four cell probabilities at each draw; only x is sampled.
    ``dgp`` must expose ``min_d``, ``cell_probabilities(x)`` and
    ``tau(x)``.  Returns (tau_bar, std_err).
    """
    rng = np.random.default_rng(seed)
    d = d or dgp.min_d
    x = rng.standard_normal((reps, d))
    cells = dgp.cell_probabilities(x)
    tau = dgp.tau(x)
    w = conditional_c2(cells)
    num = w * tau
    tau_bar = float(np.mean(num) / np.mean(w))
    infl = (num - tau_bar * w) / np.mean(w)
    se = float(np.std(infl, ddof=1) / np.sqrt(reps))
    return tau_bar, se


def conditional_c2(cells: np.ndarray) -> np.ndarray:
    """E[c(z)^2 | x] from the four cell probabilities (exact four-cell sum)."""
    cells = np.asarray(cells, dtype=float)
    s = cells[:, 2] + cells[:, 3]
    t = cells[:, 1] + cells[:, 3]
    e11 = cells[:, 3]
    delta = e11 - s * t
    out = np.zeros(cells.shape[0])
    for idx, (sv, tv) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        _, _, c = abc(sv, tv, s, t, e11, delta, f_min=0.0)
        out += cells[:, idx] * c**2
    return out
