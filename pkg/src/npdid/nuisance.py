"""Cross-fitted nuisance estimation.

All nuisance functions are learned on a shared Hermite feature map:
ridge regression for the conditional mean, a four-class multinomial
logit for the cell probabilities, and residual-on-residual fits for the
two marginal effect functions.  ``crossfit_nuisances`` orchestrates the
out-of-fold evaluation so no observation is scored by a model that saw
it.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize


from .config import DEFAULT_RIDGE_LAMBDAS, EstimationConfig
from .data import Dataset, FoldAssignment, cell_index
from .hermite import HermiteBasis, Standardizer, feature_matrix
from .orthogonal import conditioning_factor


class InsufficientDataError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


class IllPosedEffectError(ValueError):
    pass


class ConditioningWarning(UserWarning):
    """Emitted when the state/time covariance had to be shrunk for stability."""


# ---------------------------------------------------------------------------
# ridge regression


@dataclass(frozen=True)
class RidgeModel:
    """Linear model with unpenalized intercept."""

    coefficients: np.ndarray
    intercept: float
    lam: float

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.intercept + np.asarray(features, dtype=float) @ self.coefficients


def _ridge_solve_centered(xc, yc, lambdas, svd=None):
    """Coefficients for each lambda on pre-centered data, via one SVD."""
    if svd is None:
        svd = linalg.svd(xc, full_matrices=False)
    u, sing, vt = svd
    uty = u.T @ yc
    coefs = []
    for lam in lambdas:
        shrink = sing / (sing**2 + lam)
        coefs.append(vt.T @ (shrink * uty))
    return coefs, svd


def fit_ridge(features: np.ndarray, y: np.ndarray, lambdas=DEFAULT_RIDGE_LAMBDAS) -> RidgeModel:
    """Ridge fit with the penalty chosen by internal 5-fold cross-validation.

    The intercept is unpenalized (handled by centering); with a single
    candidate the cross-validation is skipped.
    """
    x = np.asarray(features, dtype=float)
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    if n < 2:
        raise InsufficientDataError("ridge fit needs at least 2 observations")
    lambdas = [float(l) for l in lambdas]
    if len(lambdas) > 1:
        k_cv = min(5, n)
        blocks = np.array_split(np.arange(n), k_cv)
        sse = np.zeros(len(lambdas))
        gram_tot = x.T @ x
        xy_tot = x.T @ y
        xsum_tot = x.sum(axis=0)
        ysum_tot = float(y.sum())
        for held in blocks:
            x_h, y_h = x[held], y[held]
            n_tr = n - held.shape[0]
            xm = (xsum_tot - x_h.sum(axis=0)) / n_tr
            ym = (ysum_tot - float(y_h.sum())) / n_tr
            gram_c = gram_tot - x_h.T @ x_h - n_tr * np.outer(xm, xm)
            rhs_c = xy_tot - x_h.T @ y_h - n_tr * xm * ym
            w, v = linalg.eigh(gram_c)
            w = np.maximum(w, 0.0)
            proj = v.T @ rhs_c
            x_hc = x_h - xm
            for j, lam in enumerate(lambdas):
                denom = w + lam
                beta = v @ np.where(denom > 1e-12, proj / np.maximum(denom, 1e-12), 0.0)
                sse[j] += float(np.sum((y_h - ym - x_hc @ beta) ** 2))
        lam = lambdas[int(np.argmin(sse))]
    else:
        lam = lambdas[0]
    xm, ym = x.mean(axis=0), y.mean()
    (beta,), _ = _ridge_solve_centered(x - xm, y - ym, [lam])
    return RidgeModel(coefficients=beta, intercept=float(ym - xm @ beta), lam=lam)


# ---------------------------------------------------------------------------
# multinomial logistic cell probabilities


def clip_probabilities(probs: np.ndarray, eta: float) -> np.ndarray:
    """Shrink class probabilities affinely toward uniform.

    Maps p to eta + (1 - K*eta) * p for K classes, which keeps rows
    summing to one with every entry in [eta, 1 - (K-1)*eta].
    """
    probs = np.asarray(probs, dtype=float)
    k = probs.shape[-1]
    return eta + (1.0 - k * eta) * probs


@dataclass(frozen=True)
class PropensityModel:
    """Multinomial logit over the four (s, t) cells with clipped predictions."""

    coefficients: np.ndarray  # (n_classes, p + 1), column 0 is the intercept
    clip: float

    @property
    def n_classes(self) -> int:
        return self.coefficients.shape[0]

    def predict_cells(self, features: np.ndarray) -> np.ndarray:
        """Clipped cell probabilities, one row per observation."""
        f = np.asarray(features, dtype=float)
        logits = self.coefficients[:, 0] + f @ self.coefficients[:, 1:].T
        logits -= logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        return clip_probabilities(probs, self.clip)


def _softmax_objective(w_flat, phi, onehot, ridge, n_classes):
    w = w_flat.reshape(n_classes, -1)
    logits = phi @ w.T
    peak = logits.max(axis=1)
    logits -= peak[:, None]
    probs = np.exp(logits)
    norm = probs.sum(axis=1)
    loglik = float(np.sum(logits[onehot]) - np.sum(np.log(norm)))
    probs /= norm[:, None]
    grad = (probs - onehot).T @ phi
    # tiny intercept penalty pins the softmax's additive gauge freedom
    pen_diag = np.full(w.shape[1], 2.0 * ridge)
    pen_diag[0] = 2e-8
    obj = -loglik + 0.5 * float(np.sum(pen_diag * np.sum(w**2, axis=0)))
    grad = grad + pen_diag * w
    return obj, grad.ravel()


def _softmax_fit(phi, onehot, ridge, max_iter=1000, w0=None, check=False, gtol=1e-8):
    n_classes = onehot.shape[1]
    x0 = np.zeros(n_classes * phi.shape[1]) if w0 is None else w0.ravel()
    res = optimize.minimize(
        _softmax_objective,
        x0,
        args=(phi, onehot, ridge, n_classes),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_iter, "ftol": 1e-14, "gtol": gtol},
    )
    if check and not res.success and res.status != 0:
        grad_norm = float(np.max(np.abs(res.jac)))
        if grad_norm > 1e-3 * max(1.0, phi.shape[0]):
            raise ConvergenceError(
                f"propensity fit did not converge: {res.message} "
                f"(iterations={res.nit}, max|grad|={grad_norm:.3g})"
            )
    return res.x.reshape(n_classes, phi.shape[1])


def _softmax_probs(phi, w):
    logits = phi @ w.T
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    return probs / probs.sum(axis=1, keepdims=True)


def select_propensity_ridge(features, cells, grid, k_cv: int = 3) -> float:
    """Penalty with the smallest held-out multinomial deviance.

    Candidates are visited from strongest to weakest with warm starts.
    """
    grid = sorted({float(g) for g in np.atleast_1d(grid)}, reverse=True)
    if len(grid) == 1:
        return grid[0]
    f = np.asarray(features, dtype=float)
    cells = np.asarray(cells, dtype=int)
    n = f.shape[0]
    phi = np.column_stack([np.ones(n), f])
    onehot = np.zeros((n, 4), dtype=bool)
    onehot[np.arange(n), cells] = True
    k_cv = min(k_cv, n)
    blocks = np.array_split(np.arange(n), k_cv)
    deviance = np.zeros(len(grid))
    for held in blocks:
        train = np.setdiff1d(np.arange(n), held, assume_unique=True)
        w = None
        for j, lam in enumerate(grid):
            # ranking by held-out deviance tolerates a loose optimum
            w = _softmax_fit(phi[train], onehot[train], lam, w0=w, max_iter=300, gtol=1e-5)
            probs = np.clip(_softmax_probs(phi[held], w), 1e-12, None)
            deviance[j] -= float(np.sum(np.log(probs[onehot[held]])))
    return grid[int(np.argmin(deviance))]


def fit_propensity(
    features: np.ndarray,
    cells: np.ndarray,
    clip: float = 0.01,
    ridge=0.1,
    max_iter: int = 1000,
) -> PropensityModel:
    """Four-class penalized maximum-likelihood fit of the cell probabilities.

    ``ridge`` may be a scalar or a candidate grid; grids are resolved by
    held-out deviance via :func:`select_propensity_ridge`.

    Raises
    ------
    ConvergenceError
        If the optimizer fails to converge within ``max_iter`` iterations.
    """
    f = np.asarray(features, dtype=float)
    cells = np.asarray(cells, dtype=int)
    present = np.unique(cells)
    if not np.array_equal(present, np.arange(4)):
        raise ValueError(f"all four cells must be present, found codes {present.tolist()}")
    if np.ndim(ridge) > 0:
        ridge = select_propensity_ridge(f, cells, ridge)
    n, p = f.shape
    phi = np.column_stack([np.ones(n), f])
    onehot = np.zeros((n, 4), dtype=bool)
    onehot[np.arange(n), cells] = True
    w = _softmax_fit(phi, onehot, float(ridge), max_iter=max_iter, check=True)
    return PropensityModel(coefficients=w, clip=clip)


def _binary_propensity(features, d, ridge, max_iter=1000):
    """Marginal propensity of a single 0/1 indicator via a 2-class logit."""
    f = np.asarray(features, dtype=float)
    n, p = f.shape
    phi = np.column_stack([np.ones(n), f])
    onehot = np.zeros((n, 2), dtype=bool)
    onehot[np.arange(n), np.asarray(d, dtype=int)] = True
    ridge = float(np.atleast_1d(ridge)[0])
    w = _softmax_fit(phi, onehot, ridge, max_iter=max_iter)
    return _softmax_probs(phi, w)[:, 1]


# ---------------------------------------------------------------------------
# marginal effect functions (residual-on-residual)


@dataclass(frozen=True)
class EffectModel:
    """Marginal effect function theta0 + theta' phi(x) on the shared basis."""

    theta: np.ndarray
    intercept: float
    lam: float

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.intercept + np.asarray(features, dtype=float) @ self.theta


def _penalized_solve(gram, rhs, lam, free_cols=1):
    """Solve the ridge normal equations penalizing all but the first columns."""
    pen = np.full(gram.shape[0], lam)
    pen[:free_cols] = 0.0
    return linalg.solve(gram + np.diag(pen), rhs, assume_a="pos")


def fit_effect_from_residuals(
    features: np.ndarray,
    resid_y: np.ndarray,
    resid_d: np.ndarray,
    lambdas=DEFAULT_RIDGE_LAMBDAS,
) -> EffectModel:
    """Fit the effect by regressing resid_y on resid_d-scaled features.

    Minimizes sum((resid_y - resid_d * (theta0 + theta' phi))^2) plus a
    ridge penalty on theta, with the penalty chosen by 5-fold
    cross-validation.  Gram matrices are accumulated once and reused
    across folds and candidates.
    """
    f = np.asarray(features, dtype=float)
    resid_y = np.asarray(resid_y, dtype=float)
    resid_d = np.asarray(resid_d, dtype=float)
    n = resid_y.shape[0]
    if float(np.mean(resid_d**2)) < 1e-12:
        raise IllPosedEffectError(
            "residualized indicator is ~0 everywhere; the effect is not identified"
        )
    design = resid_d[:, None] * np.column_stack([np.ones(n), f])
    gram = design.T @ design
    rhs = design.T @ resid_y
    lambdas = [float(l) for l in lambdas]
    if len(lambdas) > 1:
        k_cv = min(5, n)
        blocks = np.array_split(np.arange(n), k_cv)
        sse = np.zeros(len(lambdas))
        for held in blocks:
            d_held = design[held]
            gram_tr = gram - d_held.T @ d_held
            rhs_tr = rhs - d_held.T @ resid_y[held]
            for j, lam in enumerate(lambdas):
                beta = _penalized_solve(gram_tr, rhs_tr, lam)
                sse[j] += float(np.sum((resid_y[held] - d_held @ beta) ** 2))
        lam = lambdas[int(np.argmin(sse))]
    else:
        lam = lambdas[0]
    beta = _penalized_solve(gram, rhs, lam)
    return EffectModel(theta=beta[1:], intercept=float(beta[0]), lam=lam)


def fit_marginal_effect(
    data: Dataset,
    treatment: str,
    basis: HermiteBasis,
    lambdas=DEFAULT_RIDGE_LAMBDAS,
    m_hat: np.ndarray | None = None,
    pi_hat: np.ndarray | None = None,
    standardizer: Standardizer | None = None,
    propensity_ridge: float = 1e-3,
):
    """Marginal effect of one indicator, ignoring the other.

    ``treatment`` is "S" or "T".  When ``m_hat``/``pi_hat`` are not
    supplied, the conditional mean and the indicator's marginal
    propensity are fit on the same data.  Returns the fitted
    :class:`EffectModel` together with the standardizer used.
    """
    if treatment not in ("S", "T"):
        raise ValueError("treatment must be 'S' or 'T'")
    d_ind = data.s if treatment == "S" else data.t
    if len(np.unique(d_ind)) < 2:
        raise IllPosedEffectError(f"indicator {treatment} takes a single value")
    std = standardizer or Standardizer.fit(data.x)
    f = feature_matrix(basis, std.apply(data.x))
    if m_hat is None:
        m_hat = fit_ridge(f, data.y, lambdas).predict(f)
    if pi_hat is None:
        pi_hat = _binary_propensity(f, d_ind, propensity_ridge)
    model = fit_effect_from_residuals(f, data.y - m_hat, d_ind - pi_hat, lambdas)
    return model, std


# ---------------------------------------------------------------------------
# cross-fitted container


@dataclass(frozen=True)
class CrossFittedNuisances:
    """Per-observation out-of-fold nuisance values.

    ``sigma_hat`` is the marginal state-effect function (the effect of
    s marginalizing over t); ``nu_hat`` the marginal time effect.  The
    cell probabilities are internally consistent: the marginals are
    their sums and ``delta_hat = e11_hat - s_hat * t_hat`` exactly.
    """

    m_hat: np.ndarray
    e00_hat: np.ndarray
    e01_hat: np.ndarray
    e10_hat: np.ndarray
    e11_hat: np.ndarray
    s_hat: np.ndarray
    t_hat: np.ndarray
    nu_hat: np.ndarray
    sigma_hat: np.ndarray
    delta_hat: np.ndarray
    fold_of: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.m_hat.shape[0]

    def cell_matrix(self) -> np.ndarray:
        """Cells as an (n, 4) matrix ordered (0,0),(0,1),(1,0),(1,1)."""
        return np.column_stack([self.e00_hat, self.e01_hat, self.e10_hat, self.e11_hat])

    def own_cell_probability(self, s_obs, t_obs) -> np.ndarray:
        """Probability of each observation's own (s, t) cell."""
        cells = self.cell_matrix()
        return cells[np.arange(self.n), cell_index(s_obs, t_obs)]


def assemble_nuisances(
    m_hat, cells_hat, nu_hat, sigma_hat, fold_of=None, f_min: float = 0.05
) -> CrossFittedNuisances:
    """Build a consistent container from raw cell predictions.

    Derives the marginals and the covariance from the cells; if the
    conditioning factor falls below ``f_min`` anywhere, the covariance
    is shrunk toward zero (cells rebuilt from the fixed marginals) and
    a :class:`ConditioningWarning` is emitted naming the worst row.
    """
    cells = np.asarray(cells_hat, dtype=float)
    s_hat = cells[:, 2] + cells[:, 3]
    t_hat = cells[:, 1] + cells[:, 3]
    delta = cells[:, 3] - s_hat * t_hat
    f = conditioning_factor(s_hat, t_hat, delta)
    bad = f < f_min
    if np.any(bad):
        worst = int(np.argmin(f))
        warnings.warn(
            f"conditioning factor {float(f[worst]):.4g} < f_min={f_min} at "
            f"observation {worst}; shrinking the s/t covariance on "
            f"{int(bad.sum())} observation(s)",
            ConditioningWarning,
            stacklevel=2,
        )
        cap = np.sqrt((1.0 - f_min) * s_hat * (1.0 - s_hat) * t_hat * (1.0 - t_hat))
        delta = np.where(bad, np.sign(delta) * cap, delta)
        e11 = s_hat * t_hat + delta
        cells = np.column_stack(
            [
                (1.0 - s_hat) * (1.0 - t_hat) + delta,
                (1.0 - s_hat) * t_hat - delta,
                s_hat * (1.0 - t_hat) - delta,
                e11,
            ]
        )
    return CrossFittedNuisances(
        m_hat=np.asarray(m_hat, dtype=float),
        e00_hat=cells[:, 0],
        e01_hat=cells[:, 1],
        e10_hat=cells[:, 2],
        e11_hat=cells[:, 3],
        s_hat=s_hat,
        t_hat=t_hat,
        nu_hat=np.asarray(nu_hat, dtype=float),
        sigma_hat=np.asarray(sigma_hat, dtype=float),
        delta_hat=delta,
        fold_of=None if fold_of is None else np.asarray(fold_of, dtype=int),
    )


def crossfit_nuisances(
    data: Dataset,
    folds: FoldAssignment,
    basis: HermiteBasis,
    config: EstimationConfig | None = None,
) -> CrossFittedNuisances:
    """Fit every nuisance on each fold complement and score the held-out fold."""
    config = config or EstimationConfig()
    n = data.n
    if folds.n != n:
        raise ValueError("fold assignment does not match the dataset")
    cells_obs = data.cells()
    prop_ridge = config.propensity_ridge
    if np.ndim(prop_ridge) > 0:
        # resolve the penalty once on the full sample; the choice uses
        # (x, s, t) only, so out-of-fold outcome predictions stay clean
        f_all = feature_matrix(basis, Standardizer.fit(data.x).apply(data.x))
        prop_ridge = select_propensity_ridge(f_all, cells_obs, prop_ridge)
    m_hat = np.empty(n)
    cells_hat = np.empty((n, 4))
    nu_hat = np.empty(n)
    sigma_hat = np.empty(n)
    for k in range(folds.k):
        held = folds.members(k)
        train = np.flatnonzero(folds.fold_of != k)
        std = Standardizer.fit(data.x[train])
        f_train = feature_matrix(basis, std.apply(data.x[train]))
        f_held = feature_matrix(basis, std.apply(data.x[held]))

        m_model = fit_ridge(f_train, data.y[train], config.ridge_lambdas)
        m_hat[held] = m_model.predict(f_held)

        prop = fit_propensity(
            f_train, cells_obs[train], clip=config.eta_clip, ridge=prop_ridge
        )
        cells_train = prop.predict_cells(f_train)
        cells_hat[held] = prop.predict_cells(f_held)

        resid_y = data.y[train] - m_model.predict(f_train)
        t_marg = cells_train[:, 1] + cells_train[:, 3]
        s_marg = cells_train[:, 2] + cells_train[:, 3]
        nu_model = fit_effect_from_residuals(
            f_train, resid_y, data.t[train] - t_marg, config.ridge_lambdas
        )
        sigma_model = fit_effect_from_residuals(
            f_train, resid_y, data.s[train] - s_marg, config.ridge_lambdas
        )
        nu_hat[held] = nu_model.predict(f_held)
        sigma_hat[held] = sigma_model.predict(f_held)
    return assemble_nuisances(
        m_hat, cells_hat, nu_hat, sigma_hat, fold_of=folds.fold_of, f_min=config.f_min
    )
