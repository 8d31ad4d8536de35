import numpy as np
import pytest

from npdid.config import EstimationConfig
from npdid.data import Dataset, make_folds
from npdid.hermite import Standardizer, build_basis, feature_matrix
from npdid.nuisance import (
    ConditioningWarning,
    IllPosedEffectError,
    InsufficientDataError,
    assemble_nuisances,
    clip_probabilities,
    crossfit_nuisances,
    fit_marginal_effect,
    fit_propensity,
    fit_ridge,
)
from npdid.simulation import SetupSpec, gen_setup
from oracles import ridge_normal_equations


# ---------------------------------------------------------------- ridge


def test_ridge_constant_outcome_shrinks_to_mean(rng):
    f = rng.normal(size=(40, 3))
    model = fit_ridge(f, np.full(40, 3.25), lambdas=[1e6])
    np.testing.assert_allclose(model.intercept, 3.25, atol=1e-4)
    np.testing.assert_allclose(model.coefficients, 0.0, atol=1e-4)


def test_ridge_exact_interpolation_lambda_zero(rng):
    y = rng.normal(size=30)
    model = fit_ridge(y[:, None], y, lambdas=[0.0])
    np.testing.assert_allclose(model.coefficients, [1.0], atol=1e-8)
    np.testing.assert_allclose(model.intercept, 0.0, atol=1e-8)


def test_ridge_matches_normal_equations_oracle(rng):
    f = rng.normal(size=(50, 3))
    y = rng.normal(size=50)
    model = fit_ridge(f, y, lambdas=[0.5])
    b0, beta = ridge_normal_equations(f, y, 0.5)
    np.testing.assert_allclose(model.coefficients, beta, atol=1e-8)
    np.testing.assert_allclose(model.intercept, b0, atol=1e-8)


def test_ridge_cv_prefers_heavy_penalty_for_pure_noise(rng):
    f = rng.normal(size=(60, 10))
    y = rng.normal(size=60)
    model = fit_ridge(f, y, lambdas=[1e-6, 1e4])
    assert model.lam == 1e4


def test_ridge_insufficient_data():
    with pytest.raises(InsufficientDataError):
        fit_ridge(np.ones((1, 1)), np.ones(1))


# ----------------------------------------------------------- propensity


def test_propensity_symmetric_zero_features():
    f = np.zeros((40, 2))
    cells = np.repeat(np.arange(4), 10)
    model = fit_propensity(f, cells, clip=0.01)
    probs = model.predict_cells(f)
    np.testing.assert_allclose(probs, 0.25, atol=1e-6)


def test_propensity_requires_all_cells():
    with pytest.raises(ValueError, match="four cells"):
        fit_propensity(np.zeros((9, 1)), np.repeat([0, 1, 2], 3))


def test_propensity_setup_a_recovers_constant_cells(rng):
    data, _ = gen_setup(SetupSpec(id="A", n=4000, d=5, seed=21))
    basis = build_basis(5, 2)
    f = feature_matrix(basis, Standardizer.fit(data.x).apply(data.x))
    model = fit_propensity(f, data.cells(), clip=0.01)
    e11 = model.predict_cells(f)[:, 3]
    assert np.mean(np.abs(e11 - 0.16)) < 0.03


def test_clip_contract(rng):
    raw = rng.dirichlet(np.full(4, 0.05), size=300)  # many near-degenerate rows
    clipped = clip_probabilities(raw, 0.01)
    assert clipped.min() >= 0.01 - 1e-12
    assert clipped.max() <= 1 - 3 * 0.01 + 1e-12
    np.testing.assert_allclose(clipped.sum(axis=1), 1.0, atol=1e-10)


# ------------------------------------------------------ marginal effects


def test_marginal_effect_recovers_constant_time_effect(rng):
    n = 2000
    x = rng.normal(size=(n, 3))
    s = rng.random(n) < 0.5
    t = rng.random(n) < 0.5
    y = 2.0 * t + 0.1 * rng.normal(size=n)
    data = Dataset(x=x, s=s.astype(int), t=t.astype(int), y=y)
    model, std = fit_marginal_effect(data, "T", build_basis(3, 2))
    pred = model.predict(feature_matrix(build_basis(3, 2), std.apply(x)))
    np.testing.assert_allclose(pred, 2.0, atol=0.2)


def test_marginal_effect_null_state_effect(rng):
    n = 2000
    x = rng.normal(size=(n, 3))
    s = rng.random(n) < 0.5
    t = rng.random(n) < 0.5
    y = x[:, 0] + rng.normal(size=n)  # depends on x only
    data = Dataset(x=x, s=s.astype(int), t=t.astype(int), y=y)
    model, std = fit_marginal_effect(data, "S", build_basis(3, 2))
    pred = model.predict(feature_matrix(build_basis(3, 2), std.apply(x)))
    assert np.mean(pred**2) < 0.1


def test_marginal_effect_correlates_with_truth_setup_b():
    data, truth = gen_setup(SetupSpec(id="B", n=4000, d=5, seed=31))
    from npdid.orthogonal import nuisances_from_cells

    _, nu_true, _, _, _, _, _ = nuisances_from_cells(truth.g_cells(), truth.cells)
    basis = build_basis(5, 3)
    model, std = fit_marginal_effect(data, "T", basis)
    pred = model.predict(feature_matrix(basis, std.apply(data.x)))
    corr = np.corrcoef(pred, nu_true)[0, 1]
    assert corr > 0.8


def test_marginal_effect_degenerate_indicator(rng):
    x = rng.normal(size=(50, 2))
    data = Dataset(x=x, s=np.ones(50, dtype=int), t=rng.integers(0, 2, 50), y=rng.normal(size=50))
    with pytest.raises(IllPosedEffectError):
        fit_marginal_effect(data, "S", build_basis(2, 2))


# ------------------------------------------------------------- crossfit


def test_crossfit_constant_dgp_concentrates(rng):
    n = 40
    x = rng.normal(size=(n, 2))
    cells = np.tile(np.arange(4), 10)
    perm = rng.permutation(n)
    cells = cells[perm]
    s, t = cells // 2, cells % 2
    y = 0.05 * rng.normal(size=n)
    data = Dataset(x=x, s=s, t=t, y=y)
    folds = make_folds(n, 2, seed=1, cells=cells)
    # 20 training rows per fold: regularize the propensity accordingly
    config = EstimationConfig(k_folds=2, propensity_ridge=2.0)
    nuis = crossfit_nuisances(data, folds, build_basis(2, 1), config)
    np.testing.assert_allclose(nuis.e11_hat, 0.25, atol=0.15)
    np.testing.assert_allclose(nuis.m_hat, 0.0, atol=0.25)


def test_crossfit_identities_hold_exactly():
    data, _ = gen_setup(SetupSpec(id="B", n=400, d=5, seed=41))
    folds = make_folds(data.n, 4, seed=2, cells=data.cells())
    nuis = crossfit_nuisances(data, folds, build_basis(5, 2), EstimationConfig(k_folds=4))
    np.testing.assert_allclose(nuis.delta_hat + nuis.s_hat * nuis.t_hat, nuis.e11_hat, atol=1e-14)
    np.testing.assert_allclose(nuis.s_hat, nuis.e10_hat + nuis.e11_hat, atol=1e-14)
    np.testing.assert_allclose(nuis.t_hat, nuis.e01_hat + nuis.e11_hat, atol=1e-14)
    cells = nuis.cell_matrix()
    assert cells.min() > 0
    np.testing.assert_allclose(cells.sum(axis=1), 1.0, atol=1e-10)


def test_crossfit_no_own_observation_leak():
    """Perturbing outcomes inside one fold must not move that fold's
    out-of-fold predictions."""
    data, _ = gen_setup(SetupSpec(id="A", n=240, d=5, seed=51))
    folds = make_folds(data.n, 3, seed=3, cells=data.cells())
    basis = build_basis(5, 2)
    config = EstimationConfig(k_folds=3)
    base = crossfit_nuisances(data, folds, basis, config)
    held = folds.members(0)
    y_mod = data.y.copy()
    y_mod[held] += 50.0
    bumped = crossfit_nuisances(
        Dataset(x=data.x, s=data.s, t=data.t, y=y_mod), folds, basis, config
    )
    np.testing.assert_allclose(bumped.m_hat[held], base.m_hat[held], atol=1e-10)
    np.testing.assert_allclose(bumped.nu_hat[held], base.nu_hat[held], atol=1e-10)
    np.testing.assert_allclose(bumped.sigma_hat[held], base.sigma_hat[held], atol=1e-10)
    np.testing.assert_allclose(bumped.e11_hat[held], base.e11_hat[held], atol=1e-14)
    other = folds.fold_of != 0
    assert not np.allclose(bumped.m_hat[other], base.m_hat[other], atol=1e-6)


def test_assemble_shrinks_covariance_and_warns():
    n = 10
    s = np.full(n, 0.5)
    t = np.full(n, 0.5)
    delta = np.full(n, 0.249)  # conditioning factor ~0.0064
    cells = np.column_stack(
        [(1 - s) * (1 - t) + delta, (1 - s) * t - delta, s * (1 - t) - delta, s * t + delta]
    )
    with pytest.warns(ConditioningWarning, match="observation"):
        nuis = assemble_nuisances(np.zeros(n), cells, np.zeros(n), np.zeros(n), f_min=0.05)
    from npdid.orthogonal import conditioning_factor

    f = conditioning_factor(nuis.s_hat, nuis.t_hat, nuis.delta_hat)
    assert np.all(f >= 0.05 - 1e-12)
    np.testing.assert_allclose(nuis.delta_hat + nuis.s_hat * nuis.t_hat, nuis.e11_hat, atol=1e-14)
    np.testing.assert_allclose(nuis.cell_matrix().sum(axis=1), 1.0, atol=1e-12)
