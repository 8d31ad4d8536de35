"""Synthetic data-generating processes and the Monte Carlo harness.

Six named setups (A-F) cover constant and heterogeneous effects, easy
and hard nuisance functions, and constant and covariate-dependent cell
probabilities.  Ground truth is carried alongside each draw so oracle
estimators and error metrics are exact.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from joblib import Parallel, delayed
from scipy.special import expit

from .config import EstimationConfig
from .data import Dataset, EstimateReport, Method, make_folds
from .estimators import (
    aipw_estimate,
    hte_fit,
    ipw_estimate,
    ols_baseline,
    sample_means,
    tr_core,
    tr_estimate,
)
from .balancing import amle_estimate, build_qp, estimate_sigma2, solve_qp
from .hermite import basis_matrix, build_basis, default_max_order
from .nuisance import CrossFittedNuisances, assemble_nuisances, crossfit_nuisances
from .orthogonal import h_residual, nuisances_from_cells

ETA = 0.1


def _zeros(x):
    return np.zeros(x.shape[0])


def _independent_cells(s, t):
    return np.column_stack([(1 - s) * (1 - t), (1 - s) * t, s * (1 - t), s * t])


def _constant_cells(s: float, t: float) -> Callable:
    def cells(x):
        n = x.shape[0]
        return np.broadcast_to(
            _independent_cells(np.array([s]), np.array([t])), (n, 4)
        ).copy()

    return cells


def _sequential_cells(x):
    """Heterogeneous cells built sequentially with a positivity clamp.

    The interaction cell comes first, the two mixed cells follow, and
    the remainder is clamped at ETA and the row renormalized when the
    clamp binds.
    """
    e11 = np.maximum(ETA, 0.7 * expit(x[:, 2]))
    e01 = np.maximum(ETA, 0.8 - e11 * expit(x[:, 3]))
    e10 = np.maximum(ETA, 0.9 - e11 - e01 * expit(x[:, 4]))
    e00 = np.maximum(ETA, 1.0 - e11 - e01 - e10)
    cells = np.column_stack([e00, e01, e10, e11])
    return cells / cells.sum(axis=1, keepdims=True)


# Setup C floor; at 0.2 the interaction cell moves opposite to the sine
# baseline (e11 in [0.4, 0.6]), which biases the linear baseline downward
# by ~0.4 as intended for this setup.
ETA_C = 0.2


def _sine_cells(x):
    e11 = 0.5 + 0.5 * (1.0 - 6.0 * ETA_C) * np.sin(3.0 * x[:, 0])
    rest = (1.0 - e11) / 3.0
    return np.column_stack([rest, rest, rest, e11])


def _f_cells(x):
    s = np.clip(expit(0.5 * x[:, 2] - x[:, 4]), ETA, 1.0 - ETA)
    t = np.full(x.shape[0], 0.45)
    return _independent_cells(s, t)


def _softplus(z):
    return np.logaddexp(0.0, z)


@dataclass(frozen=True)
class DgpDef:
    """Definition of a data-generating process with known ground truth."""

    name: str
    min_d: int
    ate: float
    baseline: Callable
    state_effect: Callable
    time_effect: Callable
    tau: Callable
    cell_probabilities: Callable


SETUPS = {
    "A": DgpDef(
        name="A",
        min_d=5,
        ate=1.0,
        baseline=lambda x: np.maximum(x[:, 0] + x[:, 1], 0.0),
        state_effect=lambda x: x[:, 3],
        time_effect=lambda x: x[:, 2],
        tau=lambda x: np.ones(x.shape[0]),
        cell_probabilities=_constant_cells(0.4, 0.4),
    ),
    "B": DgpDef(
        name="B",
        min_d=5,
        ate=1.0,
        baseline=lambda x: np.maximum(x[:, 0] + x[:, 1], 0.0),
        state_effect=lambda x: _softplus(-x[:, 3] - x[:, 4]),
        time_effect=lambda x: 2.0 * _softplus(x[:, 0] + x[:, 1] + x[:, 2]),
        tau=lambda x: np.ones(x.shape[0]),
        cell_probabilities=_sequential_cells,
    ),
    "C": DgpDef(
        name="C",
        min_d=1,
        ate=1.0,
        baseline=lambda x: 2.0 * np.sin(3.0 * x[:, 0]),
        state_effect=_zeros,
        time_effect=_zeros,
        tau=lambda x: np.ones(x.shape[0]),
        cell_probabilities=_sine_cells,
    ),
    "D": DgpDef(
        name="D",
        min_d=5,
        ate=2.0,
        baseline=_zeros,
        state_effect=_zeros,
        time_effect=lambda x: 5.0
        * (
            np.sin(np.pi * x[:, 0] * x[:, 1])
            + 2.0 * (x[:, 2] - 0.5) ** 2
            + x[:, 3]
            + 0.5 * x[:, 4]
        ),
        tau=lambda x: np.full(x.shape[0], 2.0),
        cell_probabilities=_constant_cells(0.5, 0.5),
    ),
    "E": DgpDef(
        name="E",
        min_d=5,
        ate=2.0,
        baseline=lambda x: 2.0 * _softplus(x[:, 0] + x[:, 1] + x[:, 2])
        + np.sin(np.pi * x[:, 0] * x[:, 1]),
        state_effect=lambda x: _softplus(-x[:, 3] - x[:, 4]),
        time_effect=lambda x: 2.0 * _softplus(x[:, 0] + x[:, 1] + x[:, 2]),
        tau=lambda x: (x[:, 0] + x[:, 1]) ** 2,
        cell_probabilities=_sequential_cells,
    ),
    "F": DgpDef(
        name="F",
        min_d=5,
        ate=0.0,
        baseline=lambda x: np.maximum(x[:, 0] + x[:, 1], 0.0),
        state_effect=lambda x: expit(-x[:, 3]),
        time_effect=lambda x: expit(-x[:, 2]),
        tau=lambda x: np.sin(2.0 * np.pi * x[:, 0]) + x[:, 3] + 0.5 * x[:, 4],
        cell_probabilities=_f_cells,
    ),
}


@dataclass(frozen=True)
class SetupSpec:
    """One simulation cell: which setup, at what size and dimension."""

    id: str
    n: int
    d: int
    seed: int = 0

    def __post_init__(self):
        if self.id not in SETUPS:
            raise ValueError(f"unknown setup {self.id!r}; choose from {sorted(SETUPS)}")
        need = SETUPS[self.id].min_d
        if self.d < need:
            raise ValueError(f"setup {self.id} needs d >= {need}, got {self.d}")

    @property
    def dgp(self) -> DgpDef:
        return SETUPS[self.id]


@dataclass(frozen=True)
class GroundTruth:
    """True nuisance values at the drawn covariates, plus the target."""

    cells: np.ndarray
    b: np.ndarray
    xi: np.ndarray
    rho: np.ndarray
    tau_x: np.ndarray
    ate: float

    def g_cells(self) -> np.ndarray:
        """Conditional means for the four cells, order (0,0),(0,1),(1,0),(1,1)."""
        return np.column_stack(
            [
                self.b,
                self.b + self.rho,
                self.b + self.xi,
                self.b + self.xi + self.rho + self.tau_x,
            ]
        )

    def to_nuisances(self, f_min: float = 0.05) -> CrossFittedNuisances:
        m, nu, sigma, _, _, _, _ = nuisances_from_cells(self.g_cells(), self.cells)
        return assemble_nuisances(m, self.cells, nu, sigma, f_min=f_min)


def generate(dgp: DgpDef, n: int, d: int, seed: int, noise_sd: float = 1.0):
    """Draw a dataset from a DGP definition; returns (Dataset, GroundTruth)."""
    if d < dgp.min_d:
        raise ValueError(f"setup {dgp.name} needs d >= {dgp.min_d}, got {d}")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d))
    cells = dgp.cell_probabilities(x)
    if np.any(cells <= 0):
        raise RuntimeError("DGP produced a nonpositive cell probability")
    cum = np.cumsum(cells, axis=1)
    u = rng.random(n)
    code = (u[:, None] > cum).sum(axis=1)
    s = code // 2
    t = code % 2
    b = dgp.baseline(x)
    xi = dgp.state_effect(x)
    rho = dgp.time_effect(x)
    tau_x = dgp.tau(x)
    eps = noise_sd * rng.standard_normal(n) if noise_sd > 0 else 0.0
    y = b + s * xi + t * rho + s * t * tau_x + eps
    truth = GroundTruth(cells=cells, b=b, xi=xi, rho=rho, tau_x=tau_x, ate=dgp.ate)
    return Dataset(x=x, s=s, t=t, y=y), truth


def gen_setup(spec: SetupSpec, noise_sd: float = 1.0):
    return generate(spec.dgp, spec.n, spec.d, spec.seed, noise_sd=noise_sd)


def oracle_tr_estimate(
    data: Dataset,
    truth: GroundTruth,
    folds=None,
    level: float = 0.95,
) -> EstimateReport:
    """Transformed regression with true nuisance values.

    Without folds the slope is taken over the full sample (oracle
    functions need no cross-fitting); with folds it follows the exact
    fold-combination path of the fitted estimator.
    """
    nuis = truth.to_nuisances()
    if folds is not None:
        return tr_estimate(data, nuis, folds, level=level, method=Method.ORACLE_TR)
    from .estimators import assemble_abch

    a, b, c, h = assemble_abch(data, nuis)
    tau_hat, se, _ = tr_core(h, c, np.zeros(data.n, dtype=int), 1)
    return EstimateReport.from_normal(Method.ORACLE_TR, tau_hat, se, data.n, level)


def estimate_all(
    data: Dataset,
    methods,
    config: EstimationConfig | None = None,
    truth: GroundTruth | None = None,
) -> dict:
    """Run the requested estimators, sharing nuisances across methods.

    Returns {method: EstimateReport}; raises on the first method
    failure (the trial runner catches and records per-method).
    """
    config = config or EstimationConfig()
    methods = [Method(m) for m in methods]
    out = {}
    needs_nuis = {Method.TR, Method.AIPW, Method.IPW, Method.AMLE}
    nuis = folds = None
    tau_x = None
    if needs_nuis & set(methods):
        data.validate_for_estimation()
        folds = make_folds(data.n, config.k_folds, config.seed, data.cells())
        order = config.basis_max_order or default_max_order(data.d)
        basis = build_basis(
            data.d, order, univariate_order=max(order, config.basis_univariate_order)
        )
        nuis = crossfit_nuisances(data, folds, basis, config)
        if {Method.AIPW, Method.AMLE} & set(methods):
            tau_x, _ = hte_fit(data, nuis, folds, basis, config.ridge_lambdas)
    for method in methods:
        if method == Method.SAMPLE_MEANS:
            out[method] = sample_means(data, config.level)
        elif method == Method.OLS:
            out[method] = ols_baseline(data, config.level)
        elif method == Method.TR:
            out[method] = tr_estimate(data, nuis, folds, config.level)
        elif method == Method.IPW:
            out[method] = ipw_estimate(data, nuis, config.level)
        elif method == Method.AIPW:
            out[method] = aipw_estimate(data, nuis, tau_x, folds, config.level)
        elif method == Method.AMLE:
            sigma2 = config.sigma2_override or estimate_sigma2(data, nuis, tau_x)
            amle_order = config.amle_basis_max_order or config.basis_max_order
            amle_order = amle_order or default_max_order(data.d)
            f_amle = basis_matrix(build_basis(data.d, amle_order), data)
            problem = build_qp(f_amle, data.s, data.t, sigma2)
            weights = solve_qp(problem, tol=config.qp_tol, max_iter=config.qp_max_iter)
            out[method] = amle_estimate(data, nuis, tau_x, weights, config.level)
        elif method == Method.ORACLE_TR:
            if truth is None:
                raise ValueError("oracle_tr needs ground truth")
            out[method] = oracle_tr_estimate(data, truth, level=config.level)
        else:
            raise ValueError(f"method {method.value} cannot be run directly")
    return out


@dataclass
class MetricsTable:
    """Aggregated Monte Carlo results, one row per (setup, n, d, method)."""

    rows: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        import csv as _csv

        cols = ["setup", "n", "d", "method", "reps", "failures", "bias", "coverage", "rmse"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = _csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)

    def to_json(self) -> str:
        return json.dumps(self.rows, indent=2)

    def get(self, setup, n, d, method) -> dict:
        method = Method(method).value
        for row in self.rows:
            if (row["setup"], row["n"], row["d"], row["method"]) == (setup, n, d, method):
                return row
        raise KeyError((setup, n, d, method))

    def oracle_comparison_json(self) -> str:
        """Plot-ready pairing of each method's MSE with the oracle's."""
        oracle = {
            (r["setup"], r["n"], r["d"]): r["mse"]
            for r in self.rows
            if r["method"] == Method.ORACLE_TR.value
        }
        points = [
            {
                "setup": r["setup"],
                "n": r["n"],
                "d": r["d"],
                "method": r["method"],
                "mse": r["mse"],
                "oracle_mse": oracle.get((r["setup"], r["n"], r["d"])),
            }
            for r in self.rows
            if r["method"] != Method.ORACLE_TR.value
        ]
        return json.dumps(points, indent=2)


def rep_seed(master_seed: int, setup_id: str, n: int, d: int, rep: int) -> int:
    """Deterministic per-repetition seed; any table cell can be rerun alone."""
    ss = np.random.SeedSequence((master_seed, ord(setup_id), n, d, rep))
    return int(ss.generate_state(1)[0])


def _one_rep(spec_id, n, d, methods, config, master_seed, rep):
    seed = rep_seed(master_seed, spec_id, n, d, rep)
    spec = SetupSpec(id=spec_id, n=n, d=d, seed=seed)
    data, truth = gen_setup(spec)
    results = {}
    for m in methods:
        try:
            rep_out = estimate_all(data, [m], config.replace(seed=seed), truth=truth)
            results[Method(m).value] = rep_out[Method(m)]
        except Exception as exc:  # noqa: BLE001 - failures are data of the study
            results[Method(m).value] = f"{type(exc).__name__}: {exc}"
    return results


def _one_rep_shared(spec_id, n, d, methods, config, master_seed, rep):
    """Like _one_rep but shares nuisance fits across methods within the rep."""
    seed = rep_seed(master_seed, spec_id, n, d, rep)
    spec = SetupSpec(id=spec_id, n=n, d=d, seed=seed)
    data, truth = gen_setup(spec)
    try:
        rep_out = estimate_all(data, methods, config.replace(seed=seed), truth=truth)
        return {Method(m).value: rep_out[Method(m)] for m in methods}
    except Exception:  # noqa: BLE001 - fall back to per-method isolation
        return _one_rep(spec_id, n, d, methods, config, master_seed, rep)


def run_trials(
    setups,
    methods,
    reps: int,
    seed: int = 0,
    config: EstimationConfig | None = None,
    n_jobs: int = 1,
) -> MetricsTable:
    """Monte Carlo study over setup templates and methods.

    ``setups`` is an iterable of SetupSpec templates (their own seeds
    are ignored; per-rep seeds derive from ``seed``).  Method failures
    inside a rep are recorded and excluded from the aggregates.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    config = config or EstimationConfig()
    methods = [Method(m).value for m in methods]
    table = MetricsTable()
    for spec in setups:
        runner = Parallel(n_jobs=n_jobs) if n_jobs != 1 else None
        args = [(spec.id, spec.n, spec.d, methods, config, seed, r) for r in range(reps)]
        if runner is None:
            all_results = [_one_rep_shared(*a) for a in args]
        else:
            all_results = runner(delayed(_one_rep_shared)(*a) for a in args)
        ate = spec.dgp.ate
        for m in methods:
            estimates, covered, failures = [], [], []
            for r, res in enumerate(all_results):
                got = res[m]
                if isinstance(got, EstimateReport):
                    estimates.append(got.tau_hat)
                    covered.append(got.ci_low <= ate <= got.ci_high)
                else:
                    failures.append({"rep": r, "reason": got})
            est = np.asarray(estimates)
            row = {
                "setup": spec.id,
                "n": spec.n,
                "d": spec.d,
                "method": m,
                "reps": reps,
                "failures": len(failures),
                "bias": float(np.mean(est) - ate) if est.size else float("nan"),
                "coverage": float(np.mean(covered)) if covered else float("nan"),
                "rmse": float(np.sqrt(np.mean((est - ate) ** 2))) if est.size else float("nan"),
                "mse": float(np.mean((est - ate) ** 2)) if est.size else float("nan"),
                "var": float(np.var(est, ddof=1)) if est.size > 1 else float("nan"),
                "ate": ate,
                "failure_reasons": failures,
            }
            table.rows.append(row)
    return table
