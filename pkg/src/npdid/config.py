"""Shared estimation configuration."""
from __future__ import annotations

from dataclasses import dataclass, field, fields

DEFAULT_RIDGE_LAMBDAS = (1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0)


@dataclass
class EstimationConfig:
    """Knobs shared by the nuisance fits, the balancing solver, and the CLI.

    ``basis_max_order=None`` defers to the dimension-dependent default
    (3 for d <= 6, otherwise 2); ``amle_basis_max_order=None`` reuses
    the nuisance order for the balancing program.
    """

    k_folds: int = 5
    basis_max_order: int | None = None
    basis_univariate_order: int = 15
    ridge_lambdas: tuple = DEFAULT_RIDGE_LAMBDAS
    eta_clip: float = 0.01
    f_min: float = 0.05
    seed: int = 0
    propensity_ridge: float | tuple = (0.03, 0.3, 3.0, 30.0)
    qp_tol: float = 1e-8
    qp_max_iter: int = 50000
    sigma2_override: float | None = None
    amle_basis_max_order: int | None = None
    level: float = 0.95
    n_jobs: int = 1

    def replace(self, **kwargs) -> "EstimationConfig":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(kwargs)
        return EstimationConfig(**vals)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out
