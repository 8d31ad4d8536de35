"""Minimax balancing weights and the augmented estimator built on them.

The weights solve a convex quadratic program: minimize a variance
penalty plus the squared worst-case imbalance of the four outcome
components (baseline, state, time, interaction) over a unit ball of
scaled Hermite expansions.  Each worst case is an infinity norm, so the
program has four epigraph variables, four equality constraints, and 8p
linear inequalities.  The solver is an operator-splitting (ADMM) method
with a direct polishing step on the detected active set.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .data import Dataset, EstimateReport, Method
from .estimators import outcome_model_values
from .nuisance import CrossFittedNuisances


class EmptyBasisError(ValueError):
    pass


class NonConvergenceError(RuntimeError):
    def __init__(self, message, residual_trace=None):
        super().__init__(message)
        self.residual_trace = residual_trace or []


@dataclass(frozen=True)
class QPProblem:
    """Data of the balancing program.

    Variables are (gamma in R^n, alpha, beta, delta, eta); the objective
    is sigma2*||gamma||^2 + alpha^2 + beta^2 + delta^2 + eta^2.  alpha
    bounds ||F' gamma||_inf, beta the time-weighted version, delta the
    state-weighted version, and eta ||F'(s*t*gamma) - f_bar||_inf.
    """

    f_matrix: np.ndarray
    s: np.ndarray
    t: np.ndarray
    f_bar: np.ndarray
    sigma2: float

    @property
    def n(self) -> int:
        return self.f_matrix.shape[0]

    @property
    def p(self) -> int:
        return self.f_matrix.shape[1]

    def objective(self, gamma: np.ndarray, epigraph: np.ndarray) -> float:
        return float(self.sigma2 * gamma @ gamma + epigraph @ epigraph)

    def imbalances(self, gamma: np.ndarray) -> np.ndarray:
        """The four infinity-norm imbalances at ``gamma``."""
        f = self.f_matrix
        return np.array(
            [
                np.max(np.abs(f.T @ gamma)),
                np.max(np.abs(f.T @ (self.t * gamma))),
                np.max(np.abs(f.T @ (self.s * gamma))),
                np.max(np.abs(f.T @ (self.s * self.t * gamma) - self.f_bar)),
            ]
        )

    def stacked(self):
        """(P_diag, M, l, u, n_eq) in the form min 1/2 x'Px s.t. l <= Mx <= u."""
        f, s, t = self.f_matrix, self.s, self.t
        n, p = self.n, self.p
        nv = n + 4
        m = 4 + 8 * p
        p_diag = np.concatenate([np.full(n, 2.0 * self.sigma2), np.full(4, 2.0)])
        mat = np.zeros((m, nv))
        low = np.full(m, -np.inf)
        upp = np.zeros(m)
        mat[0, :n] = 1.0
        mat[1, :n] = s
        mat[2, :n] = t
        mat[3, :n] = s * t
        low[:4] = upp[:4] = (0.0, 0.0, 0.0, 1.0)
        row = 4
        blocks = (
            (f.T, n, np.zeros(p)),
            ((f * t[:, None]).T, n + 1, np.zeros(p)),
            ((f * s[:, None]).T, n + 2, np.zeros(p)),
            ((f * (s * t)[:, None]).T, n + 3, self.f_bar),
        )
        for body, slot, offset in blocks:
            mat[row : row + p, :n] = body
            mat[row : row + p, slot] = -1.0
            upp[row : row + p] = offset
            mat[row + p : row + 2 * p, :n] = -body
            mat[row + p : row + 2 * p, slot] = -1.0
            upp[row + p : row + 2 * p] = -offset
            row += 2 * p
        return p_diag, mat, low, upp, 4


@dataclass(frozen=True)
class BalancingWeights:
    """Solution of the balancing program with its optimality certificate."""

    gamma: np.ndarray
    epigraph: np.ndarray  # (alpha, beta, delta, eta)
    objective: float
    kkt_residual: float
    solver_iterations: int

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "gamma"])
            for i, g in enumerate(self.gamma):
                writer.writerow([i, repr(float(g))])


def build_qp(basis_matrix: np.ndarray, s, t, sigma2: float) -> QPProblem:
    """Assemble the balancing program for a basis matrix and indicators."""
    f = np.asarray(basis_matrix, dtype=float)
    if f.ndim != 2 or f.shape[1] == 0:
        raise EmptyBasisError("basis matrix must have at least one column")
    if not np.isfinite(f).all():
        raise ValueError("basis matrix contains non-finite values")
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    codes = (2 * s + t).astype(int)
    if np.unique(codes).size < 4:
        raise ValueError("all four (s, t) cells must be present for feasibility")
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    return QPProblem(f_matrix=f, s=s, t=t, f_bar=f.mean(axis=0), sigma2=float(sigma2))


def _kkt_residuals(p_diag, mat, low, upp, x, y, z=None):
    mx = mat @ x
    z_eff = np.clip(mx, low, upp) if z is None else z
    r_prim = float(np.max(np.abs(mx - z_eff)))
    r_dual = float(np.max(np.abs(p_diag * x + mat.T @ y)))
    return r_prim, r_dual


def _polish(p_diag, mat, low, upp, n_eq, x, y, tol):
    """Solve the equality-constrained QP on the detected active set.

    Returns (x, y, kkt) on success, None when the active-set guess does
    not satisfy the optimality conditions.
    """
    m = mat.shape[0]
    slack = upp - mat @ x
    active = np.zeros(m, dtype=bool)
    active[:n_eq] = True
    active[n_eq:] = (y[n_eq:] > 1e-10) | (slack[n_eq:] < 1e-9)
    for _ in range(4):
        idx = np.flatnonzero(active)
        ma = mat[idx]
        ua = upp[idx]
        mad = ma / p_diag
        schur = mad @ ma.T
        reg = 1e-12 * max(1.0, float(np.trace(schur)) / schur.shape[0])
        schur[np.diag_indices_from(schur)] += reg
        try:
            cho = linalg.cho_factor(schur)
        except linalg.LinAlgError:
            return None
        lam = linalg.cho_solve(cho, -ua)
        for _ in range(2):  # iterative refinement against the regularization
            x_pol = -(ma.T @ lam) / p_diag
            err = ua - ma @ x_pol
            lam = lam - linalg.cho_solve(cho, err)
        x_pol = -(ma.T @ lam) / p_diag
        is_ineq = idx >= n_eq
        neg = is_ineq & (lam < -1e-9)
        if np.any(neg):
            active[idx[neg]] = False
            continue
        y_pol = np.zeros(m)
        y_pol[idx] = np.where(is_ineq, np.maximum(lam, 0.0), lam)
        r_prim, r_dual = _kkt_residuals(p_diag, mat, low, upp, x_pol, y_pol)
        if r_prim <= tol and r_dual <= tol:
            return x_pol, y_pol, max(r_prim, r_dual)
        return None
    return None


def solve_qp(problem: QPProblem, tol: float = 1e-8, max_iter: int = 50000) -> BalancingWeights:
    """Operator-splitting solve of the balancing program.

    ADMM iterations run until the primal and dual residuals of the KKT
    system fall below ``tol`` in infinity norm; once they are moderately
    small the solution is polished by a direct solve on the active set,
    which normally certifies optimality well before the iteration cap.
    """
    p_diag, mat, low, upp, n_eq = problem.stacked()
    nv = p_diag.shape[0]
    m = mat.shape[0]
    sigma_reg = 1e-6
    rho_scale = 0.1
    d_diag = p_diag + sigma_reg
    m_dinv = mat / d_diag
    gram = m_dinv @ mat.T

    def factor(rho_vec):
        q = gram.copy()
        q[np.diag_indices_from(q)] += 1.0 / rho_vec
        return linalg.cho_factor(q)

    def rho_vector(scale):
        rho = np.full(m, scale)
        rho[:n_eq] *= 1e3
        return rho

    rho = rho_vector(rho_scale)
    cho = factor(rho)
    x = np.zeros(nv)
    z = np.clip(mat @ x, low, upp)
    y = np.zeros(m)
    relax = 1.6
    trace = []
    polish_gate = max(tol, 1e-6)
    for it in range(1, max_iter + 1):
        rhs = sigma_reg * x + mat.T @ (rho * z - y)
        w = rhs / d_diag
        x_t = w - (mat.T @ linalg.cho_solve(cho, mat @ w)) / d_diag
        z_t = mat @ x_t
        x = relax * x_t + (1.0 - relax) * x
        v = relax * z_t + (1.0 - relax) * z + y / rho
        z = np.clip(v, low, upp)
        y = rho * (v - z)
        if it % 25 == 0 or it == max_iter:
            r_prim, r_dual = _kkt_residuals(p_diag, mat, low, upp, x, y, z)
            trace.append((it, r_prim, r_dual))
            if r_prim <= tol and r_dual <= tol:
                return _package(problem, x, max(r_prim, r_dual), it)
            if r_prim <= polish_gate and r_dual <= polish_gate:
                polished = _polish(p_diag, mat, low, upp, n_eq, x, y, tol)
                if polished is not None:
                    x_pol, _, kkt = polished
                    return _package(problem, x_pol, kkt, it)
            if it % 200 == 0:
                prim_ref = max(float(np.max(np.abs(mat @ x))), float(np.max(np.abs(z))), 1e-12)
                dual_ref = max(
                    float(np.max(np.abs(p_diag * x))),
                    float(np.max(np.abs(mat.T @ y))),
                    1e-12,
                )
                ratio = (r_prim / prim_ref) / max(r_dual / dual_ref, 1e-16)
                new_scale = float(np.clip(rho_scale * np.sqrt(ratio), 1e-6, 1e6))
                if new_scale > 5.0 * rho_scale or new_scale < rho_scale / 5.0:
                    rho_scale = new_scale
                    rho = rho_vector(rho_scale)
                    cho = factor(rho)
    raise NonConvergenceError(
        f"QP solver did not reach tol={tol} in {max_iter} iterations "
        f"(last residuals prim={trace[-1][1]:.3g}, dual={trace[-1][2]:.3g})",
        residual_trace=trace,
    )


def _package(problem: QPProblem, x: np.ndarray, kkt: float, iterations: int) -> BalancingWeights:
    n = problem.n
    gamma = x[:n].copy()
    epigraph = x[n:].copy()
    return BalancingWeights(
        gamma=gamma,
        epigraph=epigraph,
        objective=problem.objective(gamma, epigraph),
        kkt_residual=float(kkt),
        solver_iterations=iterations,
    )


SIGMA2_FLOOR = 1e-6


def estimate_sigma2(data: Dataset, nuisances: CrossFittedNuisances, tau_x: np.ndarray) -> float:
    """Mean squared cross-fitted outcome-model residual, floored at 1e-6.

    Misfit inflates the estimate, which is the safe direction: the
    value only needs to upper-bound the conditional outcome variance.
    """
    g_hat, _, _ = outcome_model_values(data, nuisances, tau_x)
    return max(float(np.mean((data.y - g_hat) ** 2)), SIGMA2_FLOOR)


def amle_estimate(
    data: Dataset,
    nuisances: CrossFittedNuisances,
    tau_x: np.ndarray,
    weights: BalancingWeights,
    level: float = 0.95,
) -> EstimateReport:
    """Average effect estimate combining the effect fit and balancing weights.

    The program's weights are normalized so the treated-cell weighted
    sum is one; they enter the per-observation correction multiplied by
    n so the estimator is an average of O(1) summands.
    """
    g_hat, _, _ = outcome_model_values(data, nuisances, tau_x)
    n = data.n
    gamma_scaled = n * weights.gamma
    psi = tau_x - gamma_scaled * (g_hat - data.y)
    tau_hat = float(np.mean(psi))
    se = float(np.std(psi, ddof=1) / np.sqrt(n))
    diag = {
        "qp_objective": weights.objective,
        "qp_kkt_residual": weights.kkt_residual,
        "qp_iterations": float(weights.solver_iterations),
        "max_abs_weight": float(np.max(np.abs(gamma_scaled))),
    }
    return EstimateReport.from_normal(Method.AMLE, tau_hat, se, n, level, diag)
