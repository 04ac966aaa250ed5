"""Relaxed-Lagrangian machinery for the valley-filling problem.

Objective: ``J = 0.5 * ||p_b + sum_i r_i||^2`` subject to each EV's local set
and the lower nodal-voltage bound, which is dualised with one non-negative
multiplier vector per bus.

The primal gradient for an EV at bus k is ``p_b + sum_i p_i - s_hat`` with
``s_hat = sum_i d(lambda_i' V_i)/dr = -2 * sum_i R[i, k] * lambda_i``: since
voltages fall with load, a positive multiplier *raises* the gradient and moves
charging away from the constrained slots.

Units: loads are kW.  The dual gradient is in p.u.^2 (it uses loads divided by
``s_base``), while the voltage term of the primal gradient carries no
``s_base`` factor.  This is the exact
Lagrangian gradient for multipliers measured in ``s_base`` units, i.e. the
saddle point is unchanged and ``s_base`` only rescales the effective dual step.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .fleet import EVSpec, TimeGrid, project_batch, project_feasible
from .network import NetworkModel, voltage_profile

if TYPE_CHECKING:
    from .scenario import Scenario

ORACLE_MAX_SIZE = 500  # n_evs * T
GRID_SEARCH_MAX_DIMS = 3


class OracleConvergenceError(RuntimeError):
    def __init__(self, message: str, primal_change: float, dual_change: float, iterations: int):
        super().__init__(message)
        self.primal_change = primal_change
        self.dual_change = dual_change
        self.iterations = iterations


class OracleSizeError(ValueError):
    pass


@dataclass
class DualState:
    lam: np.ndarray  # n x T, >= 0
    beta: np.ndarray  # n

    @classmethod
    def zeros(cls, n: int, T: int, beta) -> "DualState":
        return cls(np.zeros((n, T)), np.broadcast_to(np.asarray(beta, float), (n,)).copy())


@dataclass
class SubgradientContext:
    p_base: np.ndarray  # (T,) aggregated baseline, kW
    p_bus: np.ndarray  # (n, T) nodal EV loads (exact or SO estimate), kW
    v_tilde: float  # v_lower_sq - v0_sq
    bus_baseline: np.ndarray | None = None  # (n, T) baseline share per bus for voltages

    @classmethod
    def build(cls, net: NetworkModel, p_base, p_bus, bus_baseline=None) -> "SubgradientContext":
        return cls(
            p_base=np.asarray(p_base, float),
            p_bus=np.asarray(p_bus, float),
            v_tilde=net.v_lower_sq - net.v0_sq,
            bus_baseline=None if bus_baseline is None else np.asarray(bus_baseline, float),
        )

    def nodal_load(self) -> np.ndarray:
        if self.bus_baseline is None:
            return self.p_bus
        return self.p_bus + self.bus_baseline


def bus_primal_gradients(ctx: SubgradientContext, lam: np.ndarray, net: NetworkModel) -> np.ndarray:
    """Primal gradient for every bus at once, shape (n, T); row k-1 serves bus k."""
    total = ctx.p_base + ctx.p_bus.sum(axis=0)
    return total[None, :] + 2.0 * (net.R.T @ lam)


def primal_subgradient(ctx: SubgradientContext, lam: DualState | np.ndarray, ev_bus: int, net: NetworkModel) -> np.ndarray:
    """``p_b + sum_i p_i - s_hat`` for an EV at bus ``ev_bus``."""
    if not 1 <= ev_bus <= net.n:
        raise IndexError(f"bus {ev_bus} outside 1..{net.n}")
    L = lam.lam if isinstance(lam, DualState) else np.asarray(lam, float)
    s_hat = -2.0 * (net.R[:, ev_bus - 1] @ L)
    return ctx.p_base + ctx.p_bus.sum(axis=0) - s_hat


def bus_dual_gradients(ctx: SubgradientContext, net: NetworkModel) -> np.ndarray:
    """``v_lower_sq - V_i`` for all buses, shape (n, T)."""
    return ctx.v_tilde + 2.0 * (net.R @ ctx.nodal_load()) / net.s_base


def dual_subgradient(ctx: SubgradientContext, bus: int, net: NetworkModel) -> np.ndarray:
    if not 1 <= bus <= net.n:
        raise IndexError(f"bus {bus} outside 1..{net.n}")
    return ctx.v_tilde + 2.0 * (net.R[bus - 1] @ ctx.nodal_load()) / net.s_base


def primal_update(r, grad, spec: EVSpec, grid: TimeGrid) -> np.ndarray:
    grad = np.asarray(grad, float)
    if not np.all(np.isfinite(grad)):
        raise ValueError("non-finite primal gradient")
    return project_feasible(np.asarray(r, float) - spec.gamma * grad, spec, grid)


def dual_update(lambda_i, grad, beta) -> np.ndarray:
    return np.maximum(0.0, np.asarray(lambda_i, float) + beta * np.asarray(grad, float))


def objective(p_base, profiles) -> float:
    total = np.asarray(p_base, float).copy()
    for r in profiles:
        total = total + np.asarray(r, float)
    return 0.5 * float(total @ total)


def bus_incidence(evs: Sequence[EVSpec], n: int) -> np.ndarray:
    """(n, n_evs) 0/1 matrix mapping EV profiles to nodal loads."""
    B = np.zeros((n, len(evs)))
    for k, ev in enumerate(evs):
        B[ev.bus - 1, k] = 1.0
    return B


@dataclass
class OracleSolution:
    profiles: np.ndarray  # n_evs x T
    lam: np.ndarray  # n x T
    objective: float
    iterations: int
    grid_objective: float | None = None


def solve_centralized_oracle(
    scenario: "Scenario",
    tol: float = 1e-8,
    max_iter: int = 200_000,
    cross_check: bool = True,
) -> OracleSolution:
    """Full-information projected primal-dual iteration on the stacked problem.

    Starts from zero profiles and multipliers, uses the exact nodal loads and
    stops once both the primal and dual iterates move by at most ``tol``.
    Instances with at most three free coordinates are cross-checked against
    :func:`grid_search`.
    """
    net, grid, evs = scenario.net, scenario.grid, scenario.evs
    n_ev, T = len(evs), grid.T
    if n_ev * T > ORACLE_MAX_SIZE:
        raise OracleSizeError(
            f"oracle limited to n_evs * T <= {ORACLE_MAX_SIZE}; got {n_ev} * {T} = {n_ev * T}"
        )
    p_b = scenario.baseline
    lam = np.zeros((net.n, T))
    if n_ev == 0:
        return OracleSolution(np.zeros((0, T)), lam, objective(p_b, []), 0)

    B = bus_incidence(evs, net.n)
    rows = np.array([ev.bus - 1 for ev in evs])
    gamma = np.array([ev.gamma for ev in evs])
    r_max = np.array([ev.r_max for ev in evs])
    demand = np.array([ev.demand for ev in evs])
    coef = np.array([grid.delta_t * ev.eta for ev in evs])
    beta = scenario.beta[:, None]
    base_bus = scenario.bus_baseline_matrix()

    r = np.zeros((n_ev, T))
    dr = dl = np.inf
    for it in range(1, max_iter + 1):
        total = p_b + r.sum(axis=0)
        grad = total[None, :] + 2.0 * (net.R @ lam)[rows]
        r_new = project_batch(r - gamma[:, None] * grad, r_max, demand, coef)
        V = voltage_profile(net, B @ r + base_bus)
        lam_new = np.maximum(0.0, lam + beta * (net.v_lower_sq - V))
        dr = float(np.abs(r_new - r).max())
        dl = float(np.abs(lam_new - lam).max())
        r, lam = r_new, lam_new
        if not (np.isfinite(dr) and np.isfinite(dl)):
            break
        if dr <= tol and dl <= tol:
            sol = OracleSolution(r, lam, objective(p_b, r), it)
            if cross_check and n_ev * (T - 1) <= GRID_SEARCH_MAX_DIMS:
                sol.grid_objective = grid_search(scenario)
                if sol.objective > sol.grid_objective + 1e-6:
                    raise OracleConvergenceError(
                        f"oracle objective {sol.objective} exceeds grid search {sol.grid_objective}",
                        dr, dl, it,
                    )
            return sol
    raise OracleConvergenceError(
        f"oracle did not reach tol={tol} in {max_iter} iterations "
        f"(primal change {dr:.3e}, dual change {dl:.3e})",
        dr, dl, max_iter,
    )


def _segment_grid(ev: EVSpec, grid: TimeGrid, points: int) -> list[np.ndarray]:
    """Grid over one EV's feasible set, parameterised by its first T-1 entries."""
    T = grid.T
    total = ev.demand / (grid.delta_t * ev.eta)  # sum of r over slots
    if T == 1:
        return [np.array([total])] if total <= ev.r_max + 1e-12 else []
    axis = np.linspace(0.0, ev.r_max, points)
    out = []
    for head in itertools.product(axis, repeat=T - 1):
        last = total - sum(head)
        if -1e-12 <= last <= ev.r_max + 1e-12:
            out.append(np.array([*head, min(max(last, 0.0), ev.r_max)]))
    return out


def grid_search(scenario: "Scenario", points: int | None = None) -> float:
    """Brute-force minimum of J over voltage-feasible grid points (tiny instances only)."""
    net, grid, evs = scenario.net, scenario.grid, scenario.evs
    dims = len(evs) * (grid.T - 1)
    if dims > GRID_SEARCH_MAX_DIMS:
        raise OracleSizeError("grid search limited to three free coordinates")
    if points is None:
        points = max(3, int(round(200_000 ** (1 / max(dims, 1)))))
    per_ev = [_segment_grid(ev, grid, points) for ev in evs]
    B = bus_incidence(evs, net.n)
    base_bus = scenario.bus_baseline_matrix()
    best = np.inf
    for combo in itertools.product(*per_ev):
        r = np.array(combo)
        V = voltage_profile(net, B @ r + base_bus)
        if np.any(V < net.v_lower_sq - 1e-12):
            continue
        best = min(best, objective(scenario.baseline, r))
    return float(best)


def flat_level(p_base, energy: float, delta_t: float) -> float:
    """Water level ``L`` with ``sum(max(0, L - p_b)) * delta_t == energy`` (kWh at the grid)."""
    p_base = np.asarray(p_base, float)
    lo, hi = float(p_base.min()), float(p_base.max()) + energy / delta_t
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.maximum(0.0, mid - p_base).sum() * delta_t > energy:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def valley_flatness(p_base, profiles, evs: Sequence[EVSpec], grid: TimeGrid) -> tuple[float, np.ndarray]:
    """Coefficient of variation of the total load over the slots under the flat level.

    The flat level ignores per-EV power limits and the voltage constraint; it
    is the ideal valley fill for the fleet's total energy draw.
    """
    energy = sum(ev.demand / ev.eta for ev in evs)
    level = flat_level(p_base, energy, grid.delta_t)
    mask = np.asarray(p_base) < level
    total = np.asarray(p_base, float) + np.asarray(profiles, float).sum(axis=0)
    sel = total[mask]
    return float(sel.std() / sel.mean()), mask
