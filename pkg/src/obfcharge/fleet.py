"""EV charging model: per-EV limits and projection onto the local feasible set.

The feasible set of one EV is the box ``0 <= r <= r_max`` intersected with the
energy hyperplane ``delta_t * eta * sum(r) = demand``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BISECTION_TOL = 1e-9  # kWh
BISECTION_MAX_STEPS = 200


class InfeasibleDemandError(ValueError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    T: int
    delta_t: float  # hours

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.delta_t <= 0:
            raise ValueError("delta_t must be positive")


@dataclass(frozen=True)
class EVSpec:
    id: int
    bus: int
    r_max: float  # kW
    demand: float  # kWh
    eta: float = 0.85
    gamma: float = 4e-4

    def __post_init__(self):
        if self.r_max <= 0:
            raise ValueError(f"EV {self.id}: r_max must be positive")
        if not 0 < self.eta <= 1:
            raise ValueError(f"EV {self.id}: eta must lie in (0, 1]")
        if self.gamma < 0:
            raise ValueError(f"EV {self.id}: gamma must be non-negative")
        if self.demand < 0:
            raise InfeasibleDemandError(f"EV {self.id}: negative demand {self.demand}")

    def max_energy(self, grid: TimeGrid) -> float:
        return grid.T * grid.delta_t * self.eta * self.r_max

    def check_feasible(self, grid: TimeGrid) -> None:
        cap = self.max_energy(grid)
        if self.demand > cap * (1 + 1e-12):
            raise InfeasibleDemandError(
                f"EV {self.id}: demand {self.demand} kWh exceeds the reachable "
                f"{cap:.6g} kWh (T={grid.T}, delta_t={grid.delta_t}, "
                f"eta={self.eta}, r_max={self.r_max})"
            )


def _clip_sum(V, theta, c, r_max):
    R = V - (theta * c)[:, None]
    np.maximum(R, 0.0, out=R)
    np.minimum(R, r_max[:, None], out=R)
    return R, c * R.sum(axis=1)


def project_batch(V: np.ndarray, r_max, demand, coef) -> np.ndarray:
    """Project each row of ``V`` onto its own box/energy set.

    ``r_max``, ``demand`` and ``coef`` (= delta_t * eta) are per-row.  Solves
    for the scalar shift ``theta`` of each row by bisection on the monotone
    function ``theta -> coef * sum(clip(v - theta*coef, 0, r_max))`` and then
    polishes ``theta`` in closed form on the identified free set.
    """
    V = np.atleast_2d(np.asarray(V, dtype=float))
    k = V.shape[0]
    r_max = np.broadcast_to(np.asarray(r_max, dtype=float), (k,))
    demand = np.broadcast_to(np.asarray(demand, dtype=float), (k,))
    c = np.broadcast_to(np.asarray(coef, dtype=float), (k,))
    T = V.shape[1]
    if np.any(demand > c * T * r_max * (1 + 1e-12)) or np.any(demand < 0):
        raise InfeasibleDemandError("demand outside [0, T * coef * r_max]")
    if not np.all(np.isfinite(V)):
        raise ValueError("cannot project a non-finite vector")

    lo = (V.min(axis=1) - r_max) / c  # everything saturated at r_max
    hi = V.max(axis=1) / c  # everything clipped to zero
    for _ in range(BISECTION_MAX_STEPS):
        mid = 0.5 * (lo + hi)
        _, energy = _clip_sum(V, mid, c, r_max)
        above = energy > demand
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
        if np.abs(energy - demand).max() <= BISECTION_TOL or (hi - lo).max() <= 0:
            break
    # the last midpoint is the evaluated iterate, not the bracket centre
    theta = mid
    R, energy = _clip_sum(V, theta, c, r_max)

    # closed-form theta on the free set, kept only where it does not make things worse
    free = (R > 0) & (R < r_max[:, None])
    n_free = free.sum(axis=1)
    n_up = (R >= r_max[:, None]).sum(axis=1)
    ok = n_free > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        theta_exact = (np.where(free, V, 0.0).sum(axis=1) + n_up * r_max - demand / c) / (
            c * n_free
        )
    theta_exact = np.where(ok, theta_exact, theta)
    R2, energy2 = _clip_sum(V, theta_exact, c, r_max)
    better = np.abs(energy2 - demand) <= np.abs(energy - demand)
    return np.where(better[:, None], R2, R)


def project_feasible(v, spec: EVSpec, grid: TimeGrid) -> np.ndarray:
    """Euclidean projection of ``v`` onto the feasible set of ``spec``."""
    spec.check_feasible(grid)
    v = np.asarray(v, dtype=float)
    if v.shape != (grid.T,):
        raise ValueError(f"expected a length-{grid.T} vector, got shape {v.shape}")
    return project_batch(v[None, :], spec.r_max, spec.demand, grid.delta_t * spec.eta)[0]


def demand_residual(r, spec: EVSpec, grid: TimeGrid) -> float:
    """Delivered minus requested energy (kWh)."""
    return float(grid.delta_t * spec.eta * np.sum(r) - spec.demand)


def generate_fleet(
    n_buses: int,
    evs_per_bus: int,
    demand_range: tuple[float, float],
    r_max: float,
    eta: float,
    seed: int,
    grid: TimeGrid,
    gamma: float = 4e-4,
) -> list[EVSpec]:
    """Bus-major fleet: EVs ``b*evs_per_bus .. (b+1)*evs_per_bus - 1`` sit at bus ``b + 1``."""
    lo, hi = demand_range
    if not 0 <= lo <= hi:
        raise ValueError("demand_range must satisfy 0 <= low <= high")
    cap = grid.T * grid.delta_t * eta * r_max
    if hi > cap:
        raise InfeasibleDemandError(
            f"demand upper bound {hi} kWh exceeds the reachable {cap:.6g} kWh"
        )
    rng = np.random.default_rng(seed)
    demands = rng.uniform(lo, hi, size=n_buses * evs_per_bus)
    return [
        EVSpec(
            id=k,
            bus=k // evs_per_bus + 1,
            r_max=float(r_max),
            demand=float(demands[k]),
            eta=float(eta),
            gamma=float(gamma),
        )
        for k in range(n_buses * evs_per_bus)
    ]
