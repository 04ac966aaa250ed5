"""Radial feeder model and the linearised DistFlow voltage equation.

Buses are re-indexed so that the slack bus is 0 and the downstream buses are
1..n.  Row/column ``k`` of the adjacency matrices corresponds to bus ``k + 1``.
Impedances are per-unit; nodal loads are given in kW/kvar and converted with
``s_base``.  Voltages are squared magnitudes (p.u.^2) throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class TopologyError(ValueError):
    """Line list does not describe a tree rooted at the slack bus."""

    def __init__(self, message: str, bus: int | None = None):
        super().__init__(message)
        self.bus = bus


@dataclass(frozen=True)
class LineSegment:
    from_bus: int
    to_bus: int
    resistance: float
    reactance: float

    def __post_init__(self):
        if self.resistance < 0 or self.reactance < 0:
            raise ValueError(
                f"line {self.from_bus}-{self.to_bus}: impedance must be non-negative"
            )


def parent_map(lines: Sequence[LineSegment], n: int) -> dict[int, tuple[int, LineSegment]]:
    """Orient ``lines`` away from bus 0 and return ``{child: (parent, line)}``.

    Lines may be listed in either direction.  Raises :class:`TopologyError`
    for cycles, duplicate parents, out-of-range or disconnected buses.
    """
    adj: dict[int, list[LineSegment]] = {b: [] for b in range(n + 1)}
    for ln in lines:
        for b in (ln.from_bus, ln.to_bus):
            if b not in adj:
                raise TopologyError(f"bus {b} is outside 0..{n}", bus=b)
        if ln.from_bus == ln.to_bus:
            raise TopologyError(f"self-loop at bus {ln.from_bus}", bus=ln.from_bus)
        adj[ln.from_bus].append(ln)
        adj[ln.to_bus].append(ln)

    parents: dict[int, tuple[int, LineSegment]] = {}
    seen = {0}
    stack = [0]
    used: set[int] = set()
    while stack:
        u = stack.pop()
        for ln in adj[u]:
            if id(ln) in used:
                continue
            used.add(id(ln))
            v = ln.to_bus if ln.from_bus == u else ln.from_bus
            if v in seen:
                if v == 0:
                    raise TopologyError("cycle through the slack bus", bus=0)
                if v in parents:
                    raise TopologyError(f"bus {v} has more than one parent", bus=v)
                raise TopologyError(f"cycle detected at bus {v}", bus=v)
            seen.add(v)
            parents[v] = (u, ln)
            stack.append(v)

    missing = sorted(set(range(1, n + 1)) - seen)
    if missing:
        raise TopologyError(f"bus {missing[0]} is not connected to the slack bus", bus=missing[0])
    if len(lines) != n:
        # connected with extra edges among already-seen buses is caught above;
        # this guards against duplicated line entries
        raise TopologyError(f"expected {n} lines for a radial feeder, got {len(lines)}")
    return parents


def root_path(bus: int, parents: dict[int, tuple[int, LineSegment]]) -> list[LineSegment]:
    """Line segments from the slack bus to ``bus``."""
    path = []
    while bus != 0:
        bus, ln = parents[bus]
        path.append(ln)
    return path[::-1]


def build_adjacency(lines: Sequence[LineSegment], n: int) -> tuple[np.ndarray, np.ndarray]:
    """Shared-path resistance and reactance matrices ``(R, X)``, both n x n.

    ``R[i-1, j-1]`` is the total resistance of the lines common to the slack
    paths of buses i and j.  Computed top-down: a child shares its parent's
    row plus its own line on the diagonal.
    """
    parents = parent_map(lines, n)
    R = np.zeros((n, n))
    X = np.zeros((n, n))

    depth = {0: 0}

    def _depth(b: int) -> int:
        if b not in depth:
            depth[b] = _depth(parents[b][0]) + 1
        return depth[b]

    for b in sorted(range(1, n + 1), key=_depth):
        p, ln = parents[b]
        k = b - 1
        if p != 0:
            R[k, :] = R[p - 1, :]
            X[k, :] = X[p - 1, :]
            R[k, k] = R[p - 1, p - 1] + ln.resistance
            X[k, k] = X[p - 1, p - 1] + ln.reactance
        else:
            R[k, :] = 0.0
            X[k, :] = 0.0
            R[k, k] = ln.resistance
            X[k, k] = ln.reactance
        R[:, k] = R[k, :]
        X[:, k] = X[k, :]
    return R, X


@dataclass(frozen=True)
class NetworkModel:
    n: int
    lines: tuple[LineSegment, ...]
    R: np.ndarray = field(repr=False)
    X: np.ndarray = field(repr=False)
    v0_sq: float = 1.0
    v_lower_sq: float = 0.95**2
    v_upper_sq: float = 1.05**2
    s_base: float = 1000.0

    @classmethod
    def from_lines(
        cls,
        lines: Sequence[LineSegment],
        n: int,
        v0: float = 1.0,
        v_lower: float = 0.95,
        v_upper: float = 1.05,
        s_base: float = 1000.0,
    ) -> "NetworkModel":
        """Build from voltage *magnitudes*; bounds are stored squared."""
        if not 0 < v_lower <= v0 <= v_upper:
            raise ValueError("voltage bounds must satisfy 0 < v_lower <= v0 <= v_upper")
        if s_base <= 0:
            raise ValueError("s_base must be positive")
        R, X = build_adjacency(lines, n)
        R.setflags(write=False)
        X.setflags(write=False)
        return cls(
            n=n,
            lines=tuple(lines),
            R=R,
            X=X,
            v0_sq=v0**2,
            v_lower_sq=v_lower**2,
            v_upper_sq=v_upper**2,
            s_base=float(s_base),
        )


def voltage_profile(net: NetworkModel, p: np.ndarray, q: np.ndarray | None = None) -> np.ndarray:
    """Squared nodal voltages (n x T) for active loads ``p`` (kW) and reactive ``q`` (kvar)."""
    p = np.asarray(p, dtype=float)
    if p.ndim != 2 or p.shape[0] != net.n:
        raise ValueError(f"p must have shape ({net.n}, T), got {p.shape}")
    if q is None:
        q = np.zeros_like(p)
    q = np.asarray(q, dtype=float)
    if q.shape != p.shape:
        raise ValueError(f"q shape {q.shape} does not match p shape {p.shape}")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
        raise ValueError("loads must be finite")
    return net.v0_sq - 2.0 * (net.R @ p) / net.s_base - 2.0 * (net.X @ q) / net.s_base


def check_voltage_bounds(V: np.ndarray, net: NetworkModel) -> np.ndarray:
    """Worst lower-bound violation per bus (p.u.^2); zero means feasible."""
    V = np.asarray(V, dtype=float)
    return np.maximum(0.0, net.v_lower_sq - V).max(axis=1)


def check_upper_bounds(V: np.ndarray, net: NetworkModel) -> np.ndarray:
    """Worst upper-bound violation per bus (p.u.^2)."""
    V = np.asarray(V, dtype=float)
    return np.maximum(0.0, V - net.v_upper_sq).max(axis=1)
