"""Scenario documents: JSON loading, validation and the 13-bus desk scenario."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .fleet import EVSpec, InfeasibleDemandError, TimeGrid, generate_fleet
from .network import LineSegment, NetworkModel, TopologyError
from .obfuscation import ObfuscationKey

MODES = ("private", "plain")
MAX_PAYLOAD = 10_000_000  # floats per EV message


class ScenarioError(ValueError):
    """Validation failure; ``path`` locates the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class Scenario:
    net: NetworkModel
    grid: TimeGrid
    baseline: np.ndarray  # (T,) kW, held by the operator only
    evs: tuple[EVSpec, ...]
    beta: np.ndarray  # (n,)
    mu: np.ndarray  # (n,) per-bus key means, or (n_evs,) when key_scope == "ev"
    sigma_sq: float = 0.2
    m: int = 40
    key_scope: str = "bus"
    epsilon_0: float = 1e-3
    ell_max: int = 5000
    seed: int = 0
    mode: str = "private"
    bus_shares: np.ndarray | None = None  # fraction of the baseline seen at each bus
    name: str = "scenario"
    start: str = "19:00"
    bus_names: tuple[str, ...] = field(default_factory=tuple)

    def key_for(self, ev: EVSpec) -> ObfuscationKey:
        mu = self.mu[ev.id] if self.key_scope == "ev" else self.mu[ev.bus - 1]
        return ObfuscationKey(float(mu), float(self.sigma_sq), int(self.m))

    def bus_key_mean(self, bus: int) -> float:
        """Recovery divisor for ``bus``; per-EV keys are only valid on single-EV buses."""
        if self.key_scope == "ev":
            members = [ev for ev in self.evs if ev.bus == bus]
            return float(self.mu[members[0].id]) if members else 1.0
        return float(self.mu[bus - 1])

    def bus_baseline_matrix(self) -> np.ndarray:
        if self.bus_shares is None:
            return np.zeros((self.net.n, self.grid.T))
        return np.outer(self.bus_shares, self.baseline)

    def evs_at(self, bus: int) -> list[EVSpec]:
        return [ev for ev in self.evs if ev.bus == bus]

    def validate(self) -> "Scenario":
        n, T = self.net.n, self.grid.T
        if self.baseline.shape != (T,) or not np.all(np.isfinite(self.baseline)):
            raise ScenarioError("baseline", f"expected {T} finite values")
        for k, ev in enumerate(self.evs):
            if ev.id != k:
                raise ScenarioError(f"fleet.evs[{k}].id", "EV ids must be 0..n_evs-1 in order")
            if not 1 <= ev.bus <= n:
                raise ScenarioError(f"fleet.evs[{k}].bus", f"bus {ev.bus} outside 1..{n}")
            try:
                ev.check_feasible(self.grid)
            except InfeasibleDemandError as exc:
                raise ScenarioError(f"fleet.evs[{k}].demand_kwh", str(exc)) from None
        if self.beta.shape != (n,) or np.any(self.beta < 0):
            raise ScenarioError("steps.beta", "need one non-negative step per bus")
        want = len(self.evs) if self.key_scope == "ev" else n
        if self.key_scope not in ("bus", "ev"):
            raise ScenarioError("obfuscation.key_scope", "must be 'bus' or 'ev'")
        if self.mu.shape != (want,):
            raise ScenarioError("obfuscation.mu", f"expected {want} key means")
        if np.any(self.mu == 0) or not np.all(np.isfinite(self.mu)):
            raise ScenarioError("obfuscation.mu", "key means must be finite and non-zero")
        if self.key_scope == "ev":
            for b in range(1, n + 1):
                if len(self.evs_at(b)) > 1:
                    raise ScenarioError(
                        "obfuscation.key_scope",
                        f"per-EV keys need single-EV buses; bus {b} has {len(self.evs_at(b))}",
                    )
        if self.sigma_sq < 0:
            raise ScenarioError("obfuscation.sigma_sq", "must be non-negative")
        if int(self.m) != self.m or self.m < 1:
            raise ScenarioError("obfuscation.m", "must be a positive integer")
        if T * self.m > MAX_PAYLOAD:
            raise ScenarioError("obfuscation.m", f"payload T*m = {T * self.m} exceeds {MAX_PAYLOAD}")
        if self.mode not in MODES:
            raise ScenarioError("control.mode", f"must be one of {MODES}")
        if self.epsilon_0 <= 0:
            raise ScenarioError("control.epsilon_0", "must be positive")
        if self.ell_max < 1:
            raise ScenarioError("control.ell_max", "must be >= 1")
        if self.bus_shares is not None and self.bus_shares.shape != (n,):
            raise ScenarioError("baseline.bus_shares", f"expected {n} shares")
        return self

    def with_overrides(self, **kw) -> "Scenario":
        from dataclasses import replace

        return replace(self, **{k: v for k, v in kw.items() if v is not None}).validate()


# --------------------------------------------------------------------------- baseline


def synthetic_baseline(
    T: int,
    delta_t: float,
    peak_kw: float = 1200.0,
    trough_ratio: float = 0.55,
    end_ratio: float = 0.6,
    start_hour: float = 19.0,
    trough_hour: float = 1.0,
    end_hour: float = 7.0,
) -> np.ndarray:
    """Overnight valley: ``peak_kw`` at the start, ``trough_ratio * peak_kw`` at
    ``trough_hour``, then a cosine rise towards ``end_ratio`` of the peak swing
    at ``end_hour``.  Evaluated at slot midpoints.
    """
    h = (np.arange(T) + 0.5) * delta_t
    down = (trough_hour - start_hour) % 24 or 24.0
    up = (end_hour - trough_hour) % 24 or 24.0
    shape = np.where(
        h <= down,
        0.5 * (1 + np.cos(np.pi * np.clip(h / down, 0, 1))),
        end_ratio * 0.5 * (1 - np.cos(np.pi * np.clip((h - down) / up, 0, 1))),
    )
    return peak_kw * (trough_ratio + (1 - trough_ratio) * shape)


def read_baseline_csv(path: Path, T: int) -> np.ndarray:
    """First numeric column named ``kw`` / ``baseline_kw`` (or the last column)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    lowered = [h.strip().lower() for h in header]
    col = next((lowered.index(c) for c in ("baseline_kw", "kw") if c in lowered), len(header) - 1)
    vals = np.array([float(r[col]) for r in body if r])
    if vals.shape != (T,):
        raise ScenarioError("baseline.csv", f"{path} holds {vals.shape[0]} rows, expected {T}")
    return vals


# --------------------------------------------------------------------------- JSON


def _get(doc: dict, path: str, default: Any = ...) -> Any:
    cur: Any = doc
    for part in path.split("."):
        if not isinstance(cur, dict) or part not in cur:
            if default is ...:
                raise ScenarioError(path, "missing required field")
            return default
        cur = cur[part]
    return cur


def _per_bus(value, n: int, path: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(n, float(arr))
    if arr.shape != (n,):
        raise ScenarioError(path, f"expected a scalar or {n} values")
    return arr


def scenario_from_dict(doc: dict, base_dir: Path | None = None) -> Scenario:
    lines_doc = _get(doc, "network.lines")
    n = int(_get(doc, "network.n_buses", len(lines_doc)))
    lines = []
    for k, ln in enumerate(lines_doc):
        try:
            lines.append(LineSegment(int(ln["from"]), int(ln["to"]), float(ln["r"]), float(ln.get("x", 0.0))))
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"network.lines[{k}]", str(exc)) from None
    try:
        net = NetworkModel.from_lines(
            lines,
            n,
            v0=float(_get(doc, "network.v0", 1.0)),
            v_lower=float(_get(doc, "network.v_lower", 0.95)),
            v_upper=float(_get(doc, "network.v_upper", 1.05)),
            s_base=float(_get(doc, "network.s_base_kw", 1000.0)),
        )
    except TopologyError as exc:
        raise ScenarioError("network.lines", str(exc)) from None
    except ValueError as exc:
        raise ScenarioError("network", str(exc)) from None

    T, delta_t = int(_get(doc, "time.T")), float(_get(doc, "time.delta_t_hours"))
    try:
        grid = TimeGrid(T, delta_t)
    except ValueError as exc:
        raise ScenarioError("time", str(exc)) from None
    start = str(_get(doc, "time.start", "19:00"))

    base_doc = _get(doc, "baseline")
    if "kw" in base_doc:
        baseline = np.asarray(base_doc["kw"], dtype=float)
    elif "csv" in base_doc:
        p = Path(base_doc["csv"])
        if not p.is_absolute() and base_dir is not None:
            p = base_dir / p
        baseline = read_baseline_csv(p, grid.T)
    elif "synthetic" in base_doc:
        syn = dict(base_doc["synthetic"])
        baseline = synthetic_baseline(grid.T, grid.delta_t, **syn)
    else:
        raise ScenarioError("baseline", "need one of 'kw', 'csv', 'synthetic'")
    shares = base_doc.get("bus_shares")
    bus_shares = None if shares is None else _per_bus(shares, n, "baseline.bus_shares")

    gamma_default = float(_get(doc, "steps.gamma", 4e-4))
    fleet_doc = _get(doc, "fleet")
    if "evs" in fleet_doc:
        evs = []
        for k, e in enumerate(fleet_doc["evs"]):
            try:
                evs.append(
                    EVSpec(
                        id=int(e.get("id", k)),
                        bus=int(e["bus"]),
                        r_max=float(e["r_max_kw"]),
                        demand=float(e["demand_kwh"]),
                        eta=float(e.get("eta", 0.85)),
                        gamma=float(e.get("gamma", gamma_default)),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ScenarioError(f"fleet.evs[{k}]", str(exc)) from None
    elif "generator" in fleet_doc:
        g = fleet_doc["generator"]
        try:
            evs = generate_fleet(
                n_buses=n,
                evs_per_bus=int(g["evs_per_bus"]),
                demand_range=tuple(g["demand_range_kwh"]),
                r_max=float(g["r_max_kw"]),
                eta=float(g.get("eta", 0.85)),
                seed=int(g.get("seed", 0)),
                grid=grid,
                gamma=gamma_default,
            )
        except (KeyError, ValueError) as exc:
            raise ScenarioError("fleet.generator", str(exc)) from None
    else:
        raise ScenarioError("fleet", "need 'evs' or 'generator'")

    key_scope = str(_get(doc, "obfuscation.key_scope", "bus"))
    mu_raw = _get(doc, "obfuscation.mu", 1.0)
    mu = _per_bus(mu_raw, len(evs) if key_scope == "ev" else n, "obfuscation.mu")

    scen = Scenario(
        net=net,
        grid=grid,
        baseline=baseline,
        evs=tuple(evs),
        beta=_per_bus(_get(doc, "steps.beta", 2e-3), n, "steps.beta"),
        mu=mu,
        sigma_sq=float(_get(doc, "obfuscation.sigma_sq", 0.2)),
        m=int(_get(doc, "obfuscation.m", 40)),
        key_scope=key_scope,
        epsilon_0=float(_get(doc, "control.epsilon_0", 1e-3)),
        ell_max=int(_get(doc, "control.ell_max", 5000)),
        seed=int(_get(doc, "control.seed", 0)),
        mode=str(_get(doc, "control.mode", "private")),
        bus_shares=bus_shares,
        name=str(doc.get("name", "scenario")),
        start=start,
        bus_names=tuple(_get(doc, "network.bus_names", ())),
    )
    return scen.validate()


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"scenario file not found: {path}")
    with open(path) as fh:
        doc = json.load(fh)
    return scenario_from_dict(doc, base_dir=path.parent)


def scenario_to_dict(s: Scenario) -> dict:
    """Inverse of :func:`scenario_from_dict` with the fleet and baseline written out."""
    return {
        "name": s.name,
        "network": {
            "n_buses": s.net.n,
            "bus_names": list(s.bus_names),
            "lines": [
                {"from": ln.from_bus, "to": ln.to_bus, "r": ln.resistance, "x": ln.reactance}
                for ln in s.net.lines
            ],
            "v0": math.sqrt(s.net.v0_sq),
            "v_lower": math.sqrt(s.net.v_lower_sq),
            "v_upper": math.sqrt(s.net.v_upper_sq),
            "s_base_kw": s.net.s_base,
        },
        "time": {"T": s.grid.T, "delta_t_hours": s.grid.delta_t, "start": s.start},
        "baseline": {
            "kw": [float(v) for v in s.baseline],
            **({"bus_shares": [float(v) for v in s.bus_shares]} if s.bus_shares is not None else {}),
        },
        "fleet": {
            "evs": [
                {
                    "id": ev.id,
                    "bus": ev.bus,
                    "r_max_kw": ev.r_max,
                    "demand_kwh": ev.demand,
                    "eta": ev.eta,
                    "gamma": ev.gamma,
                }
                for ev in s.evs
            ]
        },
        "steps": {"beta": [float(b) for b in s.beta]},
        "obfuscation": {
            "mu": [float(v) for v in s.mu],
            "sigma_sq": s.sigma_sq,
            "m": s.m,
            "key_scope": s.key_scope,
        },
        "control": {
            "epsilon_0": s.epsilon_0,
            "ell_max": s.ell_max,
            "seed": s.seed,
            "mode": s.mode,
        },
    }


# --------------------------------------------------------------------------- 13-bus feeder

IEEE13_BUS_NAMES = (
    "650", "632", "633", "634", "645", "646", "671", "680", "684", "611", "652", "692", "675",
)

# (from, to, length_ft, ohm/mile r, ohm/mile x); 633-634 is the in-line transformer and
# 671-692 the closed switch, both given directly in p.u. below.
_IEEE13_LINES = (
    (0, 1, 2000, 0.19, 0.60),
    (1, 2, 500, 0.59, 0.76),
    (1, 4, 500, 1.33, 1.35),
    (4, 5, 300, 1.33, 1.35),
    (1, 6, 2000, 0.19, 0.60),
    (6, 7, 1000, 0.19, 0.60),
    (6, 8, 300, 1.33, 1.35),
    (8, 9, 300, 1.33, 1.35),
    (8, 10, 800, 1.34, 0.51),
    (11, 12, 500, 0.48, 0.26),
)
_KV_BASE = 4.16


def ieee13_lines(s_base_kw: float = 1000.0) -> list[LineSegment]:
    """Single-phase equivalent of the IEEE 13-bus feeder in p.u. on ``s_base_kw``."""
    z_base = _KV_BASE**2 * 1000.0 / s_base_kw
    lines = [
        LineSegment(a, b, ft / 5280 * r / z_base, ft / 5280 * x / z_base)
        for a, b, ft, r, x in _IEEE13_LINES
    ]
    # 500 kVA transformer, 1.1 + j2 % on its own rating
    lines.append(LineSegment(2, 3, 0.011 * s_base_kw / 500, 0.02 * s_base_kw / 500))
    lines.append(LineSegment(6, 11, 0.0, 0.0))
    return lines


def ieee13_desk(
    seed: int = 0,
    peak_kw: float = 1200.0,
    evs_per_bus: int = 7,
    mode: str = "private",
) -> Scenario:
    """The 13-bus desk scenario: 12 buses x 7 EVs, T=48 quarter-hours from 19:00."""
    grid = TimeGrid(48, 0.25)
    n = 12
    s_base = 1000.0
    net = NetworkModel.from_lines(ieee13_lines(s_base), n, v0=1.0, v_lower=0.95, v_upper=1.05, s_base=s_base)
    evs = generate_fleet(n, evs_per_bus, (10.0, 40.0), 6.6, 0.85, seed, grid, gamma=4e-4)
    return Scenario(
        net=net,
        grid=grid,
        baseline=synthetic_baseline(grid.T, grid.delta_t, peak_kw=peak_kw),
        evs=tuple(evs),
        beta=np.full(n, 2e-3),
        mu=np.ones(n),
        sigma_sq=0.2,
        m=40,
        epsilon_0=1e-3,
        ell_max=5000,
        seed=seed,
        mode=mode,
        name="ieee13_desk",
        bus_names=IEEE13_BUS_NAMES,
    ).validate()
