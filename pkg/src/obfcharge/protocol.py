"""Message-passing simulation of the decentralised charging loop.

One iteration (``step``):

1. every EV draws its random sets and sends an obfuscated profile to the
   operator (the raw profile in ``plain`` mode);
2. the operator sums the payloads bus by bus and recovers the nodal loads;
3. the operator broadcasts one primal gradient per bus to that bus's EVs;
4. every EV runs its projected-gradient update;
5. the operator runs the dual update with the recovered loads.

Rounds are synchronous; the run stops once every EV moved by at most
``epsilon_0`` (infinity norm, kW) or after ``ell_max`` iterations.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Container, Iterable, Iterator

import numpy as np

from . import obfuscation as ob
from .fleet import project_batch
from .network import voltage_profile
from .scenario import Scenario
from .solver import (
    DualState,
    SubgradientContext,
    bus_dual_gradients,
    bus_incidence,
    bus_primal_gradients,
    objective,
)

OBFUSCATED = "obfuscated_state"
RAW = "raw_profile"
SUBGRADIENT = "subgradient"


class ProtocolError(RuntimeError):
    pass


def payload_digest(values: np.ndarray) -> str:
    return hashlib.sha256(ob.encode_payload(values)).hexdigest()


@dataclass(frozen=True)
class Message:
    iteration: int
    sender: str  # "ev:<id>" or "so"
    receiver: str  # "so" or "bus:<i>"
    kind: str
    length: int
    digest: str
    payload: np.ndarray | None = field(default=None, compare=False, repr=False)

    @classmethod
    def make(cls, iteration: int, sender: str, receiver: str, kind: str, values) -> "Message":
        values = np.asarray(values, dtype=float)
        return cls(iteration, sender, receiver, kind, values.shape[0], payload_digest(values), values)

    def to_record(self) -> dict:
        return {
            "type": "message",
            "iteration": self.iteration,
            "sender": self.sender,
            "receiver": self.receiver,
            "kind": self.kind,
            "length": self.length,
            "digest": self.digest,
            "values": None if self.payload is None else [float(v) for v in self.payload],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Message":
        vals = rec.get("values")
        return cls(
            int(rec["iteration"]),
            rec["sender"],
            rec["receiver"],
            rec["kind"],
            int(rec["length"]),
            rec["digest"],
            None if vals is None else np.asarray(vals, dtype=float),
        )


def ev_name(ev_id: int) -> str:
    return f"ev:{ev_id}"


def bus_name(bus: int) -> str:
    return f"bus:{bus}"


@dataclass
class Transcript:
    seed: int
    mode: str
    T: int
    m: int
    messages: list[Message] = field(default_factory=list)

    def append(self, msg: Message) -> None:
        self.messages.append(msg)

    def __iter__(self) -> Iterator[Message]:
        return iter(self.messages)

    def __len__(self):
        return len(self.messages)

    def iterations(self) -> list[int]:
        return sorted({m.iteration for m in self.messages})

    def at(self, iteration: int) -> list[Message]:
        return [m for m in self.messages if m.iteration == iteration]

    def _strip(self, iteration: int) -> None:
        # retention policy only: the digest still pins every dropped payload
        for k in range(len(self.messages) - 1, -1, -1):
            msg = self.messages[k]
            if msg.iteration != iteration:
                if msg.iteration < iteration:
                    break
                continue
            if msg.payload is not None:
                self.messages[k] = replace(msg, payload=None)

    def header(self) -> dict:
        return {"type": "header", "seed": self.seed, "mode": self.mode, "T": self.T, "m": self.m}

    def lines(self) -> Iterator[str]:
        yield json.dumps(self.header(), separators=(",", ":"))
        for msg in self.messages:
            yield json.dumps(msg.to_record(), separators=(",", ":"))

    def dumps(self) -> str:
        return "\n".join(self.lines()) + "\n"

    def write(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for line in self.lines():
                fh.write(line + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "Transcript":
        with open(path) as fh:
            return cls.loads(fh.read())

    @classmethod
    def loads(cls, text: str) -> "Transcript":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        head = json.loads(lines[0])
        if head.get("type") != "header":
            raise ValueError("transcript does not start with a header record")
        tr = cls(int(head["seed"]), head["mode"], int(head["T"]), int(head["m"]))
        for ln in lines[1:]:
            tr.append(Message.from_record(json.loads(ln)))
        return tr


@dataclass
class ConvergenceTrace:
    objective: list[float] = field(default_factory=list)
    max_eps: list[float] = field(default_factory=list)
    max_dual_residual: list[float] = field(default_factory=list)
    min_voltage: list[float] = field(default_factory=list)  # p.u. magnitude

    def __len__(self):
        return len(self.objective)

    def rows(self) -> Iterator[tuple[int, float, float, float, float]]:
        for k in range(len(self)):
            yield k, self.objective[k], self.max_eps[k], self.max_dual_residual[k], self.min_voltage[k]


@dataclass
class ProtocolState:
    iteration: int
    profiles: np.ndarray  # n_evs x T
    lam: np.ndarray  # n x T


@dataclass
class RunResult:
    profiles: np.ndarray
    duals: DualState
    transcript: Transcript
    trace: ConvergenceTrace
    converged: bool
    iterations: int
    mode: str
    seed: int
    history: dict[int, np.ndarray] = field(default_factory=dict)  # profiles sent at kept iterations


class _Fleet:
    """Per-EV arrays pulled out of the scenario once."""

    def __init__(self, scen: Scenario):
        evs = scen.evs
        self.rows = np.array([ev.bus - 1 for ev in evs], dtype=int)
        self.gamma = np.array([ev.gamma for ev in evs])
        self.r_max = np.array([ev.r_max for ev in evs])
        self.demand = np.array([ev.demand for ev in evs])
        self.coef = np.array([scen.grid.delta_t * ev.eta for ev in evs])
        self.keys = [scen.key_for(ev) for ev in evs]
        self.members = {b: [ev.id for ev in scen.evs_at(b)] for b in range(1, scen.net.n + 1)}
        self.incidence = bus_incidence(evs, scen.net.n)


def initial_state(scen: Scenario) -> ProtocolState:
    return ProtocolState(0, np.zeros((len(scen.evs), scen.grid.T)), np.zeros((scen.net.n, scen.grid.T)))


def step(
    scen: Scenario,
    state: ProtocolState,
    mode: str | None = None,
    seed: int | None = None,
    transcript: Transcript | None = None,
    _fleet: _Fleet | None = None,
) -> tuple[ProtocolState, np.ndarray]:
    """One synchronous round; returns the new state and each EV's movement."""
    mode = scen.mode if mode is None else mode
    seed = scen.seed if seed is None else seed
    fl = _fleet or _Fleet(scen)
    net, T, m = scen.net, scen.grid.T, scen.m
    ell = state.iteration
    r = state.profiles

    # EVs -> SO
    sent: list[np.ndarray] = []
    for ev in scen.evs:
        if mode == "private":
            sets = ob.draw_random_sets(fl.keys[ev.id], T, ob.ev_stream(seed, ev.id, ell))
            payload = ob.obfuscate(r[ev.id], sets).w
            kind = OBFUSCATED
        else:
            payload = r[ev.id].copy()
            kind = RAW
        sent.append(payload)
        if transcript is not None:
            transcript.append(Message.make(ell, ev_name(ev.id), "so", kind, payload))

    # SO: bus-wise aggregation and recovery
    p_bar = np.zeros((net.n, T))
    for b, ids in fl.members.items():
        if not ids:
            continue
        agg = ob.aggregate([sent[k] for k in ids])
        if mode == "private":
            p_bar[b - 1] = ob.recover(agg, scen.bus_key_mean(b), m).p_bar
        else:
            p_bar[b - 1] = agg.y
    ctx = SubgradientContext.build(net, scen.baseline, p_bar, scen.bus_baseline_matrix())

    G = bus_primal_gradients(ctx, state.lam, net)
    if not np.all(np.isfinite(G)):
        raise ProtocolError(f"non-finite primal gradient at iteration {ell}")
    if transcript is not None:
        for b, ids in fl.members.items():
            if ids:
                transcript.append(Message.make(ell, "so", bus_name(b), SUBGRADIENT, G[b - 1]))

    # EVs: projected gradient step; each row only sees its own bus broadcast
    if len(scen.evs):
        r_new = project_batch(r - fl.gamma[:, None] * G[fl.rows], fl.r_max, fl.demand, fl.coef)
        eps = np.abs(r_new - r).max(axis=1)
    else:
        r_new, eps = r.copy(), np.zeros(0)

    # SO: dual step with the recovered loads
    lam_new = np.maximum(0.0, state.lam + scen.beta[:, None] * bus_dual_gradients(ctx, net))
    if not (np.all(np.isfinite(r_new)) and np.all(np.isfinite(lam_new))):
        raise ProtocolError(f"non-finite iterate at iteration {ell}")
    return ProtocolState(ell + 1, r_new, lam_new), eps


def run(
    scen: Scenario,
    mode: str | None = None,
    seed: int | None = None,
    payload_iterations: Container[int] | None = None,
    record: bool = True,
) -> RunResult:
    """Run the loop from zero profiles and multipliers.

    ``payload_iterations`` selects which iterations keep full payloads in the
    transcript (``None`` keeps all); digests are kept for every message and
    the final iteration is always kept in full.
    """
    mode = scen.mode if mode is None else mode
    seed = scen.seed if seed is None else seed
    if mode not in ("private", "plain"):
        raise ValueError(f"unknown mode {mode!r}")
    fl = _Fleet(scen)
    transcript = Transcript(seed, mode, scen.grid.T, scen.m if mode == "private" else 1)
    trace = ConvergenceTrace()
    state = initial_state(scen)
    history: dict[int, np.ndarray] = {}
    converged = False

    def keep(ell: int) -> bool:
        return payload_iterations is None or ell in payload_iterations

    while state.iteration < scen.ell_max:
        ell = state.iteration
        history[ell] = state.profiles
        state, eps = step(scen, state, mode, seed, transcript if record else None, fl)
        if ell >= 1 and not keep(ell - 1):
            transcript._strip(ell - 1)
            history.pop(ell - 1, None)

        V = voltage_profile(scen.net, fl.incidence @ state.profiles + scen.bus_baseline_matrix())
        trace.objective.append(objective(scen.baseline, state.profiles))
        trace.max_eps.append(float(eps.max()) if eps.size else 0.0)
        trace.max_dual_residual.append(float(max(0.0, (scen.net.v_lower_sq - V).max())))
        trace.min_voltage.append(float(np.sqrt(V.min())))
        if not eps.size or eps.max() <= scen.epsilon_0:
            converged = True
            break

    return RunResult(
        profiles=state.profiles,
        duals=DualState(state.lam, scen.beta.copy()),
        transcript=transcript,
        trace=trace,
        converged=converged,
        iterations=state.iteration,
        mode=mode,
        seed=seed,
        history=history,
    )


def final_voltages(scen: Scenario, profiles: np.ndarray) -> np.ndarray:
    """Squared nodal voltages for the given EV profiles plus any bus baseline."""
    return voltage_profile(scen.net, bus_incidence(scen.evs, scen.net.n) @ profiles + scen.bus_baseline_matrix())


def canary_values(seed: int, n_evs: int) -> np.ndarray:
    """Sentinel values planted in each EV's local state; they are never sent."""
    rng = np.random.default_rng([seed, 0xCA7A])
    return rng.uniform(1000.0, 2000.0, size=n_evs)
