"""Adversary views of a run and the privacy audit built on them.

Two observers are modelled.  An honest-but-curious EV sees its own local data
and the gradient broadcast to its bus.  An eavesdropper sees every message on
the wire but holds no key and no local state.  The audit turns the privacy
claims into concrete checks over a transcript and the run's ground truth; it
does not compute any information-theoretic bound.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import obfuscation as ob
from .protocol import (
    OBFUSCATED,
    RAW,
    SUBGRADIENT,
    RunResult,
    Transcript,
    bus_name,
    canary_values,
    ev_name,
    payload_digest,
)
from .scenario import Scenario

HONEST_BUT_CURIOUS = "honest_but_curious"
EAVESDROPPER = "eavesdropper"
ROLES = (HONEST_BUT_CURIOUS, EAVESDROPPER)

# items granted to each observer, per iteration
HBC_KINDS = ("own_profile", "r_max", "demand", "feasible_set", "gamma", "received_subgradient")
EAV_KINDS = ("ev_payload", "broadcast")

SPREAD_TOLERANCE = 0.05
SCALING_RTOL = 1e-12


class AuditMismatchError(ValueError):
    """Transcript and ground truth do not come from the same run."""


# --------------------------------------------------------------------------- ground truth


@dataclass
class GroundTruth:
    """EV-local and operator-held state of a run, used only by the auditor."""

    seed: int
    mode: str
    T: int
    m: int
    sigma_sq: float
    key_mu: list[float]  # per EV
    evs: list[dict]  # id, bus, r_max, demand, eta, gamma, canary
    baseline: list[float]
    R: list[list[float]]
    delta_t: float
    profiles: dict[int, np.ndarray]  # iteration -> n_evs x T, profiles sent at that iteration

    @classmethod
    def from_run(cls, scen: Scenario, result: RunResult) -> "GroundTruth":
        canaries = canary_values(result.seed, len(scen.evs))
        return cls(
            seed=result.seed,
            mode=result.mode,
            T=scen.grid.T,
            m=scen.m,
            sigma_sq=scen.sigma_sq,
            key_mu=[scen.key_for(ev).mu for ev in scen.evs],
            evs=[
                {
                    "id": ev.id,
                    "bus": ev.bus,
                    "r_max": ev.r_max,
                    "demand": ev.demand,
                    "eta": ev.eta,
                    "gamma": ev.gamma,
                    "canary": float(canaries[ev.id]),
                }
                for ev in scen.evs
            ],
            baseline=[float(v) for v in scen.baseline],
            R=[[float(v) for v in row] for row in scen.net.R],
            delta_t=scen.grid.delta_t,
            profiles={int(k): np.asarray(v) for k, v in result.history.items()},
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["profiles"] = {str(k): v.tolist() for k, v in sorted(self.profiles.items())}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        d = dict(d)
        d["profiles"] = {int(k): np.asarray(v, dtype=float) for k, v in d["profiles"].items()}
        return cls(**d)

    def write(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, separators=(",", ":"))

    @classmethod
    def read(cls, path: str | Path) -> "GroundTruth":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def ev(self, ev_id: int) -> dict:
        return self.evs[ev_id]


# --------------------------------------------------------------------------- access sets


@dataclass(frozen=True)
class AccessItem:
    iteration: int
    kind: str
    value: Any
    source: str = ""  # sender for wire items, "local" for own state


@dataclass
class AccessSet:
    role: str
    target: int | None
    items: list[AccessItem] = field(default_factory=list)

    def kinds(self, iteration: int | None = None) -> set[str]:
        return {it.kind for it in self.items if iteration is None or it.iteration == iteration}

    def iterations(self) -> list[int]:
        return sorted({it.iteration for it in self.items})


def _payload_iterations(transcript: Transcript) -> list[int]:
    return sorted({m.iteration for m in transcript if m.payload is not None})


def build_access_set(
    transcript: Transcript,
    role: str,
    target: int | None = None,
    truth: GroundTruth | None = None,
) -> AccessSet:
    """Everything ``role`` can hold, per iteration whose payloads were kept."""
    if role not in ROLES:
        raise ValueError(f"unknown adversary role {role!r}; expected one of {ROLES}")
    acc = AccessSet(role, target)
    if role == EAVESDROPPER:
        for msg in transcript:
            if msg.payload is None:
                continue
            kind = "broadcast" if msg.kind == SUBGRADIENT else "ev_payload"
            acc.items.append(AccessItem(msg.iteration, kind, msg.payload, msg.sender))
        return acc

    if target is None or truth is None:
        raise ValueError("an honest-but-curious view needs the target EV and its local state")
    ev = truth.ev(target)
    coef = truth.delta_t * ev["eta"]
    received = {
        m.iteration: m.payload
        for m in transcript
        if m.kind == SUBGRADIENT and m.receiver == bus_name(ev["bus"]) and m.payload is not None
    }
    for ell in sorted(set(truth.profiles) & set(received)):
        acc.items += [
            AccessItem(ell, "own_profile", truth.profiles[ell][target], "local"),
            AccessItem(ell, "r_max", ev["r_max"], "local"),
            AccessItem(ell, "demand", ev["demand"], "local"),
            AccessItem(ell, "feasible_set", (0.0, ev["r_max"], coef, ev["demand"]), "local"),
            AccessItem(ell, "gamma", ev["gamma"], "local"),
            AccessItem(ell, "received_subgradient", received[ell], bus_name(ev["bus"])),
        ]
    return acc


def _same(a, b) -> bool:
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        a, b = np.asarray(a, float), np.asarray(b, float)
        return a.shape == b.shape and bool(np.array_equal(a, b))
    return a == b


def verify_access_set(acc: AccessSet, transcript: Transcript, truth: GroundTruth) -> list[AccessItem]:
    """Items of ``acc`` that are not derivable from what the role is granted."""
    bad = []
    if acc.role == EAVESDROPPER:
        wire = {(m.iteration, m.sender, m.digest) for m in transcript}
        for it in acc.items:
            ok = it.kind in EAV_KINDS and isinstance(it.value, np.ndarray)
            if ok:
                ok = (it.iteration, it.source, payload_digest(it.value)) in wire
            if not ok:
                bad.append(it)
        return bad

    ev = truth.ev(acc.target)
    coef = truth.delta_t * ev["eta"]
    received = {
        (m.iteration, m.digest)
        for m in transcript
        if m.kind == SUBGRADIENT and m.receiver == bus_name(ev["bus"])
    }
    expected = {
        "r_max": ev["r_max"],
        "demand": ev["demand"],
        "gamma": ev["gamma"],
        "feasible_set": (0.0, ev["r_max"], coef, ev["demand"]),
    }
    for it in acc.items:
        if it.kind == "own_profile":
            ok = it.iteration in truth.profiles and _same(it.value, truth.profiles[it.iteration][acc.target])
        elif it.kind == "received_subgradient":
            ok = isinstance(it.value, np.ndarray) and (it.iteration, payload_digest(it.value)) in received
        elif it.kind in expected:
            ok = _same(it.value, expected[it.kind])
        else:
            ok = False
        if not ok:
            bad.append(it)
    return bad


def missing_kinds(acc: AccessSet) -> dict[int, list[str]]:
    """Per iteration, granted kinds that are absent from ``acc``."""
    want = HBC_KINDS if acc.role == HONEST_BUT_CURIOUS else EAV_KINDS
    out = {}
    for ell in acc.iterations():
        have = acc.kinds(ell)
        gap = [k for k in want if k not in have]
        if gap:
            out[ell] = gap
    return out


# --------------------------------------------------------------------------- attacks


@dataclass
class AttackResult:
    mu_guess: float
    m_guess: int
    status: str  # "ok", "indivisible", "misaligned"
    estimates: dict[tuple[int, str], np.ndarray]
    relative_error: float | None = None


def wrong_key_attack(
    acc: AccessSet,
    mu_guess: float,
    m_guess: int,
    T: int,
    truth: GroundTruth | None = None,
) -> AttackResult:
    """Decode every wiretapped EV payload with a guessed key.

    The eavesdropper knows ``T`` from the broadcast length.  A guessed ``m``
    that does not divide the payload, or that yields a profile of the wrong
    length, is reported instead of scored.
    """
    if acc.role != EAVESDROPPER:
        raise ValueError("wrong-key attack runs on an eavesdropper view")
    est: dict[tuple[int, str], np.ndarray] = {}
    status = "ok"
    for it in acc.items:
        if it.kind != "ev_payload":
            continue
        w = it.value
        if m_guess < 1 or w.shape[0] % m_guess:
            return AttackResult(mu_guess, m_guess, "indivisible", {})
        e = ob.recover(w, mu_guess, m_guess).p_bar
        if e.shape[0] != T:
            status = "misaligned"
        est[(it.iteration, it.source)] = e
    if status != "ok" or truth is None:
        return AttackResult(mu_guess, m_guess, status, est)
    num = den = 0.0
    for (ell, sender), e in est.items():
        if ell not in truth.profiles:
            continue
        r = truth.profiles[ell][int(sender.split(":")[1])]
        num += float(np.sum((e - r) ** 2))
        den += float(np.sum(r**2))
    rel = float(np.sqrt(num / den)) if den > 0 else None
    return AttackResult(mu_guess, m_guess, status, est, rel)


# --------------------------------------------------------------------------- audit


@dataclass
class CheckResult:
    name: str
    passed: bool
    checked: str
    evidence: dict = field(default_factory=dict)


@dataclass
class AuditReport:
    seed: int
    mode: str
    iterations_audited: list[int]
    checks: dict[str, CheckResult]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "mode": self.mode,
            "iterations_audited": self.iterations_audited,
            "passed": self.passed,
            "checks": {k: asdict(v) for k, v in self.checks.items()},
        }

    def write(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def _check_consistency(transcript: Transcript, truth: GroundTruth) -> CheckResult:
    bad_digest, bad_payload, checked = [], [], 0
    for msg in transcript:
        if msg.payload is None:
            continue
        if payload_digest(msg.payload) != msg.digest or msg.payload.shape[0] != msg.length:
            bad_digest.append((msg.iteration, msg.sender, msg.receiver))
        if msg.kind in (OBFUSCATED, RAW) and msg.iteration in truth.profiles:
            k = int(msg.sender.split(":")[1])
            r = truth.profiles[msg.iteration][k]
            if msg.kind == OBFUSCATED:
                key = ob.ObfuscationKey(truth.key_mu[k], truth.sigma_sq, truth.m)
                sets = ob.draw_random_sets(key, truth.T, ob.ev_stream(truth.seed, k, msg.iteration))
                expect = ob.obfuscate(r, sets).w
            else:
                expect = r
            checked += 1
            if not _same(expect, msg.payload):
                bad_payload.append((msg.iteration, msg.sender))
    return CheckResult(
        "transcript_consistency",
        not bad_digest and not bad_payload,
        "payload digests match their values; EV payloads re-derived from the seed and "
        "ground-truth profiles match the transcript bit for bit",
        {"payloads_rederived": checked, "digest_mismatches": bad_digest[:20],
         "payload_mismatches": bad_payload[:20]},
    )


def _check_exposure(transcript: Transcript, truth: GroundTruth) -> CheckResult:
    exposed, wrong_length, zero_skipped, checked = [], [], 0, 0
    want_len = truth.T * (truth.m if truth.mode == "private" else 1)
    for msg in transcript:
        if msg.payload is None or msg.kind == SUBGRADIENT:
            continue
        checked += 1
        if msg.kind == RAW:
            exposed.append((msg.iteration, msg.sender, "raw profile sent"))
        if msg.payload.shape[0] != truth.T * truth.m:
            wrong_length.append((msg.iteration, msg.sender, int(msg.payload.shape[0])))
        profiles = truth.profiles.get(msg.iteration)
        if profiles is None:
            continue
        for k, r in enumerate(profiles):
            if not np.any(r):
                # the all-zero start is public; equality with it reveals nothing
                zero_skipped += 1
                continue
            if _same(msg.payload, r) or _same(msg.payload, np.repeat(r, truth.m)):
                exposed.append((msg.iteration, msg.sender, f"equals profile of ev:{k}"))
    return CheckResult(
        "raw_profile_exposure",
        not exposed and not wrong_length,
        "no EV payload equals any true non-zero profile (or its m-fold repetition) "
        f"at the same iteration, and every EV payload has length T*m = {truth.T * truth.m}",
        {"payloads_checked": checked, "exposures": exposed[:20], "length_violations": wrong_length[:20],
         "zero_profiles_skipped": zero_skipped, "observed_length": want_len},
    )


def _check_spread(transcript: Transcript, truth: GroundTruth) -> CheckResult:
    samples = []
    for msg in transcript:
        if msg.payload is None or msg.kind == SUBGRADIENT or msg.iteration not in truth.profiles:
            continue
        k = int(msg.sender.split(":")[1])
        r = truth.profiles[msg.iteration][k]
        if msg.payload.shape[0] % r.shape[0]:
            continue
        cv = ob.spread_metric(msg.payload, r)
        if cv is not None:
            target = float(np.sqrt(truth.sigma_sq) / abs(truth.key_mu[k]))
            samples.append((msg.iteration, k, cv, target))
    if samples:
        dev = max(abs(cv - tg) for _, _, cv, tg in samples)
        degenerate = any(cv == 0 or tg == 0 for _, _, cv, tg in samples)
        passed = dev <= SPREAD_TOLERANCE and not degenerate
        cvs = np.array([s[2] for s in samples])
        ev = {"samples": len(samples), "min": float(cvs.min()), "max": float(cvs.max()),
              "mean": float(cvs.mean()), "target": samples[0][3], "max_deviation": dev,
              "degenerate": degenerate}
    else:
        passed, ev = False, {"samples": 0}
    return CheckResult(
        "randomization_spread",
        passed,
        f"coefficient of variation of the hidden draws, per EV and audited iteration, lies "
        f"within {SPREAD_TOLERANCE} of sigma/mu and is non-zero",
        ev,
    )


def _check_wrong_key(transcript: Transcript, truth: GroundTruth, trials: int = 100) -> CheckResult:
    acc = build_access_set(transcript, EAVESDROPPER)
    mu = truth.key_mu[0] if truth.key_mu else 1.0
    m = truth.m if truth.mode == "private" else 1
    insider = wrong_key_attack(acc, mu, m, truth.T, truth)
    rng = np.random.default_rng([truth.seed, 0x5CA1E])
    worst = 0.0
    for c in rng.uniform(0.1, 10.0, size=trials):
        guess = wrong_key_attack(acc, c * mu, m, truth.T)
        for key, e in insider.estimates.items():
            ref = e / c
            scale = np.maximum(np.abs(ref), np.finfo(float).tiny)
            worst = max(worst, float((np.abs(guess.estimates[key] - ref) / scale).max(initial=0.0)))
    half = wrong_key_attack(acc, mu, max(1, m // 2), truth.T)
    odd = wrong_key_attack(acc, mu, m + 1, truth.T) if m > 1 else None
    return CheckResult(
        "wrong_key_scaling",
        worst <= SCALING_RTOL,
        f"decoding with mu' = c*mu scales every estimate by exactly 1/c ({trials} random c, "
        f"rtol {SCALING_RTOL}); wrong m' misaligns or fails",
        {"max_relative_deviation": worst, "insider_relative_error": insider.relative_error,
         "half_m_status": half.status, "m_plus_one_status": None if odd is None else odd.status},
    )


def _check_access_sets(transcript: Transcript, truth: GroundTruth) -> CheckResult:
    problems: dict[str, Any] = {}
    eav = build_access_set(transcript, EAVESDROPPER)
    if verify_access_set(eav, transcript, truth):
        problems["eavesdropper_unsound"] = True
    if missing_kinds(eav):
        problems["eavesdropper_missing"] = missing_kinds(eav)
    for ev in truth.evs:
        hbc = build_access_set(transcript, HONEST_BUT_CURIOUS, ev["id"], truth)
        if not hbc.items:
            continue
        if verify_access_set(hbc, transcript, truth):
            problems.setdefault("hbc_unsound", []).append(ev["id"])
        if missing_kinds(hbc):
            problems.setdefault("hbc_missing", []).append(ev["id"])
        # set membership, not value equality: from zero start the first broadcast
        # numerically equals the baseline, yet it is still just a received subgradient
        foreign = sorted(hbc.kinds() - set(HBC_KINDS))
        if foreign:
            problems.setdefault("hbc_holds_operator_data", []).append((ev["id"], foreign))
    return CheckResult(
        "access_set_completeness",
        not problems,
        "each observer holds exactly its granted item kinds per iteration, every item is "
        "derivable from the transcript or its own state, and no EV view holds an "
        "operator item such as the baseline load or the adjacency matrix",
        {"problems": problems, "eavesdropper_items": len(eav.items)},
    )


def _check_canaries(transcript: Transcript, truth: GroundTruth) -> CheckResult:
    local = {}
    for ev in truth.evs:
        for name in ("canary", "demand", "r_max", "gamma"):
            local.setdefault(float(ev[name]), []).append(f"ev:{ev['id']}.{name}")
    sentinels = np.array(sorted(local))
    leaks = []
    for msg in transcript:
        if msg.payload is None or not sentinels.size:
            continue
        idx = np.searchsorted(sentinels, msg.payload)
        idx = np.clip(idx, 0, sentinels.size - 1)
        hit = sentinels[idx] == msg.payload
        for v in np.unique(msg.payload[hit]):
            leaks.append((msg.iteration, msg.sender, local[float(v)][0]))
    return CheckResult(
        "canary_leak",
        not leaks,
        "no transmitted value equals a planted sentinel or any EV-local scalar "
        "(demand, r_max, gamma)",
        {"sentinels": int(sentinels.size), "leaks": leaks[:20], "leak_count": len(leaks)},
    )


def audit(transcript: Transcript, truth: GroundTruth) -> AuditReport:
    if transcript.seed != truth.seed:
        raise AuditMismatchError(f"transcript seed {transcript.seed} != ground-truth seed {truth.seed}")
    if transcript.mode != truth.mode or transcript.T != truth.T:
        raise AuditMismatchError("transcript and ground truth disagree on mode or horizon")
    # digest-only messages carry nothing an observer could read
    kept = Transcript(transcript.seed, transcript.mode, transcript.T, transcript.m,
                      [m for m in transcript if m.payload is not None])
    checks = [
        _check_consistency(transcript, truth),
        _check_exposure(kept, truth),
        _check_spread(kept, truth),
        _check_wrong_key(kept, truth),
        _check_access_sets(kept, truth),
        _check_canaries(kept, truth),
    ]
    return AuditReport(
        seed=truth.seed,
        mode=truth.mode,
        iterations_audited=sorted(set(_payload_iterations(transcript)) & set(truth.profiles)),
        checks={c.name: c for c in checks},
    )
