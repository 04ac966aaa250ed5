"""Command-line front end.

Subcommands::

    obfcharge generate --out scenario.json [--seed N] [--peak-kw P]
    obfcharge run      --scenario PATH|ieee13_desk --out DIR [--seed N] [--mode private|plain]
                       [--sigma-sq S] [--m M] [--ell-max L] [--keep-payloads 0,1,12]
    obfcharge oracle   --scenario PATH --out DIR
    obfcharge audit    --transcript DIR/transcript.jsonl --ground-truth DIR/ground_truth.json

Scenario JSON::

    {"name": str,
     "network": {"n_buses": n, "lines": [{"from": i, "to": j, "r": pu, "x": pu}, ...],
                 "v0": pu, "v_lower": pu, "v_upper": pu, "s_base_kw": kW, "bus_names": [...]},
     "time": {"T": int, "delta_t_hours": h, "start": "HH:MM"},
     "baseline": {"kw": [...]} | {"csv": path} | {"synthetic": {"peak_kw": ..., ...}},
                 optional "bus_shares": [n fractions of the baseline seen at each bus],
     "fleet": {"evs": [{"bus", "r_max_kw", "demand_kwh", "eta", "gamma"}, ...]}
            | {"generator": {"evs_per_bus", "demand_range_kwh", "r_max_kw", "eta", "seed"}},
     "steps": {"gamma": g, "beta": b | [per bus]},
     "obfuscation": {"mu": u | [per bus], "sigma_sq": s, "m": m, "key_scope": "bus" | "ev"},
     "control": {"epsilon_0": e, "ell_max": L, "seed": N, "mode": "private" | "plain"}}

Run bundle (CSV, RFC 4180, full float precision)::

    profiles.csv   ev,bus,t,kw
    aggregate.csv  t,baseline_kw,total_kw
    voltages.csv   bus,t,v_pu
    trace.csv      iteration,objective,max_eps,max_dual_residual,min_voltage_pu
    summary.json   run metadata and headline numbers
    transcript.jsonl  header line, then one record per message:
                   iteration,sender,receiver,kind,length,digest,values (null if not kept)
    ground_truth.json EV-local state for the audit
    audit.json     privacy audit report

Exit status: 0 success, 1 invalid input, 3 run did not converge, 4 audit failed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import platform
import sys
import tempfile
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .adversary import AuditMismatchError, GroundTruth, audit
from .fleet import demand_residual
from .protocol import RunResult, Transcript, final_voltages, run
from .scenario import Scenario, ScenarioError, ieee13_desk, load_scenario, scenario_to_dict
from .solver import OracleConvergenceError, OracleSizeError, objective, solve_centralized_oracle, valley_flatness

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED, EXIT_AUDIT_FAILED = 0, 1, 3, 4

PROFILE_HEADER = ("ev", "bus", "t", "kw")
AGGREGATE_HEADER = ("t", "baseline_kw", "total_kw")
VOLTAGE_HEADER = ("bus", "t", "v_pu")
TRACE_HEADER = ("iteration", "objective", "max_eps", "max_dual_residual", "min_voltage_pu")

DEFAULT_KEEP = (0, 1, 2, 12)


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def resolve_scenario(name: str) -> Scenario:
    """A path, or the name of a bundled scenario (``ieee13_desk``, ``tiny_2bus``)."""
    p = Path(name)
    if p.exists():
        return load_scenario(p)
    bundled = resources.files("obfcharge") / "data" / f"{name}.json"
    if bundled.is_file():
        with resources.as_file(bundled) as f:
            return load_scenario(f)
    raise FileNotFoundError(f"scenario not found: {name}")


def bundle_tables(scen: Scenario, res: RunResult) -> dict[str, str]:
    T = scen.grid.T
    prof = [(ev.id, ev.bus, t, float(res.profiles[ev.id, t])) for ev in scen.evs for t in range(T)]
    total = scen.baseline + res.profiles.sum(axis=0)
    agg = [(t, float(scen.baseline[t]), float(total[t])) for t in range(T)]
    V = np.sqrt(final_voltages(scen, res.profiles))
    volt = [(b + 1, t, float(V[b, t])) for b in range(scen.net.n) for t in range(T)]
    return {
        "profiles.csv": _csv(PROFILE_HEADER, prof),
        "aggregate.csv": _csv(AGGREGATE_HEADER, agg),
        "voltages.csv": _csv(VOLTAGE_HEADER, volt),
        "trace.csv": _csv(TRACE_HEADER, list(res.trace.rows())),
    }


def run_summary(scen: Scenario, res: RunResult) -> dict:
    V = np.sqrt(final_voltages(scen, res.profiles))
    resid = [demand_residual(res.profiles[ev.id], ev, scen.grid) for ev in scen.evs]
    summary = {
        "scenario": scen.name,
        "seed": res.seed,
        "mode": res.mode,
        "converged": res.converged,
        "iterations": res.iterations,
        "objective": objective(scen.baseline, res.profiles),
        "final_max_eps": res.trace.max_eps[-1] if len(res.trace) else None,
        "min_voltage_pu": float(V.min()),
        "max_abs_demand_residual_kwh": float(np.max(np.abs(resid))) if resid else 0.0,
        "n_evs": len(scen.evs),
        "n_buses": scen.net.n,
        "T": scen.grid.T,
        "sigma_sq": scen.sigma_sq,
        "m": scen.m,
        "epsilon_0": scen.epsilon_0,
        "ell_max": scen.ell_max,
        "versions": {
            "obfcharge": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    if scen.evs:
        cv, mask = valley_flatness(scen.baseline, res.profiles, scen.evs, scen.grid)
        summary["valley_cv"] = cv
        summary["valley_slots"] = int(mask.sum())
    return summary


def write_run_bundle(out: Path, scen: Scenario, res: RunResult) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    for name, text in bundle_tables(scen, res).items():
        atomic_write(out / name, text)
    atomic_write(out / "transcript.jsonl", res.transcript.dumps())
    truth = GroundTruth.from_run(scen, res)
    atomic_write(out / "ground_truth.json", json.dumps(truth.to_dict(), separators=(",", ":")))
    report = audit(res.transcript, truth)
    atomic_write(out / "audit.json", json.dumps(report.to_dict(), indent=2))
    summary = run_summary(scen, res)
    summary["audit_passed"] = report.passed
    atomic_write(out / "summary.json", json.dumps(summary, indent=2))
    return summary


def _parse_keep(text: str | None) -> set[int] | None:
    if text is None:
        return set(DEFAULT_KEEP)
    if text == "all":
        return None
    return {int(x) for x in text.split(",") if x.strip()}


def cmd_run(args) -> int:
    scen = resolve_scenario(args.scenario).with_overrides(
        seed=args.seed, mode=args.mode, sigma_sq=args.sigma_sq, m=args.m, ell_max=args.ell_max
    )
    res = run(scen, payload_iterations=_parse_keep(args.keep_payloads))
    summary = write_run_bundle(Path(args.out), scen, res)
    print(json.dumps({k: summary[k] for k in ("mode", "converged", "iterations", "objective", "min_voltage_pu")}))
    if not res.converged:
        print(f"run did not converge within {scen.ell_max} iterations; partial bundle written", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_oracle(args) -> int:
    scen = resolve_scenario(args.scenario)
    sol = solve_centralized_oracle(scen)
    out = Path(args.out)
    rows = [(ev.id, ev.bus, t, float(sol.profiles[ev.id, t])) for ev in scen.evs for t in range(scen.grid.T)]
    atomic_write(out / "oracle_profiles.csv", _csv(PROFILE_HEADER, rows))
    doc = {"scenario": scen.name, "objective": sol.objective, "iterations": sol.iterations,
           "grid_objective": sol.grid_objective}
    atomic_write(out / "oracle_summary.json", json.dumps(doc, indent=2))
    print(json.dumps(doc))
    return EXIT_OK


def cmd_generate(args) -> int:
    scen = ieee13_desk(seed=args.seed, peak_kw=args.peak_kw, evs_per_bus=args.evs_per_bus, mode=args.mode)
    scen = scen.with_overrides(sigma_sq=args.sigma_sq, m=args.m)
    text = json.dumps(scenario_to_dict(scen), indent=2)
    if args.out == "-":
        sys.stdout.write(text + "\n")
    else:
        atomic_write(Path(args.out), text + "\n")
    return EXIT_OK


def cmd_audit(args) -> int:
    transcript = Transcript.read(args.transcript)
    truth = GroundTruth.read(args.ground_truth)
    report = audit(transcript, truth)
    text = json.dumps(report.to_dict(), indent=2)
    if args.out:
        atomic_write(Path(args.out), text + "\n")
    else:
        print(text)
    for c in report.checks.values():
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}", file=sys.stderr)
    return EXIT_OK if report.passed else EXIT_AUDIT_FAILED


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="obfcharge",
        description="Privacy-preserving decentralised EV valley filling by state obfuscation.",
        epilog=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the decentralised loop and write a result bundle")
    r.add_argument("--scenario", required=True, help="scenario JSON path or bundled name")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--seed", type=int)
    r.add_argument("--mode", choices=("private", "plain"))
    r.add_argument("--sigma-sq", type=float, dest="sigma_sq")
    r.add_argument("--m", type=int)
    r.add_argument("--ell-max", type=int, dest="ell_max")
    r.add_argument("--keep-payloads", dest="keep_payloads",
                   help="comma-separated iterations whose payloads are kept, or 'all' "
                   f"(default {','.join(map(str, DEFAULT_KEEP))}; the last iteration is always kept)")
    r.set_defaults(func=cmd_run)

    o = sub.add_parser("oracle", help="solve a small instance centrally")
    o.add_argument("--scenario", required=True)
    o.add_argument("--out", required=True)
    o.set_defaults(func=cmd_oracle)

    g = sub.add_parser("generate", help="write the 13-bus desk scenario")
    g.add_argument("--out", required=True, help="scenario JSON path, or - for stdout")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--peak-kw", type=float, default=1200.0, dest="peak_kw")
    g.add_argument("--evs-per-bus", type=int, default=7, dest="evs_per_bus")
    g.add_argument("--mode", choices=("private", "plain"), default="private")
    g.add_argument("--sigma-sq", type=float, dest="sigma_sq")
    g.add_argument("--m", type=int)
    g.set_defaults(func=cmd_generate)

    a = sub.add_parser("audit", help="audit a transcript against its run's ground truth")
    a.add_argument("--transcript", required=True)
    a.add_argument("--ground-truth", required=True, dest="ground_truth")
    a.add_argument("--out")
    a.set_defaults(func=cmd_audit)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, FileNotFoundError, OracleSizeError, AuditMismatchError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OracleConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED


if __name__ == "__main__":
    sys.exit(main())
