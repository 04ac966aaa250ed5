import json

import numpy as np
import pytest

from obfcharge.cli import (
    AGGREGATE_HEADER,
    PROFILE_HEADER,
    TRACE_HEADER,
    VOLTAGE_HEADER,
    main,
    resolve_scenario,
)
from obfcharge.scenario import load_scenario


def read_csv(path):
    raw = path.read_bytes().decode()
    assert raw.endswith("\r\n")
    lines = raw.split("\r\n")[:-1]
    return lines[0].split(","), [ln.split(",") for ln in lines[1:]]


def test_generate_writes_the_desk_scenario(tmp_path):
    out = tmp_path / "s.json"
    assert main(["generate", "--out", str(out), "--seed", "0"]) == 0
    scen = load_scenario(out)
    assert len(scen.evs) == 84 and scen.net.n == 12
    assert scen.grid.T == 48 and scen.grid.delta_t == 0.25
    k = int(np.argmin(scen.baseline))
    assert 0 < k < scen.grid.T - 1
    assert {ev.bus for ev in scen.evs} == set(range(1, 13))
    assert main(["generate", "--out", str(tmp_path / "t.json"), "--seed", "0"]) == 0
    assert out.read_bytes() == (tmp_path / "t.json").read_bytes()


def test_run_bundled_tiny_writes_a_bundle(tmp_path):
    assert main(["run", "--scenario", "tiny_2bus", "--out", str(tmp_path)]) == 0
    for name in ("profiles.csv", "aggregate.csv", "voltages.csv", "trace.csv", "summary.json",
                 "transcript.jsonl", "ground_truth.json", "audit.json"):
        assert (tmp_path / name).is_file()
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["converged"] and summary["mode"] == "plain"
    assert summary["max_abs_demand_residual_kwh"] <= 1e-6


def test_csv_headers_are_fixed(tmp_path):
    main(["run", "--scenario", "tiny_2bus", "--out", str(tmp_path)])
    for name, header in (("profiles.csv", PROFILE_HEADER), ("aggregate.csv", AGGREGATE_HEADER),
                         ("voltages.csv", VOLTAGE_HEADER), ("trace.csv", TRACE_HEADER)):
        assert tuple(read_csv(tmp_path / name)[0]) == header
    assert PROFILE_HEADER == ("ev", "bus", "t", "kw")
    assert TRACE_HEADER == ("iteration", "objective", "max_eps", "max_dual_residual", "min_voltage_pu")


def test_aggregate_equals_baseline_plus_profiles(tmp_path):
    main(["run", "--scenario", "tiny_2bus", "--out", str(tmp_path)])
    _, prof = read_csv(tmp_path / "profiles.csv")
    _, agg = read_csv(tmp_path / "aggregate.csv")
    total = np.zeros(len(agg))
    for ev, bus, t, kw in prof:
        total[int(t)] += float(kw)
    for t, base, tot in agg:
        assert float(tot) == pytest.approx(float(base) + total[int(t)], abs=1e-9)


def test_zero_variance_private_matches_plain_bytes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--scenario", "tiny_2bus", "--out", str(a), "--mode", "plain"]) == 0
    assert main(["run", "--scenario", "tiny_2bus", "--out", str(b), "--mode", "private", "--sigma-sq", "0"]) == 0
    for name in ("profiles.csv", "aggregate.csv", "voltages.csv", "trace.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_seed_reproduces_bytes(tmp_path):
    args = ["run", "--scenario", "tiny_2bus", "--mode", "private", "--ell-max", "30", "--seed", "5"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 3
    assert main(args + ["--out", str(tmp_path / "b")]) == 3
    for name in ("profiles.csv", "trace.csv", "transcript.jsonl", "ground_truth.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_missing_scenario_is_an_input_error(tmp_path, capsys):
    assert main(["run", "--scenario", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 1
    assert "not found" in capsys.readouterr().err


def test_malformed_scenario_is_an_input_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    doc = json.loads(json.dumps(load_scenario_doc()))
    doc["fleet"]["evs"][0]["demand_kwh"] = 1e6
    bad.write_text(json.dumps(doc))
    assert main(["run", "--scenario", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "error" in capsys.readouterr().err


def load_scenario_doc():
    from importlib import resources

    return json.loads((resources.files("obfcharge") / "data" / "tiny_2bus.json").read_text())


def test_oracle_command(tmp_path):
    assert main(["run", "--scenario", "tiny_2bus", "--out", str(tmp_path / "run")]) == 0
    assert main(["oracle", "--scenario", "tiny_2bus", "--out", str(tmp_path / "o1")]) == 0
    assert main(["oracle", "--scenario", "tiny_2bus", "--out", str(tmp_path / "o2")]) == 0
    j_star = json.loads((tmp_path / "o1" / "oracle_summary.json").read_text())["objective"]
    j_run = json.loads((tmp_path / "run" / "summary.json").read_text())["objective"]
    assert j_star <= j_run + 1e-6
    assert (tmp_path / "o1" / "oracle_profiles.csv").read_bytes() == (tmp_path / "o2" / "oracle_profiles.csv").read_bytes()


def test_oracle_refuses_large_instance(tmp_path, capsys):
    assert main(["oracle", "--scenario", "ieee13_desk", "--out", str(tmp_path)]) == 1
    assert "500" in capsys.readouterr().err


def test_audit_command(tmp_path):
    priv, plain = tmp_path / "priv", tmp_path / "plain"
    main(["run", "--scenario", "tiny_2bus", "--mode", "private", "--ell-max", "20", "--out", str(priv)])
    main(["run", "--scenario", "tiny_2bus", "--mode", "plain", "--ell-max", "20", "--out", str(plain)])
    args = lambda d: ["audit", "--transcript", str(d / "transcript.jsonl"),
                      "--ground-truth", str(d / "ground_truth.json"), "--out", str(d / "re_audit.json")]
    assert main(args(priv)) == 0
    assert json.loads((priv / "re_audit.json").read_text())["passed"]
    assert main(args(plain)) == 4
    # tamper with one kept payload value
    lines = (priv / "transcript.jsonl").read_text().splitlines()
    k = next(i for i, ln in enumerate(lines) if '"values":[' in ln and '"ev:0"' in ln)
    rec = json.loads(lines[k])
    rec["values"][0] += 1.0
    lines[k] = json.dumps(rec)
    (priv / "transcript.jsonl").write_text("\n".join(lines) + "\n")
    assert main(args(priv)) == 4
    report = json.loads((priv / "re_audit.json").read_text())
    assert not report["checks"]["transcript_consistency"]["passed"]


def test_resolve_scenario_accepts_bundled_names():
    assert resolve_scenario("tiny_2bus").name == "tiny_2bus"
    assert len(resolve_scenario("ieee13_desk").evs) == 84
    with pytest.raises(FileNotFoundError):
        resolve_scenario("no_such_scenario")


def test_bundled_desk_plain_converges(tmp_path):
    assert main(["run", "--scenario", "ieee13_desk", "--mode", "plain", "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["converged"] and summary["min_voltage_pu"] >= 0.95 - 1e-3
