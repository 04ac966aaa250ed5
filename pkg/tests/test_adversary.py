import json
from dataclasses import replace

import numpy as np
import pytest

from obfcharge.adversary import (
    EAVESDROPPER,
    HBC_KINDS,
    HONEST_BUT_CURIOUS,
    AccessItem,
    AuditMismatchError,
    GroundTruth,
    audit,
    build_access_set,
    missing_kinds,
    verify_access_set,
    wrong_key_attack,
)
from obfcharge.protocol import run

KEEP = {0, 1, 2, 12}


def bundle(scen, mode, **over):
    scen = scen.with_overrides(mode=mode, ell_max=20, **over)
    res = run(scen, payload_iterations=KEEP)
    return res.transcript, GroundTruth.from_run(scen, res)


@pytest.fixture(scope="module")
def private_run():
    from obfcharge.cli import resolve_scenario

    return bundle(resolve_scenario("tiny_2bus"), "private")


@pytest.fixture(scope="module")
def plain_run():
    from obfcharge.cli import resolve_scenario

    return bundle(resolve_scenario("tiny_2bus"), "plain")


def test_eavesdropper_sees_every_kept_payload(private_run):
    tr, truth = private_run
    acc = build_access_set(tr, EAVESDROPPER)
    assert acc.iterations() == [0, 1, 2, 12, 19]
    assert not missing_kinds(acc)
    assert not verify_access_set(acc, tr, truth)
    assert sum(it.kind == "ev_payload" for it in acc.items) == 2 * 5


def test_honest_but_curious_view(private_run):
    tr, truth = private_run
    acc = build_access_set(tr, HONEST_BUT_CURIOUS, 1, truth)
    assert acc.kinds() == set(HBC_KINDS)
    assert not missing_kinds(acc)
    assert not verify_access_set(acc, tr, truth)
    assert not acc.kinds() & {"baseline", "adjacency"}
    # from zero start the first broadcast is numerically the baseline; it is
    # still only a received subgradient
    first = [it.value for it in acc.items if it.iteration == 0 and it.kind == "received_subgradient"]
    np.testing.assert_array_equal(first[0], truth.baseline)
    with pytest.raises(ValueError):
        build_access_set(tr, HONEST_BUT_CURIOUS)


def test_unknown_role_is_rejected(private_run):
    with pytest.raises(ValueError, match="unknown adversary role"):
        build_access_set(private_run[0], "operator")


def test_foreign_item_kind_fails_audit_check(private_run):
    from obfcharge import adversary

    tr, truth = private_run
    real = adversary.build_access_set

    def leaky(transcript, role, target=None, truth=None):
        acc = real(transcript, role, target, truth)
        if role == HONEST_BUT_CURIOUS:
            acc.items.append(AccessItem(0, "baseline", np.asarray(truth.baseline), "so"))
        return acc

    adversary.build_access_set = leaky
    try:
        check = adversary._check_access_sets(tr, truth)
    finally:
        adversary.build_access_set = real
    assert not check.passed
    assert check.evidence["problems"]["hbc_holds_operator_data"][0] == (0, ["baseline"])


def test_injected_items_are_flagged(private_run):
    tr, truth = private_run
    hbc = build_access_set(tr, HONEST_BUT_CURIOUS, 0, truth)
    hbc.items.append(AccessItem(1, "canary", truth.ev(0)["canary"], "local"))
    hbc.items.append(AccessItem(1, "own_profile", truth.profiles[1][1], "local"))
    assert [it.kind for it in verify_access_set(hbc, tr, truth)] == ["canary", "own_profile"]
    eav = build_access_set(tr, EAVESDROPPER)
    eav.items.append(AccessItem(1, "ev_payload", truth.profiles[1][0], "ev:0"))
    assert len(verify_access_set(eav, tr, truth)) == 1


def test_wrong_key_attack(private_run):
    tr, truth = private_run
    acc = build_access_set(tr, EAVESDROPPER)
    true_mu, m, T = truth.key_mu[0], truth.m, truth.T
    ok = wrong_key_attack(acc, true_mu, m, T, truth)
    assert ok.status == "ok" and ok.relative_error < 0.2
    doubled = wrong_key_attack(acc, 2 * true_mu, m, T)
    for k, e in ok.estimates.items():
        np.testing.assert_allclose(doubled.estimates[k], e / 2, rtol=1e-15)
    assert wrong_key_attack(acc, true_mu, m // 2, T).status == "misaligned"
    assert wrong_key_attack(acc, true_mu, m + 1, T).status == "indivisible"
    with pytest.raises(ValueError):
        wrong_key_attack(build_access_set(tr, HONEST_BUT_CURIOUS, 0, truth), 1.0, m, T)


def test_private_run_passes_audit(private_run):
    report = audit(*private_run)
    assert report.passed, {k: v.evidence for k, v in report.checks.items() if not v.passed}
    assert report.iterations_audited == [0, 1, 2, 12, 19]
    assert report.checks["raw_profile_exposure"].evidence["zero_profiles_skipped"] == 2 * 2  # two payloads, each compared with two zero profiles
    json.dumps(report.to_dict())


def test_zero_variance_fails_spread(tiny):
    report = audit(*bundle(tiny, "private", sigma_sq=0.0))
    assert not report.checks["randomization_spread"].passed
    assert report.checks["transcript_consistency"].passed


def test_plain_run_fails_exposure(plain_run):
    report = audit(*plain_run)
    assert not report.passed
    exp = report.checks["raw_profile_exposure"]
    assert not exp.passed and exp.evidence["exposures"]
    assert report.checks["transcript_consistency"].passed


def test_tampered_payload_fails_consistency(private_run):
    tr, truth = private_run
    msgs = list(tr.messages)
    k = next(i for i, m in enumerate(msgs) if m.iteration == 12 and m.sender == "ev:1")
    w = msgs[k].payload.copy()
    w[3] = np.nextafter(w[3], np.inf)
    msgs[k] = replace(msgs[k], payload=w)
    report = audit(replace(tr, messages=msgs), truth)
    assert not report.checks["transcript_consistency"].passed


def test_forged_but_self_consistent_payload_fails_consistency(private_run):
    from obfcharge.protocol import Message

    tr, truth = private_run
    msgs = list(tr.messages)
    k = next(i for i, m in enumerate(msgs) if m.iteration == 2 and m.sender == "ev:0")
    msgs[k] = Message.make(2, "ev:0", "so", msgs[k].kind, msgs[k].payload * 1.5)
    report = audit(replace(tr, messages=msgs), truth)
    ev = report.checks["transcript_consistency"].evidence
    assert ev["payload_mismatches"] == [(2, "ev:0")] and not ev["digest_mismatches"]


def test_mismatched_bundle_raises(private_run):
    tr, truth = private_run
    with pytest.raises(AuditMismatchError):
        audit(replace(tr, seed=tr.seed + 1), truth)
    with pytest.raises(AuditMismatchError):
        audit(tr, replace(truth, mode="plain"))


def test_scaling_law_holds_for_random_wrong_keys(private_run):
    report = audit(*private_run)
    wk = report.checks["wrong_key_scaling"]
    assert wk.passed and wk.evidence["max_relative_deviation"] <= 1e-12
    assert wk.evidence["half_m_status"] == "misaligned"
    assert wk.evidence["m_plus_one_status"] == "indivisible"


def test_ground_truth_round_trip(tmp_path, private_run):
    truth = private_run[1]
    truth.write(tmp_path / "gt.json")
    back = GroundTruth.read(tmp_path / "gt.json")
    assert back.to_dict() == truth.to_dict()
