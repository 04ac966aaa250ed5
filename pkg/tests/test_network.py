import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from obfcharge.network import (
    LineSegment,
    NetworkModel,
    TopologyError,
    build_adjacency,
    check_upper_bounds,
    check_voltage_bounds,
    parent_map,
    root_path,
    voltage_profile,
)

from conftest import random_tree


def test_chain_adjacency():
    R, X = build_adjacency([LineSegment(0, 1, 0.1, 0.0), LineSegment(1, 2, 0.05, 0.0)], 2)
    np.testing.assert_allclose(R, [[0.10, 0.10], [0.10, 0.15]])
    np.testing.assert_array_equal(X, 0)


def test_single_line():
    R, _ = build_adjacency([LineSegment(0, 1, 0.2, 0.1)], 1)
    assert R.tolist() == [[0.2]]


def test_star_has_zero_off_diagonal():
    R, _ = build_adjacency([LineSegment(0, 1, 0.1, 0), LineSegment(0, 2, 0.3, 0)], 2)
    np.testing.assert_allclose(R, [[0.1, 0.0], [0.0, 0.3]])


def test_reversed_line_orientation_is_accepted():
    R, _ = build_adjacency([LineSegment(1, 0, 0.1, 0.0), LineSegment(2, 1, 0.05, 0.0)], 2)
    np.testing.assert_allclose(R, [[0.10, 0.10], [0.10, 0.15]])


@pytest.mark.parametrize(
    "lines, n, bus",
    [
        ([LineSegment(0, 1, 0.1, 0), LineSegment(1, 2, 0.1, 0), LineSegment(2, 1, 0.1, 0)], 2, None),
        ([LineSegment(0, 1, 0.1, 0), LineSegment(0, 2, 0.1, 0), LineSegment(1, 2, 0.1, 0)], 2, 2),
        ([LineSegment(0, 1, 0.1, 0), LineSegment(2, 3, 0.1, 0)], 3, 2),
        ([LineSegment(0, 1, 0.1, 0), LineSegment(1, 5, 0.1, 0)], 2, 5),
    ],
)
def test_topology_errors(lines, n, bus):
    with pytest.raises(TopologyError) as err:
        build_adjacency(lines, n)
    if bus is not None:
        assert err.value.bus is not None


def test_disconnected_bus_is_named():
    with pytest.raises(TopologyError, match="bus 3"):
        build_adjacency([LineSegment(0, 1, 0.1, 0), LineSegment(1, 2, 0.1, 0), LineSegment(3, 3, 0.1, 0)], 3)


def test_negative_impedance_rejected():
    with pytest.raises(ValueError):
        LineSegment(0, 1, -0.1, 0.0)


def _enumerated_R(lines, n):
    parents = parent_map(lines, n)
    R = np.zeros((n, n))
    for i, j in itertools.product(range(1, n + 1), repeat=2):
        pi = {id(ln): ln for ln in root_path(i, parents)}
        pj = {id(ln) for ln in root_path(j, parents)}
        R[i - 1, j - 1] = sum(ln.resistance for k, ln in pi.items() if k in pj)
    return R


def test_random_trees_symmetric_nested_and_match_enumeration():
    rng = np.random.default_rng(11)
    for trial in range(120):
        n = int(rng.integers(1, 7))
        lines = random_tree(rng, n)
        R, X = build_adjacency(lines, n)
        np.testing.assert_array_equal(R, R.T)
        np.testing.assert_array_equal(X, X.T)
        np.testing.assert_allclose(R, _enumerated_R(lines, n), atol=1e-15)
        parents = parent_map(lines, n)
        for i in range(1, n + 1):
            b = i
            while b != 0:  # every ancestor j of i: R_ij == R_jj
                np.testing.assert_allclose(R[i - 1, b - 1], R[b - 1, b - 1])
                b = parents[b][0]
        assert np.all(R <= np.minimum.outer(np.diag(R), np.diag(R)) + 1e-15)


def _net(R=0.1, s_base=1.0):
    return NetworkModel.from_lines([LineSegment(0, 1, R, 0.0)], 1, v0=1.0, v_lower=0.95, s_base=s_base)


def test_zero_load_gives_slack_voltage():
    rng = np.random.default_rng(1)
    lines = random_tree(rng, 5)
    net = NetworkModel.from_lines(lines, 5, v0=1.02)
    V = voltage_profile(net, np.zeros((5, 7)))
    np.testing.assert_allclose(V, 1.02**2)


def test_single_bus_substitution():
    V = voltage_profile(_net(), [[0.05]])
    np.testing.assert_allclose(V, [[0.99]])


def test_doubling_load_doubles_drop():
    rng = np.random.default_rng(2)
    net = NetworkModel.from_lines(random_tree(rng, 4), 4)
    p, q = rng.uniform(0, 50, (4, 6)), rng.uniform(0, 20, (4, 6))
    d1 = net.v0_sq - voltage_profile(net, p, q)
    d2 = net.v0_sq - voltage_profile(net, 2 * p, 2 * q)
    np.testing.assert_allclose(d2, 2 * d1, rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_superposition(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 8))
    net = NetworkModel.from_lines(random_tree(rng, n), n)
    p1, p2 = rng.uniform(-100, 100, (2, n, 5))
    q1, q2 = rng.uniform(-100, 100, (2, n, 5))
    lhs = voltage_profile(net, p1 + p2, q1 + q2) - net.v0_sq
    rhs = (voltage_profile(net, p1, q1) - net.v0_sq) + (voltage_profile(net, p2, q2) - net.v0_sq)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_voltage_dimension_mismatch():
    net = _net()
    with pytest.raises(ValueError):
        voltage_profile(net, np.zeros((2, 3)))
    with pytest.raises(ValueError):
        voltage_profile(net, np.zeros((1, 3)), np.zeros((1, 4)))


def test_bounds_are_squared():
    net = _net()
    assert net.v_lower_sq == pytest.approx(0.9025)


def test_violation_examples():
    net = _net()
    assert check_voltage_bounds(np.ones((1, 4)), net).tolist() == [0.0]
    V = np.array([[1.0, 0.90, 1.0]])
    np.testing.assert_allclose(check_voltage_bounds(V, net), [0.0025])
    np.testing.assert_allclose(check_voltage_bounds(V[:, ::-1], net), [0.0025])
    assert check_upper_bounds(np.array([[1.2]]), net)[0] == pytest.approx(1.2 - 1.05**2)


def test_bad_bounds_rejected():
    with pytest.raises(ValueError):
        NetworkModel.from_lines([LineSegment(0, 1, 0.1, 0)], 1, v0=1.0, v_lower=1.01)
