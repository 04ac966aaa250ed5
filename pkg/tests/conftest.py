from __future__ import annotations

import numpy as np
import pytest

from obfcharge.cli import resolve_scenario
from obfcharge.fleet import EVSpec, TimeGrid
from obfcharge.network import LineSegment, NetworkModel
from obfcharge.scenario import Scenario, ieee13_desk


def random_tree(rng: np.random.Generator, n: int) -> list[LineSegment]:
    """Random radial feeder on buses 0..n; each bus attaches to an earlier one."""
    lines = []
    for b in range(1, n + 1):
        parent = int(rng.integers(0, b))
        a, c = (parent, b) if rng.random() < 0.5 else (b, parent)  # either orientation
        lines.append(LineSegment(a, c, float(rng.uniform(0, 0.1)), float(rng.uniform(0, 0.1))))
    rng.shuffle(lines)
    return lines


def small_scenario(
    baseline,
    evs: list[tuple[int, float, float]],
    lines: list[LineSegment],
    n: int,
    delta_t: float = 1.0,
    eta: float = 1.0,
    gamma: float = 0.1,
    beta: float = 50.0,
    s_base: float = 10.0,
    **kw,
) -> Scenario:
    """``evs`` holds ``(bus, r_max, demand)`` triples."""
    baseline = np.asarray(baseline, float)
    grid = TimeGrid(baseline.shape[0], delta_t)
    net = NetworkModel.from_lines(lines, n, s_base=s_base)
    specs = tuple(
        EVSpec(id=k, bus=b, r_max=rm, demand=d, eta=eta, gamma=gamma) for k, (b, rm, d) in enumerate(evs)
    )
    opts = dict(sigma_sq=0.2, m=40, epsilon_0=1e-10, ell_max=50_000, seed=3, mode="plain")
    opts.update(kw)
    return Scenario(
        net=net, grid=grid, baseline=baseline, evs=specs,
        beta=np.full(n, beta), mu=np.ones(n), **opts,
    ).validate()


@pytest.fixture
def tiny():
    return resolve_scenario("tiny_2bus")


@pytest.fixture(scope="session")
def desk13():
    return ieee13_desk(seed=0)
