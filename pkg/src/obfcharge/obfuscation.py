"""State obfuscation codec.

Each EV multiplies every entry ``r(t)`` of its profile by ``m`` fresh draws
from ``N(mu, sigma^2)`` and sends the resulting length ``T*m`` vector.  The
operator sums the vectors of one bus and divides every block mean by ``mu`` to
estimate the bus load.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class ObfuscationKey:
    mu: float
    sigma_sq: float
    m: int

    def __post_init__(self):
        if self.mu == 0 or not math.isfinite(self.mu):
            raise ValueError("key mean must be finite and non-zero")
        if self.sigma_sq < 0:
            raise ValueError("key variance must be non-negative")
        if int(self.m) != self.m or self.m < 1:
            raise ValueError("set cardinality m must be a positive integer")

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma_sq)


@dataclass(frozen=True)
class ObfuscatedState:
    w: np.ndarray  # length T*m, block t holds r(t) * draws_t

    def __len__(self):
        return self.w.shape[0]


@dataclass(frozen=True)
class BusAggregate:
    y: np.ndarray
    ev_count: int


@dataclass(frozen=True)
class RecoveredLoad:
    p_bar: np.ndarray  # (T,) kW
    block_means: np.ndarray  # (T,) mean of each block before dividing by mu


def ev_stream(seed: int, ev_id: int, iteration: int) -> np.random.Generator:
    """Counter-based stream for one EV and one iteration.

    Philox keyed by ``(seed, ev_id)``; the iteration sits in the third counter
    word, so streams of different iterations never overlap.
    """
    key = np.array([seed % 2**64, ev_id % 2**64], dtype=np.uint64)
    counter = np.array([0, 0, iteration % 2**64, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def draw_random_sets(key: ObfuscationKey, T: int, rng: np.random.Generator) -> np.ndarray:
    """``T`` sets of ``m`` i.i.d. draws from ``N(mu, sigma^2)``, shape (T, m)."""
    if key.sigma_sq == 0:
        return np.full((T, key.m), float(key.mu))
    return rng.normal(key.mu, key.sigma, size=(T, key.m))


def obfuscate(r, sets) -> ObfuscatedState:
    r = np.asarray(r, dtype=float)
    sets = np.asarray(sets, dtype=float)
    if sets.ndim != 2 or sets.shape[0] != r.shape[0]:
        raise ValueError(f"draw sets of shape {sets.shape} do not match profile length {r.shape[0]}")
    return ObfuscatedState((r[:, None] * sets).reshape(-1))


def aggregate(states: Sequence[ObfuscatedState | np.ndarray], length: int | None = None) -> BusAggregate:
    """Elementwise sum in list order.  ``length`` sizes the zero vector for an empty bus."""
    vecs = [s.w if isinstance(s, ObfuscatedState) else np.asarray(s, float) for s in states]
    if not vecs:
        if length is None:
            raise ValueError("length is required to aggregate an empty list")
        return BusAggregate(np.zeros(length), 0)
    n = vecs[0].shape[0]
    y = vecs[0].copy()
    for v in vecs[1:]:
        if v.shape[0] != n:
            raise ValueError(f"payload length mismatch: {v.shape[0]} != {n}")
        y += v
    return BusAggregate(y, len(vecs))


def block_means(y, m: int) -> np.ndarray:
    """Mean of every ``m`` consecutive entries.

    Shifted by each block's first entry so that a block of identical values
    returns that value exactly.
    """
    y = np.asarray(y, dtype=float)
    if m < 1 or y.shape[0] % m:
        raise ValueError(f"payload length {y.shape[0]} is not divisible by m={m}")
    b = y.reshape(-1, m)
    first = b[:, 0]
    return first + (b - first[:, None]).sum(axis=1) / m


def recover(agg: BusAggregate | np.ndarray, mu: float, m: int) -> RecoveredLoad:
    if mu == 0:
        raise ValueError("cannot recover with a zero key mean")
    y = agg.y if isinstance(agg, BusAggregate) else np.asarray(agg, float)
    means = block_means(y, m)
    return RecoveredLoad(means / mu, means)


def sem(sigma: float, m: int) -> float:
    """Standard error of a block mean, ``sigma / sqrt(m)``."""
    if m < 1:
        raise ValueError("m must be >= 1")
    return sigma / math.sqrt(m)


def spread_metric(state: ObfuscatedState | np.ndarray, r) -> float | None:
    """Coefficient of variation of the draws hidden in ``state``.

    Divides every payload entry by its slot's true value, over slots with
    ``r(t) != 0``.  Returns ``None`` when ``r`` has no non-zero entry.
    """
    w = state.w if isinstance(state, ObfuscatedState) else np.asarray(state, float)
    r = np.asarray(r, dtype=float)
    if w.shape[0] % r.shape[0]:
        raise ValueError("payload length is not a multiple of the profile length")
    m = w.shape[0] // r.shape[0]
    nz = r != 0
    if not nz.any():
        return None
    ratios = w.reshape(-1, m)[nz] / r[nz, None]
    mean = ratios.mean()
    return float(ratios.std() / abs(mean))


def encode_payload(w) -> bytes:
    """Wire layout: uint64 little-endian length header, then float64 LE values."""
    w = np.ascontiguousarray(w, dtype="<f8")
    return struct.pack("<Q", w.shape[0]) + w.tobytes()


def decode_payload(buf: bytes) -> np.ndarray:
    (n,) = struct.unpack_from("<Q", buf)
    w = np.frombuffer(buf, dtype="<f8", offset=8)
    if w.shape[0] != n:
        raise ValueError(f"payload header says {n} values, found {w.shape[0]}")
    return w.astype(float)
