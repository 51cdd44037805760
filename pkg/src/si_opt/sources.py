"""Behavioral source waveforms: PULSE, PWL, PRBS and DC."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

# Fibonacci LFSR taps giving maximal-length sequences, order -> taps.
LFSR_TAPS = {
    3: (3, 2), 4: (4, 3), 5: (5, 3), 6: (6, 5), 7: (7, 6), 8: (8, 6, 5, 4),
    9: (9, 5), 10: (10, 7), 11: (11, 9), 12: (12, 11, 10, 4), 13: (13, 12, 11, 8),
    14: (14, 13, 12, 2), 15: (15, 14), 16: (16, 15, 13, 4), 17: (17, 14),
    18: (18, 11), 19: (19, 18, 17, 14), 20: (20, 17), 21: (21, 19), 22: (22, 21),
    23: (23, 18), 24: (24, 23, 22, 17), 25: (25, 22), 26: (26, 6, 2, 1),
    27: (27, 5, 2, 1), 28: (28, 25), 29: (29, 27), 30: (30, 6, 4, 1), 31: (31, 28),
}


@dataclass(frozen=True)
class Pulse:
    v1: float
    v2: float
    delay: float = 0.0
    rise: float = 1e-15
    fall: float = 1e-15
    width: float = np.inf
    period: float = np.inf

    def __post_init__(self):
        if self.rise <= 0 or self.fall <= 0:
            raise ValueError("PULSE rise/fall must be > 0")


@dataclass(frozen=True)
class Pwl:
    times: tuple
    volts: tuple

    def __post_init__(self):
        if len(self.times) != len(self.volts) or not self.times:
            raise ValueError("PWL needs matching, non-empty time/voltage lists")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("PWL times must be strictly increasing")


@dataclass(frozen=True)
class Prbs:
    order: int
    seed: int
    bit_period: float
    v_low: float
    v_high: float
    rise: float
    fall: float

    def __post_init__(self):
        if self.order not in LFSR_TAPS:
            raise ValueError("PRBS order must be in [3, 31]")
        if self.rise <= 0 or self.fall <= 0:
            raise ValueError("PRBS rise/fall must be > 0")
        if self.rise > self.bit_period or self.fall > self.bit_period:
            raise ValueError("PRBS edges must fit inside one bit")


@dataclass(frozen=True)
class Dc:
    volts: float


SourceKind = Union[Pulse, Pwl, Prbs, Dc]


def prbs_bits(order: int, n_bits: int | None = None, seed: int | None = None) -> np.ndarray:
    """Maximal-length LFSR bit sequence; one full period by default.

    The first ``order`` bits are the seed's bits, LSB first.
    """
    taps = LFSR_TAPS[order]
    period = (1 << order) - 1
    if seed is None:
        seed = period
    seed &= period
    if seed == 0:
        raise ValueError("PRBS seed must be nonzero in its low bits")
    n = period if n_bits is None else int(n_bits)
    total = max(n, order)
    bits = np.zeros(total, dtype=np.uint8)
    for i in range(order):
        bits[i] = (seed >> i) & 1
    for k in range(order, total):
        b = 0
        for t in taps:
            b ^= bits[k - t]
        bits[k] = b
    return bits[:n]


def _pulse(p: Pulse, t):
    t = np.asarray(t, dtype=float)
    out = np.full(t.shape, p.v1, dtype=float)
    active = t >= p.delay
    tt = t - p.delay
    if np.isfinite(p.period) and p.period > 0:
        tt = np.mod(tt, p.period)
    w = p.width
    rising = active & (tt < p.rise)
    high = active & (tt >= p.rise) & (tt < p.rise + w)
    falling = active & (tt >= p.rise + w) & (tt < p.rise + w + p.fall)
    out[rising] = p.v1 + (p.v2 - p.v1) * tt[rising] / p.rise
    out[high] = p.v2
    out[falling] = p.v2 + (p.v1 - p.v2) * (tt[falling] - p.rise - w) / p.fall
    # snap float residue at the corners so "v > 0" style tests are stable
    tol = 1e-9 * abs(p.v2 - p.v1)
    out[np.abs(out - p.v1) <= tol] = p.v1
    out[np.abs(out - p.v2) <= tol] = p.v2
    return out


def _prbs(p: Prbs, t):
    t = np.asarray(t, dtype=float)
    k = np.floor(t / p.bit_period).astype(np.int64)
    period = (1 << p.order) - 1
    needed = min(period, int(k.max(initial=0)) + 1)
    bits = prbs_bits(p.order, n_bits=needed, seed=p.seed).astype(float)
    if needed < period:
        k = np.minimum(k, needed - 1)
    levels = p.v_low + (p.v_high - p.v_low) * bits
    tau = t - k * p.bit_period
    cur = levels[np.mod(k, levels.size)]
    prev = np.where(k > 0, levels[np.mod(k - 1, levels.size)], p.v_low)
    edge = np.where(cur >= prev, p.rise, p.fall)
    ramp = prev + (cur - prev) * np.clip(tau / edge, 0.0, 1.0)
    return np.where(t < 0, p.v_low, ramp)


def eval_source(kind: SourceKind, t):
    """Source voltage at time(s) ``t`` (scalar or array, ``t >= 0``)."""
    if isinstance(kind, Pulse):
        out = _pulse(kind, t)
    elif isinstance(kind, Prbs):
        out = _prbs(kind, t)
    elif isinstance(kind, Pwl):
        out = np.interp(np.asarray(t, dtype=float), kind.times, kind.volts)
    elif isinstance(kind, Dc):
        out = np.full(np.shape(t), float(kind.volts))
    else:
        raise TypeError(f"unknown source kind {kind!r}")
    return float(out) if np.ndim(out) == 0 else out
