"""Uniformly sampled voltage waveforms and their CSV form."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np


@dataclass(frozen=True, eq=False)
class Waveform:
    t0: float
    dt: float
    samples: np.ndarray

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        object.__setattr__(self, "samples", samples)
        if not self.dt > 0:
            raise ValueError("waveform dt must be > 0")
        if samples.ndim != 1 or samples.size < 2:
            raise ValueError("waveform needs at least two samples")

    def __len__(self):
        return self.samples.size

    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.samples.size)

    @property
    def duration(self) -> float:
        return self.dt * self.samples.size

    def __eq__(self, other):
        if not isinstance(other, Waveform):
            return NotImplemented
        return (self.t0 == other.t0 and self.dt == other.dt
                and np.array_equal(self.samples, other.samples))

    def __sub__(self, other: "Waveform") -> "Waveform":
        return Waveform(self.t0, self.dt, self.samples - other.samples)

    def shifted(self, delay: float) -> "Waveform":
        return Waveform(self.t0 + delay, self.dt, self.samples)

    def window(self, t_from: float) -> "Waveform":
        """Samples at ``t >= t_from`` (no interpolation)."""
        k = max(0, int(np.ceil((t_from - self.t0) / self.dt - 1e-9)))
        return Waveform(self.t0 + k * self.dt, self.dt, self.samples[k:])


def write_csv(path, waveforms: Mapping[str, Waveform]) -> Path:
    """Write ``time_s,<node>...`` with full-precision values."""
    path = Path(path)
    names = list(waveforms)
    if not names:
        raise ValueError("nothing to write")
    ref = waveforms[names[0]]
    t = ref.times()
    for name in names[1:]:
        if len(waveforms[name]) != len(ref):
            raise ValueError(f"waveform {name!r} is on a different grid")
    cols = [waveforms[n].samples for n in names]
    with path.open("w", newline="\n") as fh:
        fh.write(",".join(["time_s", *names]) + "\n")
        for i in range(len(t)):
            fh.write(",".join(repr(float(x)) for x in (t[i], *(c[i] for c in cols))) + "\n")
    return path


def read_csv(path) -> dict[str, Waveform]:
    data = np.genfromtxt(path, delimiter=",", names=True)
    names = data.dtype.names
    t = data[names[0]]
    dt = float(t[1] - t[0])
    return {n: Waveform(float(t[0]), dt, np.asarray(data[n])) for n in names[1:]}
