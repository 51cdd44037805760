"""Eye diagrams, eye masks and eye-opening measurements.

Two measurement schemes are provided.  The additive windowing scheme adds a
large pulse to ``|v - vref|`` everywhere outside the eye window so a MIN
reducer only sees samples inside it.  The conditional scheme replaces
out-of-mask samples with a fixed out-of-bounds value and subtracts the mask
from ``|v|`` inside it, so a negative MIN means a mask violation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .sources import Pulse, eval_source
from .waveform import Waveform

REDUCERS = ("MIN", "MAX", "AVG", "INTEG")


class MeasureError(ValueError):
    pass


class EdgeFidelityWarning(UserWarning):
    pass


@dataclass(frozen=True)
class MeasureResult:
    name: str
    value: float
    reducer: str
    samples_considered: int

    def __post_init__(self):
        if self.samples_considered < 1:
            raise MeasureError("a measure needs at least one sample")


def reduce(t, values, reducer: str) -> float:
    """MIN, MAX, AVG (sample mean) or INTEG (trapezoid over ``t``)."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise MeasureError("cannot reduce an empty series")
    r = reducer.upper()
    if r == "MIN":
        return float(values.min())
    if r == "MAX":
        return float(values.max())
    if r == "AVG":
        return float(values.mean())
    if r == "INTEG":
        t = np.asarray(t, dtype=float)
        if values.size == 1:
            return 0.0
        return float(np.sum(0.5 * (values[1:] + values[:-1]) * np.diff(t)))
    raise MeasureError(f"unknown reducer {reducer!r}; expected one of {REDUCERS}")


def check_edge_fidelity(dt: float, rise: float) -> bool:
    """Warn when the time step is too coarse to resolve an edge (dt > rise/4)."""
    if dt > rise / 4 * (1 + 1e-9):
        warnings.warn(f"tstep {dt:.3g}s exceeds rise/4 = {rise / 4:.3g}s; edges will be "
                      "poorly resolved", EdgeFidelityWarning, stacklevel=2)
        return False
    return True


@dataclass(frozen=True)
class EyeMask:
    """A periodic PULSE used as an eye mask.

    ``window-pulse`` is the multi-drop window: ``v_amplitude`` outside the
    eye, 0 V for ``high_time`` inside it.  ``hexagon-half`` rises from 0 to
    ``v_amplitude`` and back, tracing the top half of a hexagonal mask.
    """

    kind: str
    v_amplitude: float
    delay: float
    rise: float
    fall: float
    high_time: float
    period: float

    def __post_init__(self):
        if self.kind not in ("window-pulse", "hexagon-half"):
            raise ValueError(f"unknown mask kind {self.kind!r}")
        if not (self.rise > 0 and self.fall > 0):
            raise ValueError("mask rise/fall must be > 0")
        if self.high_time + self.rise + self.fall > self.period * (1 + 1e-12):
            raise ValueError("mask high_time + rise + fall exceeds the period")

    @classmethod
    def window(cls, eye_window=840e-12, period=1.2e-9, delay=0.0, amplitude=2.0):
        return cls("window-pulse", amplitude, delay, 1e-15, 1e-15, eye_window, period)

    @classmethod
    def hexagon(cls, bit_period=160e-12, delay=0.0, amplitude=0.165,
                high_ui=0.5, edge_ui=0.05):
        return cls("hexagon-half", amplitude, delay, edge_ui * bit_period,
                   edge_ui * bit_period, high_ui * bit_period, bit_period)

    def with_delay(self, delay: float) -> "EyeMask":
        return EyeMask(self.kind, self.v_amplitude, delay, self.rise, self.fall,
                       self.high_time, self.period)

    def source(self) -> Pulse:
        if self.kind == "window-pulse":
            return Pulse(self.v_amplitude, 0.0, self.delay, self.rise, self.fall,
                         self.high_time, self.period)
        return Pulse(0.0, self.v_amplitude, self.delay, self.rise, self.fall,
                     self.high_time, self.period)

    def values(self, t) -> np.ndarray:
        return eval_source(self.source(), np.asarray(t, dtype=float))

    def is_open(self, t) -> np.ndarray:
        """Where the window lets the signal through (window-pulse masks)."""
        return self.values(t) < self.v_amplitude / 2


@dataclass(frozen=True, eq=False)
class EyeDiagram:
    period: float
    phases: np.ndarray
    volts: np.ndarray
    trace_index: np.ndarray
    offset: float = 0.0

    @property
    def n_traces(self) -> int:
        return int(self.trace_index.max()) + 1 if self.trace_index.size else 0

    def traces(self):
        for k in range(self.n_traces):
            sel = self.trace_index == k
            yield self.phases[sel], self.volts[sel]


def fold_eye(w: Waveform, period: float, offset: float = 0.0) -> EyeDiagram:
    """Overlay ``w`` onto a ``period`` time base; phase = (t - offset) mod period."""
    if not period > w.dt:
        raise MeasureError("eye period must exceed the sample spacing")
    if w.duration < 2 * period * (1 - 1e-12):
        raise MeasureError("waveform must span at least two eye periods")
    t = w.times()
    rel = t - offset
    k = np.floor(rel / period)
    phases = rel - k * period
    # floating-point wrap guard
    wrap = phases >= period
    phases[wrap] -= period
    k[wrap] += 1
    trace = (k - k.min()).astype(int)
    n_full = int(np.floor(w.duration / period + 1e-9))
    keep = trace < n_full
    return EyeDiagram(period, phases[keep], w.samples[keep].copy(), trace[keep], offset)


def _coverage(w: Waveform, period: float, t_from):
    if t_from is not None:
        w = w.window(t_from)
    if w.duration < 2 * period * (1 - 1e-9):
        raise MeasureError("signal must cover at least two mask periods")
    return w


def windowed_opening(sig: Waveform, vref: float, win: EyeMask, t_from=None,
                     name: str = "eye_open") -> MeasureResult:
    """MIN over samples of |sig - vref| + win(t)."""
    if win.kind != "window-pulse":
        raise MeasureError("windowed_opening needs a window-pulse mask")
    w = _coverage(sig, win.period, t_from)
    vals = np.abs(w.samples - vref) + win.values(w.times())
    return MeasureResult(name, float(vals.min()), "MIN", vals.size)


def masked_values(sig_diff: Waveform, mask: EyeMask, oob: float) -> np.ndarray:
    m = mask.values(sig_diff.times())
    return np.where(m > 0, np.abs(sig_diff.samples) - m, oob)


def default_oob(reducer: str) -> float:
    return 10.0 if reducer.upper() == "MIN" else 0.0


def masked_opening(sig_diff: Waveform, mask: EyeMask, reducer: str = "MIN",
                   oob: float | None = None, t_from=None,
                   name: str = "eye_opening") -> MeasureResult:
    """Reduce (mask > 0) ? |v| - mask : oob over the signal."""
    if mask.kind != "hexagon-half":
        raise MeasureError("masked_opening needs a hexagon-half mask")
    reducer = reducer.upper()
    if reducer not in ("MIN", "AVG", "INTEG"):
        raise MeasureError(f"masked_opening supports MIN, AVG and INTEG, not {reducer}")
    if oob is None:
        oob = default_oob(reducer)
    w = _coverage(sig_diff, mask.period, t_from)
    vals = masked_values(w, mask, oob)
    return MeasureResult(name, reduce(w.times(), vals, reducer), reducer, vals.size)


def auto_center_window(sig: Waveform, vref: float, eye_window: float, period: float,
                       t_from=None):
    """Best window placement for the additive windowing measure.

    Folds |v - vref| at ``period``, takes the per-phase minimum and slides a
    window of ``eye_window`` over it (circularly).  Returns ``(opening,
    delay)`` where ``delay`` is the PULSE delay that reproduces the opening
    through :func:`windowed_opening`.
    """
    w = _coverage(sig, period, t_from)
    n_per = period / w.dt
    if abs(n_per - round(n_per)) > 1e-6:
        raise MeasureError("period must be a whole number of samples")
    n_per = int(round(n_per))
    m = int(round(eye_window / w.dt))
    if not 1 <= m <= n_per:
        raise MeasureError("eye window must cover 1..period samples")
    k0 = int(round(w.t0 / w.dt))
    d = np.abs(w.samples - vref)
    n_full = d.size // n_per
    phase = (k0 + np.arange(n_full * n_per)) % n_per
    per_phase = np.full(n_per, np.inf)
    np.minimum.at(per_phase, phase, d[: n_full * n_per])
    # tail samples beyond the last full period also count
    tail_phase = (k0 + np.arange(n_full * n_per, d.size)) % n_per
    np.minimum.at(per_phase, tail_phase, d[n_full * n_per:])
    ext = np.concatenate([per_phase, per_phase[: m - 1]])
    windows = np.lib.stride_tricks.sliding_window_view(ext, m).min(axis=1)
    start = int(np.argmax(windows))
    delay = (start - 0.5) * w.dt
    if delay < 0:
        delay += period
    return float(windows[start]), delay


def write_eye_csv(path, eye: EyeDiagram) -> Path:
    path = Path(path)
    order = np.lexsort((eye.phases, eye.trace_index))
    with path.open("w", newline="\n") as fh:
        fh.write("phase_s,volts\n")
        for p, v in zip(eye.phases[order], eye.volts[order]):
            fh.write(f"{float(p)!r},{float(v)!r}\n")
    return path


def eye_svg(eye: EyeDiagram, mask: EyeMask | None = None, vref: float = 0.0,
            title: str = "", width: int = 640, height: int = 400) -> str:
    """Deterministic SVG of the folded eye, with an optional mask overlay.

    For a hexagon-half mask the mirrored lower half is drawn too, for
    display only.
    """
    pad = 40
    vmin, vmax = float(eye.volts.min()), float(eye.volts.max())
    if mask is not None and mask.kind == "hexagon-half":
        vmin, vmax = min(vmin, vref - mask.v_amplitude), max(vmax, vref + mask.v_amplitude)
    span = (vmax - vmin) or 1.0
    vmin, vmax = vmin - 0.05 * span, vmax + 0.05 * span

    def x(p):
        return pad + (width - 2 * pad) * p / eye.period

    def y(v):
        return height - pad - (height - 2 * pad) * (v - vmin) / (vmax - vmin)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" '
           'fill="none" stroke="black"/>']
    if title:
        out.append(f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="14">{title}</text>')
    for ph, v in eye.traces():
        if ph.size < 2:
            continue
        # break the polyline where the phase wraps
        cuts = np.flatnonzero(np.diff(ph) < 0) + 1
        for seg_p, seg_v in zip(np.split(ph, cuts), np.split(v, cuts)):
            if seg_p.size < 2:
                continue
            pts = " ".join(f"{x(a):.1f},{y(b):.1f}" for a, b in zip(seg_p, seg_v))
            out.append(f'<polyline points="{pts}" fill="none" stroke="#1f4e9c" '
                       'stroke-opacity="0.25" stroke-width="0.7"/>')
    if mask is not None:
        ph = np.linspace(0.0, eye.period, 401)
        k = max(0.0, np.ceil((mask.delay - eye.offset) / eye.period) + 1)
        m = mask.values(eye.offset + ph + k * eye.period)
        if mask.kind == "hexagon-half":
            for sign in (1.0, -1.0):
                pts = " ".join(f"{x(a):.1f},{y(vref + sign * b):.1f}" for a, b in zip(ph, m))
                dash = "" if sign > 0 else ' stroke-dasharray="4,3"'
                out.append(f'<polyline points="{pts}" fill="none" stroke="#c0392b" '
                           f'stroke-width="1.5"{dash}/>')
        else:
            open_ = m < mask.v_amplitude / 2
            for seg in np.split(np.arange(ph.size), np.flatnonzero(np.diff(open_)) + 1):
                if open_[seg[0]]:
                    x0, x1 = x(ph[seg[0]]), x(ph[seg[-1]])
                    out.append(f'<rect x="{x0:.1f}" y="{pad}" width="{x1 - x0:.1f}" '
                               f'height="{height - 2 * pad}" fill="#c0392b" '
                               'fill-opacity="0.08" stroke="#c0392b"/>')
            out.append(f'<line x1="{pad}" y1="{y(vref):.1f}" x2="{width - pad}" '
                       f'y2="{y(vref):.1f}" stroke="#c0392b" stroke-dasharray="4,3"/>')
    out.append(f'<text x="{pad}" y="{height - 12}" font-family="sans-serif" font-size="11">'
               f'0 .. {eye.period * 1e12:.0f} ps, {vmin:.3f} .. {vmax:.3f} V</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_eye_svg(path, eye: EyeDiagram, **kw) -> Path:
    path = Path(path)
    path.write_text(eye_svg(eye, **kw))
    return path
