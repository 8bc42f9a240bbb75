"""Voltage-clamp protocols built from constant steps and linear ramps.

A protocol is an ordered list of segments that defines the command voltage
V(t) plus a uniform observation grid at a fixed sampling rate.  At a shared
segment boundary the later segment's voltage applies, so instantaneous steps
are unambiguous on the grid.

Six named designs ship with the package: ``d0_ap`` (an action-potential-like
validation waveform) and five training designs ``d1``..``d5``.  All six share
an identical step+ramp preamble and postamble; only the central portions
differ.  Each design exists at two scales: ``desk`` (1 kHz sampling, short
central sections) and ``paper`` (10 kHz, central step durations doubled).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ProtocolRangeError

VOLTAGE_RANGE = (-120.0, 40.0)  # mV; also the constraint-check range for rates


@dataclass(frozen=True)
class Segment:
    """One protocol piece: a constant step (v_start == v_end) or linear ramp."""

    duration: float  # ms
    v_start: float  # mV
    v_end: float  # mV

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("segment duration must be positive")
        lo, hi = VOLTAGE_RANGE
        for v in (self.v_start, self.v_end):
            if not lo <= v <= hi:
                raise ValueError(f"voltage {v} mV outside [{lo}, {hi}]")

    @property
    def is_ramp(self) -> bool:
        return self.v_start != self.v_end

    def voltage(self, offset):
        """Voltage at time ``offset`` (ms) past the segment start."""
        if not self.is_ramp:
            return self.v_start if np.isscalar(offset) else np.full_like(
                np.asarray(offset, dtype=float), self.v_start)
        frac = np.asarray(offset, dtype=float) / self.duration
        v = self.v_start + (self.v_end - self.v_start) * frac
        return float(v) if np.isscalar(offset) else v


def step(voltage: float, duration: float) -> Segment:
    return Segment(duration=duration, v_start=voltage, v_end=voltage)


def ramp(v_start: float, v_end: float, duration: float) -> Segment:
    return Segment(duration=duration, v_start=v_start, v_end=v_end)


@dataclass(frozen=True)
class Protocol:
    """An ordered, immutable list of segments plus the observation grid."""

    name: str
    segments: tuple[Segment, ...]
    sample_rate: float = 10_000.0  # Hz
    holding_potential: float = -80.0  # mV

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if not self.segments:
            raise ValueError("a protocol needs at least one segment")
        if not self.sample_rate > 0:
            raise ValueError("sample rate must be positive")

    @cached_property
    def boundaries(self) -> np.ndarray:
        """Segment start times, with the total duration appended; length n+1."""
        return np.concatenate([[0.0], np.cumsum([s.duration for s in self.segments])])

    @property
    def duration(self) -> float:
        """Total duration in ms."""
        return float(self.boundaries[-1])

    @property
    def n_observations(self) -> int:
        return int(np.floor(self.sample_rate * self.duration / 1000.0 + 1e-9))

    @property
    def dt(self) -> float:
        """Grid spacing in ms."""
        return 1000.0 / self.sample_rate

    def segment_index(self, t: float) -> int:
        """Index of the segment owning time ``t`` (later wins at boundaries)."""
        if t < 0.0 or t > self.duration:
            raise ProtocolRangeError(
                f"t={t} ms outside [0, {self.duration}] for protocol {self.name!r}")
        idx = int(np.searchsorted(self.boundaries, t, side="right")) - 1
        return min(idx, len(self.segments) - 1)

    def voltage_at(self, t: float) -> float:
        """Piecewise-linear command voltage at time ``t`` (ms)."""
        idx = self.segment_index(t)
        return float(self.segments[idx].voltage(t - self.boundaries[idx]))

    def observation_times(self) -> np.ndarray:
        """Uniform grid t_i = i / sample_rate (in ms), i = 0..n_d-1."""
        return np.arange(self.n_observations) * self.dt

    def grid_slices(self) -> list[tuple[int, int]]:
        """Per-segment [start, stop) observation-index ranges.

        An observation exactly on a boundary belongs to the later segment;
        a small index-space epsilon absorbs float rounding of the grid times.
        """
        n = self.n_observations
        idx = [0]
        for b in self.boundaries[1:-1]:
            idx.append(min(n, int(np.ceil(b / self.dt - 1e-9))))
        idx.append(n)
        return [(idx[i], idx[i + 1]) for i in range(len(self.segments))]

    def voltages_on_grid(self) -> np.ndarray:
        """Command voltage at every observation time."""
        out = np.empty(self.n_observations)
        for (i0, i1), seg, t0 in zip(self.grid_slices(), self.segments,
                                     self.boundaries[:-1]):
            if i1 > i0:
                offs = np.arange(i0, i1) * self.dt - t0
                out[i0:i1] = seg.voltage(offs)
        return out

    def voltage_span(self) -> tuple[float, float]:
        vs = [v for s in self.segments for v in (s.v_start, s.v_end)]
        return min(vs), max(vs)


# ---------------------------------------------------------------------------
# Text format: `# key = value` headers, one `duration v_start v_end` per line
# ---------------------------------------------------------------------------

_HEADER_RE = re.compile(r"^#\s*(\w+)\s*=\s*(.+?)\s*$")


def protocol_to_text(protocol: Protocol) -> str:
    lines = [
        "# ionfit protocol",
        f"# name = {protocol.name}",
        f"# sample_rate_hz = {protocol.sample_rate!r}",
        f"# holding_mv = {protocol.holding_potential!r}",
        "# columns: duration_ms v_start_mV v_end_mV",
    ]
    for s in protocol.segments:
        lines.append(f"{s.duration!r} {s.v_start!r} {s.v_end!r}")
    return "\n".join(lines) + "\n"


def parse_protocol(text: str) -> Protocol:
    name = "unnamed"
    sample_rate = 10_000.0
    holding = -80.0
    segments = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            m = _HEADER_RE.match(line)
            if m:
                key, value = m.group(1), m.group(2)
                if key == "name":
                    name = value
                elif key == "sample_rate_hz":
                    sample_rate = float(value)
                elif key == "holding_mv":
                    holding = float(value)
            continue
        fields = line.split()
        if len(fields) != 3:
            raise ValueError(f"line {lineno}: expected 'duration v_start v_end'")
        dur, v0, v1 = (float(f) for f in fields)
        segments.append(Segment(duration=dur, v_start=v0, v_end=v1))
    if not segments:
        raise ValueError("protocol file defines no segments")
    return Protocol(name=name, segments=tuple(segments), sample_rate=sample_rate,
                    holding_potential=holding)


def load_protocol(path) -> Protocol:
    return parse_protocol(Path(path).read_text())


def save_protocol(protocol: Protocol, path):
    Path(path).write_text(protocol_to_text(protocol))


# ---------------------------------------------------------------------------
# Built-in designs
# ---------------------------------------------------------------------------

# Shared bracketing sections: a holding step, then the same reference
# pull-down + rising ramp sequence at the start and end of every design.
_PREAMBLE = (step(-80, 20), step(-120, 10), ramp(-120, -80, 8))
_POSTAMBLE = (step(-120, 10), ramp(-120, -80, 8), step(-80, 20))

# Central sections at desk scale (ms).  Steps only, per-design emphases:
# d1 staircase, d2 inactivation probes, d3 phase-space walk, d4 quantised
# triangle sweeps, d5 slower activation emphasis.
_CENTRAL_STEPS = {
    "d1": [(40, 300), (-120, 40), (-60, 200), (20, 200), (-100, 50),
           (-30, 200), (40, 150), (-80, 200)],
    "d2": [(40, 350), (-120, 15), (40, 60), (-90, 15), (40, 60), (-60, 15),
           (40, 60), (-30, 15), (40, 60), (0, 15), (40, 60), (-120, 120),
           (-50, 300)],
    "d3": [(-30, 80), (10, 160), (-110, 30), (30, 240), (-70, 120), (0, 90),
           (-120, 40), (40, 180), (-50, 260), (20, 100)],
    "d4": [(-60, 80), (-20, 80), (20, 80), (35, 80), (0, 80), (-40, 80),
           (-80, 80), (-110, 80), (-70, 80), (-20, 80), (30, 80), (-10, 80),
           (-50, 80), (-90, 80), (-30, 80), (10, 80)],
    "d5": [(40, 400), (-120, 30), (-40, 250), (10, 250), (-90, 80),
           (30, 250), (-70, 250)],
}

# Action-potential-like complexes for the validation design: fast upstroke,
# decaying plateau, long repolarisation ramp, then a rest interval.
_AP_RESTS = (320, 220, 160)


def _d0_central(stretch: float) -> tuple[Segment, ...]:
    segs = []
    for rest in _AP_RESTS + (None,):
        segs.append(ramp(-80 if not segs else -85, 32, 3))
        segs.append(ramp(32, 10, 60 * stretch))
        segs.append(ramp(10, -85, 180 * stretch))
        if rest is not None:
            segs.append(step(-85, rest * stretch))
    segs.append(step(-80, 100 * stretch))
    return tuple(segs)


SCALES = ("desk", "paper")
TRAINING_NAMES = ("d1", "d2", "d3", "d4", "d5")
VALIDATION_NAME = "d0_ap"


def builtin_protocols(scale: str = "desk") -> dict[str, Protocol]:
    """The six named designs; ``d0_ap`` is validation-only by convention."""
    if scale not in SCALES:
        raise ValueError(f"scale must be one of {SCALES}")
    stretch = 1.0 if scale == "desk" else 2.0
    rate = 1000.0 if scale == "desk" else 10_000.0
    out = {}
    central = _d0_central(stretch)
    out[VALIDATION_NAME] = Protocol(
        name=VALIDATION_NAME, segments=_PREAMBLE + central + _POSTAMBLE,
        sample_rate=rate)
    for name in TRAINING_NAMES:
        central = tuple(step(v, dur * stretch) for v, dur in _CENTRAL_STEPS[name])
        out[name] = Protocol(name=name, segments=_PREAMBLE + central + _POSTAMBLE,
                             sample_rate=rate)
    return out


def resolve_protocol(spec: str, scale: str = "desk") -> Protocol:
    """Resolve a builtin design name or a protocol text-file path."""
    builtins = builtin_protocols(scale)
    if spec in builtins:
        return builtins[spec]
    path = Path(spec)
    if path.exists():
        return load_protocol(path)
    raise LookupError(
        f"protocol {spec!r} is neither a builtin ({sorted(builtins)}) nor a file")
