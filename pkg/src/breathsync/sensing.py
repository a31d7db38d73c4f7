"""Respiration sensing from a front/back IMU pair.

The front IMU sits on the sternum and the back IMU at the same height on the
spine. Subtracting the back z-acceleration from the front cancels whole-body
motion; what remains is low-pass filtered and searched for extrema, which mark
the onsets of inspiration (minimum) and expiration (maximum).
"""

from __future__ import annotations

import csv
import enum
import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import IO, Iterable, Iterator, Optional, Sequence

import numpy as np

SAMPLE_RATE_HZ = 100.0

LOWPASS_CUTOFF_HZ = 1.0
LOWPASS_Q = 0.707

REFRACTORY_MS = 700
PROMINENCE_FRACTION = 0.20
PROMINENCE_FLOOR = 0.02  # m/s^2

DEPTH_WINDOW_MS = 60_000
DEPTH_PERCENTILE = 95.0

DURATION_RING = 3
DEFAULT_PHASE_MS = 2000.0

CSV_HEADER = ("t_ms", "ax_f", "ay_f", "az_f", "ax_b", "ay_b", "az_b")


class StreamError(ValueError):
    """A sample was rejected: non-finite values, or broken timing."""


class PhaseKind(enum.Enum):
    INSPIRATION = "InspirationOnset"
    EXPIRATION = "ExpirationOnset"

    @property
    def other(self) -> "PhaseKind":
        if self is PhaseKind.INSPIRATION:
            return PhaseKind.EXPIRATION
        return PhaseKind.INSPIRATION


@dataclass(frozen=True)
class ImuFramePair:
    t_ms: int
    az_front: float
    az_back: float
    ax_front: float = 0.0
    ay_front: float = 0.0
    ax_back: float = 0.0
    ay_back: float = 0.0


@dataclass(frozen=True)
class RespirationSample:
    t_ms: int
    az_raw: float
    az_filt: float


@dataclass(frozen=True)
class PhaseEvent:
    kind: PhaseKind
    t_ms: int
    depth: float
    prev_phase_duration_ms: Optional[int]
    latency_ms: int = 0  # confirmation delay: emission time minus t_ms

    def to_json(self) -> str:
        return json.dumps(
            {
                "kind": self.kind.value,
                "t_ms": self.t_ms,
                "depth": self.depth,
                "prev_phase_duration_ms": self.prev_phase_duration_ms,
            }
        )


@dataclass
class BreathTracker:
    """Per-stream breathing state: phase, recent durations, depth calibration."""

    phase: Optional[PhaseKind] = None
    phase_start_ms: Optional[int] = None
    insp_durations: deque = field(default_factory=lambda: deque(maxlen=DURATION_RING))
    exp_durations: deque = field(default_factory=lambda: deque(maxlen=DURATION_RING))
    # (t_ms, peak-to-trough amplitude)
    amplitudes: deque = field(default_factory=deque)

    def durations(self, kind: PhaseKind) -> deque:
        return self.insp_durations if kind is PhaseKind.INSPIRATION else self.exp_durations

    def record_amplitude(self, t_ms: int, amplitude: float) -> None:
        self.amplitudes.append((t_ms, amplitude))
        self.expire(t_ms)

    def expire(self, now_ms: int) -> None:
        while self.amplitudes and now_ms - self.amplitudes[0][0] > DEPTH_WINDOW_MS:
            self.amplitudes.popleft()

    def reference_amplitude(self) -> Optional[float]:
        """95th percentile of the amplitudes in the rolling window."""
        if not self.amplitudes:
            return None
        return float(np.percentile([a for _, a in self.amplitudes], DEPTH_PERCENTILE))

    def begin_phase(self, kind: PhaseKind, t_ms: int) -> Optional[int]:
        """Close the running phase (recording its duration) and open `kind`."""
        prev = None
        if self.phase is not None and self.phase_start_ms is not None:
            prev = t_ms - self.phase_start_ms
            if prev > 0:
                self.durations(self.phase).append(prev)
        self.phase = kind
        self.phase_start_ms = t_ms
        return prev


def difference_channels(frame: ImuFramePair) -> float:
    """Front minus back z-acceleration; cancels motion common to both IMUs."""
    if not (math.isfinite(frame.az_front) and math.isfinite(frame.az_back)):
        raise StreamError(f"non-finite acceleration at t_ms={frame.t_ms}")
    return frame.az_front - frame.az_back


def estimate_depth(peak: float, trough: float, tracker: BreathTracker) -> float:
    if peak < trough:
        raise ValueError("peak must not be below trough")
    ref = tracker.reference_amplitude()
    if ref is None:
        return 1.0
    if ref <= 0.0:
        return 1.0
    return min(1.0, max(0.0, (peak - trough) / ref))


def estimate_expected_duration(tracker: BreathTracker, kind: PhaseKind) -> float:
    """Median of the last three completed phases of `kind`, in ms."""
    ring = tracker.durations(kind)
    if not ring:
        return DEFAULT_PHASE_MS
    return float(np.median(list(ring)))


class LowPassFilter:
    """Second-order low-pass biquad (RBJ cookbook), direct form I.

    The state is primed with the first input as if it had been applied
    forever (unity DC gain), so a stream that starts away from zero does not
    produce a start-up transient that looks like an extremum.
    """

    def __init__(
        self,
        sample_rate: float = SAMPLE_RATE_HZ,
        cutoff_hz: float = LOWPASS_CUTOFF_HZ,
        q: float = LOWPASS_Q,
    ):
        if sample_rate < 20.0:
            raise ValueError("sample_rate must be at least 20 Hz")
        self.sample_rate = sample_rate
        w0 = 2.0 * math.pi * cutoff_hz / sample_rate
        alpha = math.sin(w0) / (2.0 * q)
        cw = math.cos(w0)
        a0 = 1.0 + alpha
        self.b0 = (1.0 - cw) / 2.0 / a0
        self.b1 = (1.0 - cw) / a0
        self.b2 = self.b0
        self.a1 = -2.0 * cw / a0
        self.a2 = (1.0 - alpha) / a0
        self.reset()

    def reset(self) -> None:
        self.x1 = self.x2 = self.y1 = self.y2 = 0.0
        self.primed = False

    def step(self, x: float) -> float:
        if not self.primed:
            self.x1 = self.x2 = self.y1 = self.y2 = x
            self.primed = True
        y = (
            self.b0 * x + self.b1 * self.x1 + self.b2 * self.x2
            - self.a1 * self.y1 - self.a2 * self.y2
        )
        self.x2, self.x1 = self.x1, x
        self.y2, self.y1 = self.y1, y
        return y

    def dc_group_delay_ms(self) -> float:
        """Group delay at 0 Hz; nearly flat across the breathing band."""
        a = (1.0, self.a1, self.a2)
        b = (self.b0, self.b1, self.b2)
        samples = sum(i * v for i, v in enumerate(b)) / sum(b) - sum(i * v for i, v in enumerate(a)) / sum(a)
        return samples * 1000.0 / self.sample_rate

    def response(self, freq_hz: float) -> complex:
        """Complex frequency response H(e^{jw}) at `freq_hz`."""
        z1 = np.exp(-2j * np.pi * freq_hz / self.sample_rate)
        num = self.b0 + self.b1 * z1 + self.b2 * z1 * z1
        den = 1.0 + self.a1 * z1 + self.a2 * z1 * z1
        return complex(num / den)


class TimingChecker:
    """Rejects timestamps that are not increasing or drift off the nominal grid."""

    def __init__(self, sample_rate: float, tolerance: float = 0.10):
        self.interval_ms = 1000.0 / sample_rate
        self.tolerance = tolerance
        self.last: Optional[float] = None

    def check(self, t_ms: float) -> None:
        if self.last is not None:
            dt = t_ms - self.last
            if abs(dt - self.interval_ms) > self.tolerance * self.interval_ms:
                raise StreamError(
                    f"sample interval {dt} ms at t_ms={t_ms} deviates from "
                    f"nominal {self.interval_ms} ms"
                )
        self.last = t_ms


def lowpass_filter(
    samples: Iterable[float],
    sample_rate: float = SAMPLE_RATE_HZ,
    timestamps: Optional[Iterable[float]] = None,
) -> Iterator[float]:
    """Stream `samples` through a fresh low-pass biquad.

    When `timestamps` (ms) are given they are checked against the nominal
    interval; a deviation beyond 10% raises StreamError.
    """
    filt = LowPassFilter(sample_rate)
    if timestamps is None:
        for x in samples:
            yield filt.step(x)
        return
    timing = TimingChecker(sample_rate)
    for t, x in zip(timestamps, samples):
        timing.check(t)
        yield filt.step(x)


class PhaseDetector:
    """Streaming extremum search with retreat-by-prominence confirmation.

    A running maximum (or minimum) is held as a candidate until the signal has
    moved away from it by the prominence threshold; the candidate is then
    emitted with its own timestamp, so each event lags by the confirmation
    delay. Before any amplitude has been calibrated the threshold is taken from
    the signal range seen so far.
    """

    def __init__(self, tracker: Optional[BreathTracker] = None, inspiration_at_minimum: bool = True):
        self.tracker = tracker if tracker is not None else BreathTracker()
        self.inspiration_at_minimum = inspiration_at_minimum
        self._seeking: Optional[str] = None  # "max" | "min" | None (undecided)
        self._max = (-math.inf, 0)
        self._min = (math.inf, 0)
        self._first_t: Optional[int] = None
        self._range_lo = math.inf
        self._range_hi = -math.inf
        self._last_event_t: Optional[int] = None
        self._last_extreme: Optional[tuple[str, float]] = None

    def _kind_for(self, extremum: str) -> PhaseKind:
        at_min = extremum == "min"
        if at_min == self.inspiration_at_minimum:
            return PhaseKind.INSPIRATION
        return PhaseKind.EXPIRATION

    def threshold(self) -> float:
        ref = self.tracker.reference_amplitude()
        if ref is None:
            ref = self._range_hi - self._range_lo if self._range_hi >= self._range_lo else 0.0
        return max(PROMINENCE_FLOOR, PROMINENCE_FRACTION * ref)

    def update(self, t_ms: int, value: float) -> Optional[PhaseEvent]:
        if self._first_t is None:
            self._first_t = t_ms
        self._range_lo = min(self._range_lo, value)
        self._range_hi = max(self._range_hi, value)
        self.tracker.expire(t_ms)
        if value > self._max[0]:
            self._max = (value, t_ms)
        if value < self._min[0]:
            self._min = (value, t_ms)
        thr = self.threshold()

        if self._seeking in (None, "max") and value <= self._max[0] - thr:
            return self._confirm("max", t_ms, value)
        if self._seeking in (None, "min") and value >= self._min[0] + thr:
            return self._confirm("min", t_ms, value)
        return None

    def _confirm(self, extremum: str, now_ms: int, value: float) -> Optional[PhaseEvent]:
        cand_value, cand_t = self._max if extremum == "max" else self._min
        opposite = "min" if extremum == "max" else "max"
        # restart the opposite search from the current sample
        if extremum == "max":
            self._min = (value, now_ms)
        else:
            self._max = (value, now_ms)

        if self._seeking is None and cand_t == self._first_t:
            # a stream boundary is not a local extremum
            self._seeking = opposite
            return None
        if self._last_event_t is not None and cand_t - self._last_event_t < REFRACTORY_MS:
            # suppressed; keep searching for the same kind so events alternate
            if extremum == "max":
                self._max = (value, now_ms)
            else:
                self._min = (value, now_ms)
            return None

        self._seeking = opposite
        kind = self._kind_for(extremum)
        depth = 1.0
        if self._last_extreme is not None:
            other_value = self._last_extreme[1]
            peak, trough = max(cand_value, other_value), min(cand_value, other_value)
            depth = estimate_depth(peak, trough, self.tracker)
            self.tracker.record_amplitude(cand_t, peak - trough)
        prev = self.tracker.begin_phase(kind, cand_t)
        self._last_event_t = cand_t
        self._last_extreme = (extremum, cand_value)
        return PhaseEvent(
            kind=kind,
            t_ms=cand_t,
            depth=depth,
            prev_phase_duration_ms=prev,
            latency_ms=now_ms - cand_t,
        )


def detect_phase_events(
    samples: Iterable[RespirationSample],
    tracker: Optional[BreathTracker] = None,
    inspiration_at_minimum: bool = True,
) -> Iterator[PhaseEvent]:
    detector = PhaseDetector(tracker, inspiration_at_minimum)
    for s in samples:
        event = detector.update(s.t_ms, s.az_filt)
        if event is not None:
            yield event


class RespirationPipeline:
    """Frame-at-a-time sensing: differencing, filtering and phase detection.

    With `compensate_delay`, event timestamps are moved back by the filter's
    group delay (rounded to the sample grid) so they refer to the unfiltered
    breath rather than to the extrema of the filtered trace.
    """

    def __init__(
        self,
        sample_rate: float = SAMPLE_RATE_HZ,
        inspiration_at_minimum: bool = True,
        compensate_delay: bool = True,
    ):
        self.timing = TimingChecker(sample_rate)
        self.filter = LowPassFilter(sample_rate)
        self.tracker = BreathTracker()
        self.detector = PhaseDetector(self.tracker, inspiration_at_minimum)
        step = 1000.0 / sample_rate
        self.delay_ms = int(round(self.filter.dc_group_delay_ms() / step) * step) if compensate_delay else 0
        self.first_t_ms: Optional[int] = None

    def push(self, frame: ImuFramePair) -> tuple[RespirationSample, Optional[PhaseEvent]]:
        az = difference_channels(frame)
        self.timing.check(frame.t_ms)
        sample = RespirationSample(frame.t_ms, az, self.filter.step(az))
        event = self.detector.update(sample.t_ms, sample.az_filt)
        if self.first_t_ms is None:
            self.first_t_ms = frame.t_ms
        if event is not None and self.delay_ms:
            event = replace(event, t_ms=event.t_ms - self.delay_ms, latency_ms=event.latency_ms + self.delay_ms)
            if event.t_ms < self.first_t_ms:
                # the extremum would predate the recording; it is filter warm-up
                event = None
        return sample, event

    def run(self, frames: Iterable[ImuFramePair]) -> tuple[list[RespirationSample], list[PhaseEvent]]:
        samples, events = [], []
        for frame in frames:
            sample, event = self.push(frame)
            samples.append(sample)
            if event is not None:
                events.append(event)
        return samples, events


class CsvFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def read_imu_csv(fh: IO[str]) -> Iterator[ImuFramePair]:
    """Parse dual-IMU CSV rows; raises CsvFormatError naming the bad line."""
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
        raise CsvFormatError(1, f"expected header {','.join(CSV_HEADER)}")
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(CSV_HEADER):
            raise CsvFormatError(lineno, f"expected {len(CSV_HEADER)} fields, got {len(row)}")
        try:
            t_ms = int(row[0])
            ax_f, ay_f, az_f, ax_b, ay_b, az_b = (float(v) for v in row[1:])
        except ValueError as exc:
            raise CsvFormatError(lineno, str(exc)) from None
        values = (ax_f, ay_f, az_f, ax_b, ay_b, az_b)
        if not all(math.isfinite(v) for v in values):
            raise CsvFormatError(lineno, "non-finite value")
        yield ImuFramePair(t_ms, az_f, az_b, ax_f, ay_f, ax_b, ay_b)


def write_imu_csv(fh: IO[str], frames: Iterable[ImuFramePair]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for f in frames:
        w.writerow([f.t_ms, repr(f.ax_front), repr(f.ay_front), repr(f.az_front),
                    repr(f.ax_back), repr(f.ay_back), repr(f.az_back)])


def write_respiration_csv(fh: IO[str], samples: Sequence[RespirationSample]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(("t_ms", "az_raw", "az_filt"))
    for s in samples:
        w.writerow([s.t_ms, repr(s.az_raw), repr(s.az_filt)])


def read_respiration_csv(fh: IO[str], column: str = "az_raw") -> tuple[np.ndarray, np.ndarray]:
    """Return (t_ms, values) from a respiration trace CSV."""
    reader = csv.DictReader(fh)
    if reader.fieldnames is None or column not in reader.fieldnames or "t_ms" not in reader.fieldnames:
        raise CsvFormatError(1, f"trace needs t_ms and {column} columns")
    t, v = [], []
    for lineno, row in enumerate(reader, start=2):
        try:
            t.append(float(row["t_ms"]))
            v.append(float(row[column]))
        except (TypeError, ValueError) as exc:
            raise CsvFormatError(lineno, str(exc)) from None
    return np.asarray(t), np.asarray(v)


def write_events_jsonl(fh: IO[str], events: Iterable[PhaseEvent]) -> None:
    for e in events:
        fh.write(e.to_json() + "\n")
