"""Vibration envelopes and simulated LRA drive.

Intensity follows an exponential ramp, ((14^(t/T) - 1) / 13) * 100 % over an
expected phase duration T, so equal time steps give equal *ratios* of
intensity increment. Three breath-to-vibration patterns are supported.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import IO, Iterable, Iterator, Optional, Sequence

import numpy as np

from .sensing import PhaseKind

RAMP_BASE = 14.0
RAMP_SPAN = 13.0  # RAMP_BASE - 1; normalizes the ramp to reach 100% at t = T

COMMAND_RATE_HZ = 50.0


class Pattern(enum.IntEnum):
    COUPLED = 0
    INVERSED = 1
    DISCRETE = 2

    @classmethod
    def from_name(cls, name: str) -> "Pattern":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown pattern {name!r}; expected coupled, inversed or discrete") from None


@dataclass(frozen=True)
class EnvelopeParams:
    pattern: Pattern
    T_ms: float
    depth: float
    phase_kind: PhaseKind

    def __post_init__(self):
        if not self.T_ms > 0:
            raise ValueError("T_ms must be positive")
        if not 0.0 <= self.depth <= 1.0:
            raise ValueError("depth must lie in [0, 1]")


@dataclass(frozen=True)
class EnvelopeSample:
    t_ms: float
    level: float


@dataclass(frozen=True)
class ActuatorConfig:
    carrier_hz: float = 200.0
    channels: int = 4
    synth_rate_hz: float = 2000.0

    def __post_init__(self):
        if self.synth_rate_hz < 10 * self.carrier_hz:
            raise ValueError("synth_rate_hz must be at least 10x carrier_hz")


@dataclass(frozen=True)
class WaveformFrame:
    t_ms: float
    drive: tuple[float, ...]


def eq2_amplitude(t_ms: float, T_ms: float) -> float:
    """Exponential ramp level in percent; saturates at 100 after T."""
    if not T_ms > 0:
        raise ValueError("T_ms must be positive")
    if t_ms < 0:
        raise ValueError("t_ms must be non-negative")
    if t_ms > T_ms:
        return 100.0
    if t_ms == 0:
        return 0.0
    return (RAMP_BASE ** (t_ms / T_ms) - 1.0) / RAMP_SPAN * 100.0


def invert_ramp(level: float) -> float:
    """Fraction t/T at which the ramp reaches `level` percent (clamped to [0, 1])."""
    level = min(100.0, max(0.0, level))
    return math.log1p(level * RAMP_SPAN / 100.0) / math.log(RAMP_BASE)


def envelope_for_phase(params: EnvelopeParams, t_ms: float) -> float:
    T = params.T_ms
    kind = params.phase_kind
    if params.pattern is Pattern.INVERSED:
        kind = kind.other
    if params.pattern is Pattern.DISCRETE and kind is PhaseKind.EXPIRATION:
        return 0.0
    if kind is PhaseKind.INSPIRATION:
        level = eq2_amplitude(t_ms, T)
    else:
        level = eq2_amplitude(T - min(t_ms, T), T)
    return min(100.0, max(0.0, params.depth * level))


def quantize_level(level: float) -> int:
    if not 0.0 <= level <= 100.0:
        raise ValueError(f"level {level} outside [0, 100]")
    return int(Decimal(repr(level)).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def channel_enabled(mask: int, channel: int, channels: int = 4) -> bool:
    # bit order is MSB-first: 0b1000 is channel 0
    return bool(mask >> (channels - 1 - channel) & 1)


class WaveformSynth:
    """Zero-order-hold envelope times a 200 Hz carrier.

    Samples are taken at the centre of each synthesis interval,
    t_n = (n + 0.5) / synth_rate, on a global time base so the carrier phase
    is continuous across calls.
    """

    def __init__(self, cfg: ActuatorConfig = ActuatorConfig(), channel_mask: int = 0b1111):
        if not 0 <= channel_mask < (1 << cfg.channels):
            raise ValueError("channel_mask out of range")
        self.cfg = cfg
        self.gains = np.array(
            [1.0 if channel_enabled(channel_mask, ch, cfg.channels) else 0.0 for ch in range(cfg.channels)]
        )
        self._n = 0

    def render_until(self, end_ms: float, level: float) -> list[WaveformFrame]:
        """Emit every sample whose centre falls before `end_ms`, holding `level`."""
        rate = self.cfg.synth_rate_hz
        n_end = math.ceil(end_ms * rate / 1000.0 - 0.5)
        frames = []
        amp = level / 100.0
        while self._n < n_end:
            t_s = (self._n + 0.5) / rate
            v = amp * math.sin(2.0 * math.pi * self.cfg.carrier_hz * t_s)
            v = min(1.0, max(-1.0, v))
            frames.append(WaveformFrame(t_s * 1000.0, tuple(float(g * v) for g in self.gains)))
            self._n += 1
        return frames

    def skip_to(self, t_ms: float) -> None:
        self._n = max(self._n, math.ceil(t_ms * self.cfg.synth_rate_hz / 1000.0 - 0.5))


def synthesize_waveform(
    levels: Iterable[EnvelopeSample],
    cfg: ActuatorConfig = ActuatorConfig(),
    channel_mask: int = 0b1111,
    end_ms: Optional[float] = None,
) -> Iterator[WaveformFrame]:
    """Drive frames for an envelope stream.

    Each level is held until the next envelope sample; the last one is held
    for one command period (20 ms) unless `end_ms` says otherwise.
    """
    synth = WaveformSynth(cfg, channel_mask)
    prev: Optional[EnvelopeSample] = None
    for s in levels:
        if prev is None:
            synth.skip_to(s.t_ms)
        else:
            if s.t_ms < prev.t_ms:
                raise ValueError("envelope timestamps must be nondecreasing")
            yield from synth.render_until(s.t_ms, prev.level)
        prev = s
    if prev is not None:
        stop = end_ms if end_ms is not None else prev.t_ms + 1000.0 / COMMAND_RATE_HZ
        yield from synth.render_until(stop, prev.level)


def cycle_envelope(
    pattern: Pattern, T_ms: float, depth: float, rate_hz: float = COMMAND_RATE_HZ
) -> list[EnvelopeSample]:
    """One inspiration of length T followed by one expiration of length T."""
    step = 1000.0 / rate_hz
    n = int(round(T_ms / step))
    out = []
    insp = EnvelopeParams(pattern, T_ms, depth, PhaseKind.INSPIRATION)
    exp = EnvelopeParams(pattern, T_ms, depth, PhaseKind.EXPIRATION)
    for i in range(n + 1):
        t = i * step
        out.append(EnvelopeSample(t, envelope_for_phase(insp, t)))
    for i in range(1, n + 1):
        t = i * step
        out.append(EnvelopeSample(T_ms + t, envelope_for_phase(exp, t)))
    return out


def write_envelope_csv(fh: IO[str], samples: Sequence[EnvelopeSample]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(("t_ms", "level"))
    for s in samples:
        w.writerow([f"{s.t_ms:g}", f"{s.level:.6f}"])


def write_waveform_csv(fh: IO[str], frames: Iterable[WaveformFrame]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(("t_ms", "ch0", "ch1", "ch2", "ch3"))
    for f in frames:
        w.writerow([f"{f.t_ms:g}", *(f"{v:.6f}" for v in f.drive)])
