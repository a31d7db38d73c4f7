"""Synthetic breathers and the closed sensing -> vibration -> entrainment loop.

Everything runs on a virtual 10 ms clock, so a run is a pure function of its
parameters and seeds.

Breath phase convention: the breath term of a_z is ``depth_amp * sin(theta)``.
Inspiration starts at the minimum (theta = 3*pi/2) and expiration at the
maximum (theta = pi/2). The follower keeps its own phase ``psi`` with psi = 0
at inspiration onset and psi = pi at expiration onset, i.e. theta = psi + 3*pi/2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .envelope import EnvelopeParams, Pattern, envelope_for_phase, invert_ramp, quantize_level
from .protocol import AmplitudeOrder, FrameError, FrameReader, SequenceTracker, encode_frame
from .relay.broker import Broker, RoutingMode
from .sensing import (
    SAMPLE_RATE_HZ,
    ImuFramePair,
    PhaseEvent,
    PhaseKind,
    RespirationPipeline,
    RespirationSample,
    estimate_expected_duration,
)

TWO_PI = 2.0 * math.pi
SWAY_HZ = 1.7
NOISE_CLIP_SIGMAS = 6.0
ORDER_INTERVAL_MS = 20
TICK_MS = 10
LOCK_TOLERANCE = 0.05


@dataclass(frozen=True)
class BreatherParams:
    natural_period_ms: float = 4000.0
    depth_amp: float = 0.3
    period_jitter_frac: float = 0.02
    motion_amp: float = 0.1
    noise_sigma: float = 0.01
    rng_seed: int = 1

    def __post_init__(self):
        if not 2000.0 <= self.natural_period_ms <= 10000.0:
            raise ValueError("natural_period_ms must lie in [2000, 10000]")
        for name in ("depth_amp", "period_jitter_frac", "motion_amp", "noise_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class FollowerParams:
    coupling_gain: float = 1.5  # rad/s
    natural_period_ms: float = 5000.0
    depth_amp: float = 0.3
    motion_amp: float = 0.1
    noise_sigma: float = 0.01
    rng_seed: int = 2

    def __post_init__(self):
        if self.coupling_gain < 0:
            raise ValueError("coupling_gain must be non-negative")
        if not 2000.0 <= self.natural_period_ms <= 10000.0:
            raise ValueError("natural_period_ms must lie in [2000, 10000]")

    def body(self) -> BreatherParams:
        return BreatherParams(self.natural_period_ms, self.depth_amp, 0.0,
                              self.motion_amp, self.noise_sigma, self.rng_seed)


class Body:
    """Dual-IMU readings for a torso breathing at a given phase.

    Front = breath + shared sway + noise; back = shared sway + noise. Noise is
    Gaussian truncated at six sigma.
    """

    def __init__(self, params: BreatherParams, rng: np.random.Generator):
        self.params = params
        self.rng = rng

    def _noise(self) -> float:
        s = self.params.noise_sigma
        if s == 0:
            return 0.0
        lim = NOISE_CLIP_SIGMAS * s
        return min(lim, max(-lim, s * float(self.rng.standard_normal())))

    def frame(self, t_ms: int, theta: float) -> ImuFramePair:
        p = self.params
        sway = p.motion_amp * math.sin(TWO_PI * SWAY_HZ * t_ms / 1000.0)
        front = p.depth_amp * math.sin(theta) + sway + self._noise()
        back = sway + self._noise()
        return ImuFramePair(t_ms, front, back)


class LeaderBreather:
    """Free-running breather with per-cycle period jitter."""

    def __init__(self, params: BreatherParams, rate_hz: float = SAMPLE_RATE_HZ):
        self.params = params
        self.dt_ms = 1000.0 / rate_hz
        self.rng = np.random.default_rng(params.rng_seed)
        self.body = Body(params, self.rng)
        self.theta = 0.0
        self._cycle = 0
        self._cycle_start = 0.0  # fractional sample index where the cycle began
        self.period_ms = self._draw_period()
        self.n = 0

    def _draw_period(self) -> float:
        p = self.params
        if p.period_jitter_frac == 0:
            return p.natural_period_ms
        jitter = p.period_jitter_frac * float(self.rng.standard_normal())
        return p.natural_period_ms * min(1.5, max(0.5, 1.0 + jitter))

    def step(self) -> ImuFramePair:
        t_ms = int(round(self.n * self.dt_ms))
        # phase from the step count inside the cycle, so it does not drift
        frac = (self.n - self._cycle_start) * self.dt_ms / self.period_ms
        if frac >= 1.0:
            self._cycle_start += self.period_ms / self.dt_ms
            self._cycle += 1
            self.period_ms = self._draw_period()
            frac = (self.n - self._cycle_start) * self.dt_ms / self.period_ms
        self.theta = TWO_PI * (self._cycle + frac)
        frame = self.body.frame(t_ms, self.theta)
        self.n += 1
        return frame


def gen_leader_frames(params: BreatherParams, duration_ms: float, rate_hz: float = SAMPLE_RATE_HZ) -> Iterator[ImuFramePair]:
    leader = LeaderBreather(params, rate_hz)
    n = int(round(duration_ms * rate_hz / 1000.0))
    for _ in range(n):
        yield leader.step()


class StimulusDecoder:
    """Recovers the sender's breath phase from the received level stream.

    Turning points of the level (with a small hysteresis) mark phase onsets;
    which onset a peak or trough means depends on the pattern. Between onsets
    the level is mapped back through the inverse ramp, normalised by the
    most recent peak level since depth scales the whole envelope.
    """

    HYSTERESIS = 2  # levels

    def __init__(self):
        self.direction: Optional[int] = None  # +1 rising, -1 falling
        self.extreme: Optional[tuple[float, float]] = None  # (level, t_ms)
        self.kind: Optional[PhaseKind] = None
        self.onset_ms: Optional[float] = None
        self.scale = 100.0
        self.durations = {PhaseKind.INSPIRATION: 2000.0, PhaseKind.EXPIRATION: 2000.0}

    def _onset(self, kind: PhaseKind, t_ms: float) -> None:
        if self.kind is not None and self.onset_ms is not None and t_ms > self.onset_ms:
            self.durations[self.kind] = t_ms - self.onset_ms
        self.kind = kind
        self.onset_ms = t_ms

    def update(self, t_ms: float, level: float, pattern: Pattern) -> Optional[float]:
        """Feed one received level; returns the stimulus phase or None if unknown."""
        h = self.HYSTERESIS
        if self.extreme is None:
            self.extreme = (level, t_ms)
        elif self.direction is None:
            if abs(level - self.extreme[0]) > h:
                self.direction = 1 if level > self.extreme[0] else -1
                self.extreme = (level, t_ms)
        elif self.direction == 1:
            # ties move the extreme forward: a plateau ends where the drop starts
            if level >= self.extreme[0]:
                self.extreme = (level, t_ms)
            elif level < self.extreme[0] - h:
                self.scale = max(1.0, self.extreme[0])
                self._onset(self._kind_at("peak", pattern), self.extreme[1])
                self.direction, self.extreme = -1, (level, t_ms)
        else:
            if level <= self.extreme[0]:
                self.extreme = (level, t_ms)
            elif level > self.extreme[0] + h:
                self._onset(self._kind_at("trough", pattern), self.extreme[1])
                self.direction, self.extreme = 1, (level, t_ms)
        return self.phase(t_ms, level, pattern)

    @staticmethod
    def _kind_at(turn: str, pattern: Pattern) -> PhaseKind:
        peak_kind = PhaseKind.INSPIRATION if pattern is Pattern.INVERSED else PhaseKind.EXPIRATION
        return peak_kind if turn == "peak" else peak_kind.other

    def phase(self, t_ms: float, level: float, pattern: Pattern) -> Optional[float]:
        if self.kind is None:
            return None
        self.scale = max(self.scale, level, 1.0)
        rising = (self.kind is PhaseKind.INSPIRATION) != (pattern is Pattern.INVERSED)
        if pattern is Pattern.DISCRETE and self.kind is PhaseKind.EXPIRATION:
            frac = (t_ms - self.onset_ms) / self.durations[PhaseKind.EXPIRATION]
        elif rising:
            frac = invert_ramp(100.0 * level / self.scale)
        else:
            frac = 1.0 - invert_ramp(100.0 * level / self.scale)
        frac = min(1.0, max(0.0, frac))
        base = 0.0 if self.kind is PhaseKind.INSPIRATION else math.pi
        return base + math.pi * frac


@dataclass
class FollowerState:
    psi: float = math.pi / 2  # starts mid-inspiration, away from the leader's phase
    t_ms: float = 0.0
    decoder: StimulusDecoder = field(default_factory=StimulusDecoder)
    last_stim: Optional[float] = None


def phase_velocity(psi: float, stim: Optional[float], natural_period_ms: float, k: float) -> float:
    """dpsi/dt in rad/s: natural rate plus sinusoidal pull toward the stimulus."""
    omega = TWO_PI * 1000.0 / natural_period_ms
    if stim is None or k == 0:
        return omega
    return omega + k * math.sin(stim - psi)


def follower_step(
    state: FollowerState,
    received_level: Optional[float],
    received_pattern: Optional[Pattern],
    dt_ms: float,
    params: FollowerParams,
) -> float:
    """Advance the follower by `dt_ms` (forward Euler); returns the new phase."""
    if dt_ms <= 0:
        raise ValueError("dt must be positive")
    stim = None
    if received_level is not None and received_pattern is not None:
        stim = state.decoder.update(state.t_ms, received_level, received_pattern)
    state.last_stim = stim
    state.psi += phase_velocity(state.psi, stim, params.natural_period_ms, params.coupling_gain) * dt_ms / 1000.0
    state.t_ms += dt_ms
    return state.psi


class EnvelopeSender:
    """Belt-side transmitter: phase events in, amplitude orders out."""

    def __init__(self, pipeline: RespirationPipeline, pattern: Pattern, source_id: int = 0, channel_mask: int = 0b1111):
        self.pipeline = pipeline
        self.pattern = pattern
        self.source_id = source_id
        self.channel_mask = channel_mask
        self.params: Optional[EnvelopeParams] = None
        self.onset_ms = 0
        self.seq = 0

    def on_event(self, event: PhaseEvent) -> None:
        T = estimate_expected_duration(self.pipeline.tracker, event.kind)
        self.params = EnvelopeParams(self.pattern, T, event.depth, event.kind)
        self.onset_ms = event.t_ms

    def level(self, now_ms: int) -> float:
        if self.params is None:
            return 0.0
        # the event is confirmed late; start the envelope where the phase already is
        return envelope_for_phase(self.params, max(0, now_ms - self.onset_ms))

    def order(self, now_ms: int) -> bytes:
        frame = encode_frame(AmplitudeOrder(
            self.source_id, self.seq, now_ms & 0xFFFFFFFF, int(self.pattern),
            quantize_level(self.level(now_ms)), self.channel_mask,
        ))
        self.seq = (self.seq + 1) & 0xFFFF
        return frame


class BeltReceiver:
    """Decodes forwarded frames and holds the latest level and pattern."""

    def __init__(self):
        self.reader = FrameReader()
        self.sequence = SequenceTracker()
        self.level: Optional[float] = None
        self.pattern: Optional[Pattern] = None
        self.source: Optional[int] = None
        self.gaps = []
        self.received = 0

    def __call__(self, data: bytes) -> None:
        for order in self.reader.feed(data):
            if self.source is None:
                self.source = order.source_id
            if order.source_id != self.source:
                # several senders: follow the first one heard
                continue
            _, gap = self.sequence.observe(order.source_id, order.seq)
            if gap is not None:
                self.gaps.append(gap)
            self.level = float(order.level)
            self.pattern = Pattern(order.pattern)
            self.received += 1


@dataclass
class ClosedLoopResult:
    leader_samples: list[RespirationSample]
    follower_samples: list[RespirationSample]
    leader_events: list[PhaseEvent]
    follower_events: list[PhaseEvent]
    follower_psi: np.ndarray
    follower_stim: np.ndarray  # NaN where the stimulus phase was unknown
    log: list[tuple[int, bytes]]
    session_id: str
    counters: dict

    def trace(self, who: str, column: str = "az_raw") -> tuple[np.ndarray, np.ndarray]:
        samples = self.leader_samples if who == "leader" else self.follower_samples
        t = np.array([s.t_ms for s in samples], dtype=float)
        v = np.array([getattr(s, column) for s in samples], dtype=float)
        return t, v

    def follower_cycle_starts(self) -> np.ndarray:
        """Times (ms) at which the follower's phase passed a multiple of 2*pi."""
        k = np.floor(self.follower_psi / TWO_PI)
        idx = np.nonzero(np.diff(k) > 0)[0] + 1
        return idx * float(TICK_MS)


def lock_time_ms(cycle_starts: np.ndarray, period_ms: float, tolerance: float = LOCK_TOLERANCE) -> Optional[float]:
    """Start of the first cycle after which every full cycle stays within
    `tolerance` of `period_ms`; None if the last cycle is still off."""
    durations = np.diff(cycle_starts)
    if len(durations) == 0:
        return None
    off = np.nonzero(np.abs(durations - period_ms) > tolerance * period_ms)[0]
    if len(off) == 0:
        return float(cycle_starts[0])
    first_good = off[-1] + 1
    if first_good >= len(durations):
        return None
    return float(cycle_starts[first_good])


def run_closed_loop(
    leader: BreatherParams,
    follower: FollowerParams,
    pattern: Pattern,
    duration_ms: int,
    broker: Optional[Broker] = None,
) -> ClosedLoopResult:
    """Leader and follower wired through sensing, envelope, protocol and a Pair relay.

    Both directions are live; the leader has no coupling, so the frames it
    receives are only logged. The broker runs on the virtual clock.
    """
    if duration_ms <= 0:
        raise ValueError("duration_ms must be positive")
    now = [0]
    if broker is None:
        broker = Broker(clock=lambda: now[0])
    else:
        broker.clock = lambda: now[0]
    session = broker.create_session(RoutingMode.pair())
    leader_rx, follower_rx = BeltReceiver(), BeltReceiver()
    lead_sid = broker.join(session, "leader", leader_rx)
    foll_sid = broker.join(session, "follower", follower_rx)

    lead_src = LeaderBreather(leader)
    foll_body = Body(follower.body(), np.random.default_rng(follower.rng_seed))
    foll_state = FollowerState()
    lead_pipe, foll_pipe = RespirationPipeline(), RespirationPipeline()
    lead_tx = EnvelopeSender(lead_pipe, pattern, lead_sid)
    foll_tx = EnvelopeSender(foll_pipe, pattern, foll_sid)

    n = int(duration_ms // TICK_MS)
    lead_samples, foll_samples = [], []
    lead_events, foll_events = [], []
    psi = np.empty(n)
    stim = np.empty(n)
    for i in range(n):
        t = i * TICK_MS
        now[0] = t
        lf = lead_src.step()
        ff = foll_body.frame(t, foll_state.psi + 1.5 * math.pi)
        psi[i] = foll_state.psi

        for pipe, frame, samples, events, tx in (
            (lead_pipe, lf, lead_samples, lead_events, lead_tx),
            (foll_pipe, ff, foll_samples, foll_events, foll_tx),
        ):
            sample, event = pipe.push(frame)
            samples.append(sample)
            if event is not None:
                events.append(event)
                tx.on_event(event)

        if t % ORDER_INTERVAL_MS == 0:
            broker.route_frame(session, lead_tx.order(t))
            broker.route_frame(session, foll_tx.order(t))

        follower_step(foll_state, follower_rx.level, follower_rx.pattern, TICK_MS, follower)
        stim[i] = foll_state.last_stim if foll_state.last_stim is not None else np.nan

    s = broker.session(session)
    if hasattr(s.log, "entries"):
        log = list(s.log.entries)
    else:
        from .relay.log import iter_records

        s.log.flush()
        log = list(iter_records(s.log.path))
    return ClosedLoopResult(
        lead_samples, foll_samples, lead_events, foll_events, psi, stim,
        log, session, dict(s.counters),
    )
