"""Acceptance criteria, one test each, at the stated tolerances.

Each test prints a single PASS/FAIL line (outside pytest's capture) before
asserting, so `pytest tests/test_acceptance.py` doubles as a report.
"""

import math
import time
from collections import Counter

import mpmath
import numpy as np
import pytest
from oracles import match_f1, routing_table, sine_extrema, two_pass_pearson
from test_relay import _members_for, frame_from, run_stress

from breathsync.analysis import AlignedPair, analyze, estimate_lag, pearson, resample_align
from breathsync.envelope import EnvelopeParams, Pattern, envelope_for_phase, eq2_amplitude
from breathsync.protocol import AmplitudeOrder, FrameError, SequenceTracker, decode_frame, encode_frame
from breathsync.relay import iter_records
from breathsync.sensing import (
    ImuFramePair,
    PhaseKind,
    RespirationPipeline,
    RespirationSample,
    detect_phase_events,
    difference_channels,
)
from breathsync.sim import BreatherParams, FollowerParams, gen_leader_frames, run_closed_loop


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})")
        assert ok, detail

    return emit


def test_1_ramp_fidelity(report):
    mpmath.mp.dps = 40
    T = 3000.0
    ts = np.linspace(0, 2 * T, 1000)
    start = time.perf_counter()
    got = [eq2_amplitude(float(t), T) for t in ts]
    elapsed = time.perf_counter() - start
    worst = 0.0
    for t, g in zip(ts, got):
        want = mpmath.mpf(100) if t > T else (mpmath.power(14, mpmath.mpf(float(t)) / T) - 1) / 13 * 100
        err = abs(g - want) if want == 0 else abs((g - want) / want)
        worst = max(worst, float(err))
    report(1, "ramp vs 40-digit oracle", worst <= 1e-9 and elapsed < 1.0,
           f"max rel err {worst:.2e}, {elapsed * 1000:.1f} ms")


def test_2_differencing(report):
    rng = np.random.default_rng(0)
    common = rng.standard_normal(9000) * 10
    exact = all(difference_channels(ImuFramePair(i, float(c), float(c))) == 0.0 for i, c in enumerate(common))
    p = BreatherParams(period_jitter_frac=0.0, motion_amp=0.5, noise_sigma=0.0)
    frames = list(gen_leader_frames(p, 90_000))
    t = np.array([f.t_ms for f in frames])
    breath = p.depth_amp * np.sin(2 * np.pi * t / p.natural_period_ms)
    err = float(np.max(np.abs(np.array([difference_channels(f) for f in frames]) - breath)))
    report(2, "common-mode cancellation", exact and err <= 1e-12 and len(frames) == 9000,
           f"exact zero={exact}, 90 s recovery err {err:.1e}")


def test_3_envelope_properties(report):
    rng = np.random.default_rng(3)
    failures = []
    for _ in range(300):
        T = float(rng.uniform(1000, 8000))
        depth = float(rng.uniform(0, 1))
        ts = np.linspace(0, 1.5 * T, 301)
        for pattern in Pattern:
            for kind in PhaseKind:
                vals = [envelope_for_phase(EnvelopeParams(pattern, T, depth, kind), t) for t in ts]
                if min(vals) < 0 or max(vals) > 100:
                    failures.append(("range", T, depth))
        insp = [envelope_for_phase(EnvelopeParams(Pattern.COUPLED, T, depth, PhaseKind.INSPIRATION), t) for t in ts]
        if any(b < a for a, b in zip(insp, insp[1:])):
            failures.append(("monotone", T, depth))
        ramp = np.array([eq2_amplitude(t, T) for t in np.linspace(0, T, 301)])
        if np.min(ramp[2:] - 2 * ramp[1:-1] + ramp[:-2]) < -1e-9:
            failures.append(("convex", T, depth))
        t0, delta, h = float(rng.uniform(0, 0.8)) * T, float(rng.uniform(0.01, 0.19)) * T, 1e-3 * T
        ratio = (eq2_amplitude(t0 + delta + h, T) - eq2_amplitude(t0 + delta, T)) / (eq2_amplitude(t0 + h, T) - eq2_amplitude(t0, T))
        if abs(ratio - 14 ** (delta / T)) > 1e-6:
            failures.append(("slope ratio", T, depth))
        if envelope_for_phase(EnvelopeParams(Pattern.DISCRETE, T, depth, PhaseKind.EXPIRATION), 0.0) != 0.0:
            failures.append(("discrete drop", T, depth))
    report(3, "envelope properties", not failures, f"300 random (T, depth) draws, {len(failures)} failures")


def test_4_peak_detection(report):
    rng = np.random.default_rng(4)
    f1s = []
    for _ in range(100):
        period = float(rng.uniform(2000, 10_000))
        duration = max(60_000.0, 8 * period)
        t = np.arange(0, duration, 10)
        x = np.sin(2 * np.pi * t / period) + 0.05 * rng.standard_normal(len(t))
        _, events = RespirationPipeline().run(ImuFramePair(int(a), float(b), 0.0) for a, b in zip(t, x))
        f1, _ = match_f1([(e.kind.value, e.t_ms) for e in events], sine_extrema(period, duration))
        f1s.append(f1)
    period_errs = []
    for period in np.linspace(2000, 10_000, 17):
        t = np.arange(0, 8 * period, 10)
        samples = [RespirationSample(int(a), 0.0, float(v)) for a, v in zip(t, np.sin(2 * np.pi * t / period))]
        starts = [e.t_ms for e in detect_phase_events(samples) if e.kind is PhaseKind.EXPIRATION]
        period_errs.append(abs(np.mean(np.diff(starts)) - period) / period)
    ok = min(f1s) >= 0.95 and max(period_errs) <= 0.05
    report(4, "phase detection", ok,
           f"F1 min {min(f1s):.3f} mean {np.mean(f1s):.3f} over 100 trials, worst period err {max(period_errs):.2%}")


def test_5_protocol(report):
    failures = 0
    for pattern in range(3):
        for mask in range(16):
            for level in (0, 1, 50, 99, 100):
                o = AmplitudeOrder(200, 65535, 2**32 - 1, pattern, level, mask)
                failures += decode_frame(encode_frame(o)) != o
    rng = np.random.default_rng(5)
    cols = [rng.integers(0, 256, 100_000), rng.integers(0, 65536, 100_000), rng.integers(0, 2**32, 100_000),
            rng.integers(0, 3, 100_000), rng.integers(0, 101, 100_000), rng.integers(0, 16, 100_000)]
    for fields in zip(*(c.tolist() for c in cols)):
        o = AmplitudeOrder(*fields)
        failures += decode_frame(encode_frame(o)) != o
    ref = encode_frame(AmplitudeOrder(7, 1, 1000, 0, 50, 15))
    missed = 0
    for bit in range(len(ref) * 8):
        bad = bytearray(ref)
        bad[bit // 8] ^= 1 << (bit % 8)
        try:
            decode_frame(bytes(bad))
            missed += 1
        except FrameError:
            pass
    tracker = SequenceTracker()
    wrap_ok = all(tracker.observe(1, s)[1] is None for s in (65534, 65535, 0, 1))
    report(5, "frame codec", failures == 0 and missed == 0 and wrap_ok,
           f"{240 + 100_000} roundtrips, {failures} failures; {missed}/104 bit flips undetected; wrap ok={wrap_ok}")


def test_6_relay(report, tmp_path):
    rng = __import__("random").Random(6)
    mismatches = 0
    cases = 0
    for kind in ("pair", "fanout", "mesh"):
        for n in range(0, (2 if kind == "pair" else 4) + 1):
            for _ in range(5):
                b, s, _ = _members_for(kind, n, rng)
                members = dict(b.session(s).members)
                table = routing_table(kind, members, "p0")
                for sender in members:
                    cases += 1
                    mismatches += b.route_frame(s, frame_from(sender, 1)) != table[sender]
    b, s, inboxes = run_stress(tmp_path)
    fifo = echo = True
    for sid, inbox in inboxes.items():
        per = {}
        for f in inbox.frames:
            per.setdefault(f[2], []).append(decode_frame(f).timestamp_ms)
        echo &= sid not in per
        fifo &= all(v == list(range(5000)) for v in per.values())
    delivered = Counter(f for ib in inboxes.values() for f in ib.frames)
    replayed = Counter()
    for _, f in iter_records(tmp_path / f"{s}.log"):
        replayed[f] += 3
    ok = mismatches == 0 and fifo and echo and delivered == replayed
    report(6, "relay routing and log", ok,
           f"{cases} routing cases, {mismatches} mismatches; 10000 frames: FIFO={fifo} no-echo={echo} "
           f"replay==delivered {delivered == replayed}")


def test_7_end_to_end(report):
    start = time.perf_counter()
    res = run_closed_loop(BreatherParams(natural_period_ms=4000), FollowerParams(coupling_gain=1.5, natural_period_ms=5000),
                          Pattern.COUPLED, 90_000)
    pair = resample_align(*res.trace("leader"), *res.trace("follower"))
    rep, _ = analyze(pair, tail_ms=60_000)
    elapsed = time.perf_counter() - start
    ok = rep.pearson_r >= 0.75 and rep.section is not None and elapsed < 30
    report(7, "closed-loop synchrony", ok,
           f"r={rep.pearson_r:.3f} over final 60 s, section={rep.section}, lag={rep.lag_ms:g} ms, {elapsed:.1f} s")


def test_8_analysis_oracles(report):
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(3, 500))
        x = rng.standard_normal(n) * float(rng.uniform(0.1, 100)) + float(rng.uniform(-50, 50))
        y = float(rng.uniform(-1, 1)) * x + rng.standard_normal(n)
        worst = max(worst, abs(pearson(x, y) - two_pass_pearson(x.tolist(), y.tolist())))
    lag_errs = []
    for delay in (-2300, -500, -10, 0, 10, 370, 1250, 4990):
        base = np.cumsum(rng.standard_normal(7000))
        d = delay // 10
        x = base[1000:7000 - 1000]
        y = base[1000 - d:7000 - 1000 - d]
        got = estimate_lag(AlignedPair(np.arange(len(x)) * 10.0, x, y))
        lag_errs.append(abs(got - delay))
    ok = worst <= 1e-12 and max(lag_errs) <= 10
    report(8, "analysis oracles", ok, f"max |r - two-pass| {worst:.1e} over 1000 pairs; worst lag err {max(lag_errs):g} ms")
