"""Synchrony between two respiration traces: alignment, Pearson r, lag and
synchronized-section detection."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import IO, Optional, Sequence

import numpy as np
from scipy import signal

ANALYSIS_RATE_HZ = 100.0
MAX_LAG_MS = 5000.0
SECTION_WINDOW_MS = 30_000.0
SECTION_STEP_MS = 1000.0
SECTION_THRESHOLD = 0.6
TIE_TOLERANCE = 1e-9


class AnalysisError(ValueError):
    pass


class NoOverlap(AnalysisError):
    pass


class ConstantSeries(AnalysisError):
    pass


class TooShort(AnalysisError):
    pass


@dataclass(frozen=True)
class AlignedPair:
    t_ms: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if not (len(self.t_ms) == len(self.x) == len(self.y)) or len(self.x) < 2:
            raise AnalysisError("aligned series need equal lengths of at least 2")

    @property
    def dt_ms(self) -> float:
        return float(self.t_ms[1] - self.t_ms[0])

    def tail(self, duration_ms: float) -> "AlignedPair":
        keep = self.t_ms >= self.t_ms[-1] - duration_ms + 0.5 * self.dt_ms
        return AlignedPair(self.t_ms[keep], self.x[keep], self.y[keep])


@dataclass
class SyncReport:
    pearson_r: float
    lag_ms: float
    section: Optional[tuple[float, float]]
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["section"] = list(self.section) if self.section is not None else None
        extra = d.pop("extra")
        d.update(extra)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass(frozen=True)
class WindowScore:
    start_ms: float
    end_ms: float
    lag_ms: float
    r: float


def _strictly_increasing(t: np.ndarray) -> bool:
    return bool(np.all(np.diff(t) > 0))


def resample_align(
    x_t: Sequence[float],
    x: Sequence[float],
    y_t: Sequence[float],
    y: Sequence[float],
    rate_hz: float = ANALYSIS_RATE_HZ,
) -> AlignedPair:
    """Linearly interpolate both series onto a shared grid over their overlap."""
    x_t, x, y_t, y = (np.asarray(a, dtype=float) for a in (x_t, x, y_t, y))
    for name, tt, vv in (("x", x_t, x), ("y", y_t, y)):
        if len(tt) < 2 or len(tt) != len(vv):
            raise AnalysisError(f"{name} needs at least 2 samples with matching timestamps")
        if not _strictly_increasing(tt):
            raise AnalysisError(f"{name} timestamps must be strictly increasing")
    step = 1000.0 / rate_hz
    start = max(x_t[0], y_t[0])
    end = min(x_t[-1], y_t[-1])
    if end - start < step:
        raise NoOverlap(f"overlap [{start}, {end}] ms shorter than one sample")
    n = int(math.floor((end - start) / step + 1e-9)) + 1
    grid = start + step * np.arange(n)
    return AlignedPair(grid, np.interp(grid, x_t, x), np.interp(grid, y_t, y))


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Sample Pearson correlation, two-pass (centre first, then accumulate)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise AnalysisError("pearson needs two 1-D series of equal length >= 2")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ConstantSeries("correlation is undefined for a constant series")
    dx = x - x.mean()
    dy = y - y.mean()
    r = float(np.dot(dx, dy) / math.sqrt(float(np.dot(dx, dx)) * float(np.dot(dy, dy))))
    return min(1.0, max(-1.0, r))


def lagged_correlation(x: np.ndarray, y: np.ndarray, max_lag: int) -> tuple[np.ndarray, np.ndarray]:
    """Pearson r of the overlapping parts of x[i] and y[i + d] for |d| <= max_lag.

    Sums over every overlap come from one FFT cross-correlation plus
    cumulative sums, so all lags cost O(N log N) together. Lags whose
    overlap is constant get NaN.
    """
    n = len(x)
    max_lag = min(max_lag, n - 2)
    # standardise first to keep the sum-based formula well conditioned
    x = (x - x.mean()) / (x.std() or 1.0)
    y = (y - y.mean()) / (y.std() or 1.0)
    full = signal.correlate(y, x, mode="full", method="fft")  # full[n-1+d] = sum x[i] y[i+d]
    cx, cy = np.concatenate(([0.0], np.cumsum(x))), np.concatenate(([0.0], np.cumsum(y)))
    cxx, cyy = np.concatenate(([0.0], np.cumsum(x * x))), np.concatenate(([0.0], np.cumsum(y * y)))
    lags = np.arange(-max_lag, max_lag + 1)
    m = n - np.abs(lags)
    xs = np.where(lags >= 0, 0, -lags)  # x segment start
    ys = np.where(lags >= 0, lags, 0)
    sx, sy = cx[xs + m] - cx[xs], cy[ys + m] - cy[ys]
    sxx, syy = cxx[xs + m] - cxx[xs], cyy[ys + m] - cyy[ys]
    sxy = full[n - 1 + lags]
    vx = sxx - sx * sx / m
    vy = syy - sy * sy / m
    with np.errstate(invalid="ignore", divide="ignore"):
        r = (sxy - sx * sy / m) / np.sqrt(vx * vy)
    eps = 1e-12 * m
    r[(vx <= eps) | (vy <= eps)] = np.nan
    return lags, np.clip(r, -1.0, 1.0)


def best_lag(lags: np.ndarray, r: np.ndarray) -> tuple[int, float]:
    if np.all(np.isnan(r)):
        raise ConstantSeries("no lag has a non-constant overlap")
    top = np.nanmax(r)
    ties = lags[r >= top - TIE_TOLERANCE]
    # smallest |lag| wins; a positive lag beats its negative twin
    lag = int(min(ties, key=lambda d: (abs(d), d < 0)))
    return lag, float(r[lags == lag][0])


def estimate_lag(pair: AlignedPair, max_lag_ms: float = MAX_LAG_MS) -> float:
    """Delay of y relative to x in ms (positive: y lags x)."""
    pearson(pair.x, pair.y)  # validates lengths and constancy
    max_lag = int(round(max_lag_ms / pair.dt_ms))
    lags, r = lagged_correlation(pair.x, pair.y, max_lag)
    lag, _ = best_lag(lags, r)
    return lag * pair.dt_ms


def shifted(pair: AlignedPair, lag_ms: float) -> AlignedPair:
    """Overlap of x[i] with y[i + lag]; undoes a delay of y by `lag_ms`."""
    d = int(round(lag_ms / pair.dt_ms))
    if d >= 0:
        return AlignedPair(pair.t_ms[: len(pair.t_ms) - d], pair.x[: len(pair.x) - d], pair.y[d:])
    return AlignedPair(pair.t_ms[-d:], pair.x[-d:], pair.y[: len(pair.y) + d])


def window_scores(
    pair: AlignedPair,
    window_ms: float = SECTION_WINDOW_MS,
    step_ms: float = SECTION_STEP_MS,
    max_lag_ms: float = MAX_LAG_MS,
) -> list[WindowScore]:
    """Lag-compensated r for each sliding window."""
    dt = pair.dt_ms
    w = int(round(window_ms / dt))
    step = int(round(step_ms / dt))
    max_lag = int(round(max_lag_ms / dt))
    scores = []
    for i in range(0, len(pair.x) - w + 1, step):
        xs, ys = pair.x[i: i + w], pair.y[i: i + w]
        if np.ptp(xs) == 0 or np.ptp(ys) == 0:
            lag, r = 0, float("nan")
        else:
            lags, rs = lagged_correlation(xs, ys, max_lag)
            try:
                lag, r = best_lag(lags, rs)
            except ConstantSeries:
                lag, r = 0, float("nan")
        scores.append(WindowScore(float(pair.t_ms[i]), float(pair.t_ms[i + w - 1]), lag * dt, r))
    return scores


def find_synchronized_section(
    pair: AlignedPair,
    window_ms: float = SECTION_WINDOW_MS,
    step_ms: float = SECTION_STEP_MS,
    threshold: float = SECTION_THRESHOLD,
    max_lag_ms: float = MAX_LAG_MS,
    scores: Optional[list[WindowScore]] = None,
) -> Optional[tuple[float, float]]:
    """Longest run of windows with lag-compensated r >= threshold.

    Each window's score is attributed to its centre, so the section spans the
    centres of the first and last qualifying windows; a run that includes the
    first (last) window extends to the start (end) of the trace.
    """
    if pair.t_ms[-1] - pair.t_ms[0] + pair.dt_ms < window_ms - 1e-6:
        raise TooShort(f"traces span less than {window_ms} ms")
    if scores is None:
        scores = window_scores(pair, window_ms, step_ms, max_lag_ms)
    ok = [not math.isnan(s.r) and s.r >= threshold for s in scores]
    best = None  # (length, first, last)
    i = 0
    while i < len(ok):
        if not ok[i]:
            i += 1
            continue
        j = i
        while j + 1 < len(ok) and ok[j + 1]:
            j += 1
        if best is None or j - i > best[0]:
            best = (j - i, i, j)
        i = j + 1
    if best is None:
        return None
    _, first, last = best
    centre = lambda s: 0.5 * (s.start_ms + s.end_ms)  # noqa: E731
    start = float(pair.t_ms[0]) if first == 0 else centre(scores[first])
    end = float(pair.t_ms[-1]) if last == len(scores) - 1 else centre(scores[last])
    return start, end


def analyze(
    pair: AlignedPair,
    tail_ms: Optional[float] = None,
    lag_compensated: bool = False,
    max_lag_ms: float = MAX_LAG_MS,
) -> tuple[SyncReport, list[WindowScore]]:
    """Full report: r (optionally over the final `tail_ms`), lag and section."""
    scored = pair.tail(tail_ms) if tail_ms is not None else pair
    lag = estimate_lag(scored, max_lag_ms)
    target = shifted(scored, lag) if lag_compensated else scored
    r = pearson(target.x, target.y)
    scores: list[WindowScore] = []
    section = None
    if pair.t_ms[-1] - pair.t_ms[0] + pair.dt_ms >= SECTION_WINDOW_MS - 1e-6:
        scores = window_scores(pair, max_lag_ms=max_lag_ms)
        section = find_synchronized_section(pair, scores=scores)
    extra = {
        "samples": int(len(scored.x)),
        "span_ms": [float(scored.t_ms[0]), float(scored.t_ms[-1])],
        "lag_compensated": lag_compensated,
    }
    return SyncReport(r, lag, section, extra), scores


def write_window_csv(fh: IO[str], scores: Sequence[WindowScore]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(("start_ms", "end_ms", "lag_ms", "r"))
    for s in scores:
        w.writerow([f"{s.start_ms:g}", f"{s.end_ms:g}", f"{s.lag_ms:g}", f"{s.r:.6f}"])
