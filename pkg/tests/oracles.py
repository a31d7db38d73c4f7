"""Independent reference computations used by the tests.

Nothing here imports the code under test except for plain data types.
"""

from __future__ import annotations

import math

import numpy as np


def sine_extrema(period_ms: float, duration_ms: float, step_ms: float = 10.0):
    """Brute-force local extrema of sin(2*pi*t/P) on the sample grid.

    Returns [(kind, t_ms)] with maxima as "ExpirationOnset" and minima as
    "InspirationOnset".
    """
    t = np.arange(0.0, duration_ms, step_ms)
    x = np.sin(2 * np.pi * t / period_ms)
    out = []
    for i in range(1, len(x) - 1):
        if x[i] > x[i - 1] and x[i] >= x[i + 1]:
            out.append(("ExpirationOnset", float(t[i])))
        elif x[i] < x[i - 1] and x[i] <= x[i + 1]:
            out.append(("InspirationOnset", float(t[i])))
    return out


def match_f1(detected, truth, window_ms: float = 300.0):
    """Greedy one-to-one matching of same-kind events within +-window_ms."""
    used = set()
    tp = 0
    for kind, t in detected:
        for i, (k2, t2) in enumerate(truth):
            if i not in used and k2 == kind and abs(t - t2) <= window_ms:
                used.add(i)
                tp += 1
                break
    precision = tp / len(detected) if detected else 0.0
    recall = tp / len(truth) if truth else 0.0
    if precision + recall == 0:
        return 0.0, tp
    return 2 * precision * recall / (precision + recall), tp


def sorted_percentile(values, q: float) -> float:
    """Linear-interpolation percentile computed by sorting."""
    xs = sorted(values)
    pos = q / 100.0 * (len(xs) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (pos - lo) * (xs[hi] - xs[lo])


def two_pass_pearson(x, y) -> float:
    n = len(x)
    mx = math.fsum(x) / n
    my = math.fsum(y) / n
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def brute_force_lag(x, y, max_lag: int, tie_tol: float = 1e-9) -> int:
    """Shift d maximising r(x[i], y[i+d]); ties go to the smallest |d|."""
    n = len(x)
    scores = {}
    for d in range(-max_lag, max_lag + 1):
        if d >= 0:
            a, b = x[: n - d], y[d:]
        else:
            a, b = x[-d:], y[: n + d]
        if len(a) < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
            continue
        scores[d] = float(np.corrcoef(a, b)[0, 1])
    top = max(scores.values())
    ties = [d for d, r in scores.items() if r >= top - tie_tol]
    return min(ties, key=lambda d: (abs(d), d < 0))


def routing_table(kind: str, members: dict, fanout_source=None):
    """Expected recipients per sender, enumerated straight from the rules."""
    table = {}
    for sender in members:
        if kind == "pair":
            rec = {m for m in members if m != sender}
        elif kind == "mesh":
            rec = {m for m in members if m != sender}
        else:
            rec = {m for m in members if m != sender} if members[sender] == fanout_source else set()
        table[sender] = rec
    return table
