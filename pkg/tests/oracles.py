"""Reference implementations used as test oracles, written independently of the package."""

import itertools

import numpy as np
from scipy.stats import norm

from moodhmm.ingest import EpochSeries
from moodhmm.tvhmm import TransitionCoeffs, TvHmmModel


def softmax_rows(z):
    """Plain softmax over the last axis, written separately from the package."""
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def oracle_transitions(coeffs, clock_hours):
    w = 2 * np.pi * np.asarray(clock_hours) / 24.0
    out = []
    for s, c in zip(np.sin(w), np.cos(w)):
        z = coeffs.c0 + coeffs.c1[..., 0] * s + coeffs.c1[..., 1] * c
        out.append(softmax_rows(z))
    return np.array(out)


def enumerate_paths(series, model):
    """Log joint probability of every state path, by brute force."""
    T = len(series)
    A = oracle_transitions(model.coeffs, series.clock_hours())
    sd = np.sqrt(model.variances)
    logb = np.zeros((T, 2))
    for t in range(T):
        if not series.missing[t]:
            logb[t] = norm.logpdf(series.values[t], model.means, sd)
    paths, scores = [], []
    for path in itertools.product((0, 1), repeat=T):
        s = np.log(model.pi[path[0]]) + logb[0, path[0]]
        for t in range(1, T):
            s += np.log(A[t, path[t - 1], path[t]]) + logb[t, path[t]]
        paths.append(path)
        scores.append(s)
    return paths, np.array(scores)


def random_model(rng, scale=1.5):
    pi = rng.dirichlet([1.0, 1.0])
    pi = pi / pi.sum()
    means = np.sort(rng.normal(0, 2, 2))
    variances = rng.uniform(0.2, 2.0, 2)
    c0 = np.zeros((2, 2))
    c1 = np.zeros((2, 2, 2))
    c0[:, 0] = rng.normal(0, scale, 2)
    c1[:, 0] = rng.normal(0, scale, (2, 2))
    return TvHmmModel(pi, means, variances, TransitionCoeffs(c0, c1))


def random_series(rng, T, epoch_minutes=5, missing_rate=0.2, start_ms=None):
    if start_ms is None:
        start_ms = int(rng.integers(0, 288)) * epoch_minutes * 60_000
    values = rng.normal(0, 2, T)
    missing = rng.random(T) < missing_rate
    return EpochSeries(start_ms, epoch_minutes, values, missing)


def series_from_values(values, start_ms=0, epoch_minutes=5, missing=None):
    values = np.asarray(values, float)
    if missing is None:
        missing = np.zeros(len(values), bool)
    return EpochSeries(start_ms, epoch_minutes, values, missing)


def rle_oracle(states, epoch_minutes=5, start_slot=0):
    """Run-length scan of noon-to-noon windows written from the clock-time definition."""
    step = epoch_minutes / 60
    n = len(states)
    end_h = (start_slot + n) * step
    out = []
    skipped = 0
    d = 0
    while 12 + 24 * d <= end_h:
        lo_h, hi_h = 12 + 24 * (d - 1), 12 + 24 * d
        idx = [t for t in range(n) if lo_h <= (start_slot + t) * step < hi_h]
        d += 1
        if not idx:
            continue
        runs, entries, cur = [], 0, None
        for t in idx:
            if states[t] == 0:
                if t == 0 or states[t - 1] != 0:
                    entries += 1
                if cur is None:
                    cur = [t, t]
                else:
                    cur[1] = t
            elif cur is not None:
                runs.append(cur)
                cur = None
        if cur is not None:
            runs.append(cur)
        if not runs:
            skipped += 1
            continue
        best = runs[0]
        for r in runs[1:]:
            if r[1] - r[0] > best[1] - best[0]:
                best = r
        onset = (start_slot + best[0]) * step - lo_h
        dur = (best[1] - best[0] + 1) * step
        out.append((dur, onset, onset + dur, entries))
    return out, skipped
