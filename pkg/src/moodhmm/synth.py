"""Ground-truth synthetic weeks and participants drawn from the generative model.

Randomness comes from numpy's PCG64 bit generator seeded through
``SeedSequence([seed, week_index, stream])`` so every week is reproducible on
its own and across platforms.
"""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .features import FEATURE_NAMES, FeatureRow
from .ingest import (DEFAULT_EPS, DEFAULT_MISSING_THRESHOLD, MS_PER_DAY, MS_PER_MINUTE, QIDS_MAX,
                     EpochSeries, WeekRecord)
from .pipeline import FitConfig, process_week
from .tvhmm import (INACTIVE, N_STATES, PERIOD_HOURS, StatePath, TransitionCoeffs, TvHmmModel,
                    series_covariates, transition_matrices)

_STATES, _EMISSION, _MISSING, _LABEL = 0, 1, 2, 3
BURN_IN_OFFSET = 1_000_000


def circadian_model(
    persistence: float = 5.0,
    amplitude: float = 0.5,
    peak_hour: float = 3.0,
    means=(-5.7, -3.3),
    sd: float = 0.8,
) -> TvHmmModel:
    """Two-state model whose pull towards inactivity peaks at ``peak_hour``.

    ``persistence`` is the logit of staying in either state at the quiet
    point of the cycle; ``amplitude`` scales the 24-hour modulation.
    """
    w = 2.0 * np.pi * peak_hour / PERIOD_HOURS
    direction = amplitude * np.array([np.sin(w), np.cos(w)])
    c0 = np.array([[persistence, 0.0], [-persistence, 0.0]])
    c1 = np.zeros((N_STATES, N_STATES, 2))
    c1[0, 0] = direction
    c1[1, 0] = direction
    return TvHmmModel(np.full(N_STATES, 0.5), np.asarray(means, float), np.full(N_STATES, sd * sd),
                      TransitionCoeffs(c0, c1))


REFERENCE_MODEL = circadian_model()


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    n_weeks: int = 40
    epoch_minutes: int = 5
    models: tuple = (REFERENCE_MODEL,)
    regime_weeks: int = 1
    missing_rate: float = 0.0
    qids_weights: dict = field(default_factory=dict)
    intercept: float = 8.0
    noise_sigma: float = 1.0
    participant_id: str = "P01"
    start_date: dt.date = dt.date(2024, 1, 7)
    tz_offset_minutes: int = 0
    burn_in_weeks: int = 200
    fit: FitConfig = FitConfig()
    missing_threshold: float = DEFAULT_MISSING_THRESHOLD

    def __post_init__(self):
        if self.start_date.weekday() != 6:
            raise ValueError("start_date must be a Sunday")
        if not 0 <= self.missing_rate < 1:
            raise ValueError("missing_rate must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not self.models:
            raise ValueError("at least one model required")
        unknown = set(self.qids_weights) - set(FEATURE_NAMES)
        if unknown:
            raise ValueError(f"unknown feature weight(s): {sorted(unknown)}")

    @property
    def true_model(self) -> TvHmmModel:
        return self.models[0]

    def model_for(self, week_index: int) -> TvHmmModel:
        return self.models[(week_index // self.regime_weeks) % len(self.models)]

    def week_start_ms(self, week_index: int) -> int:
        days = (self.start_date - dt.date(1970, 1, 1)).days + 7 * week_index
        return days * MS_PER_DAY - self.tz_offset_minutes * MS_PER_MINUTE


def _rng(seed: int, week_index: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, week_index, stream])))


def simulate_week(spec: SynthSpec, week_index: int) -> tuple[EpochSeries, StatePath]:
    """Observations and the generating state path for one week."""
    return _simulate(spec, week_index, week_index)


def _simulate(spec: SynthSpec, week_index: int, seed_index: int):
    n = 7 * 24 * 60 // spec.epoch_minutes
    model = spec.model_for(week_index)
    blank = EpochSeries(spec.week_start_ms(week_index), spec.epoch_minutes, np.zeros(n), np.zeros(n, bool),
                        spec.tz_offset_minutes)
    A = transition_matrices(model.coeffs, series_covariates(blank))
    u = _rng(spec.seed, seed_index, _STATES).random(n)
    states = np.empty(n, dtype=np.int8)
    # inverse-CDF draws; two states so one comparison per step
    states[0] = INACTIVE if u[0] < model.pi[INACTIVE] else 1
    for t in range(1, n):
        states[t] = INACTIVE if u[t] < A[t, states[t - 1], INACTIVE] else 1
    z = _rng(spec.seed, seed_index, _EMISSION).standard_normal(n)
    values = model.means[states] + np.sqrt(model.variances[states]) * z
    missing = _rng(spec.seed, seed_index, _MISSING).random(n) < spec.missing_rate
    series = EpochSeries(blank.start_ms, spec.epoch_minutes, values, missing, spec.tz_offset_minutes)
    key = (spec.participant_id, blank.start_ms)
    return series, StatePath(states, week_key=key)


def _week_record(spec: SynthSpec, week_index: int, seed_index: int | None = None) -> WeekRecord:
    seed_index = week_index if seed_index is None else seed_index
    series, _ = _simulate(spec, week_index, seed_index)
    frac = float(series.missing.mean())
    return WeekRecord(spec.participant_id, series, None, frac, False, "unlabelled")


@dataclass
class PopulationStats:
    mean: dict
    std: dict


def population_stats(spec: SynthSpec) -> PopulationStats:
    """Feature means/stds over a burn-in simulation, for the weighted features only.

    Burn-in weeks draw from their own seed streams so they never coincide
    with a participant's weeks.
    """
    names = [k for k, w in spec.qids_weights.items() if w != 0]
    if not names:
        return PopulationStats({}, {})
    rows = []
    for k in range(spec.burn_in_weeks):
        week = _week_record(spec, k, BURN_IN_OFFSET + k)
        rows.append(process_week(week, spec.fit)[3])
    mean, std = {}, {}
    for name in names:
        vals = np.array([r.values[name] for r in rows])
        vals = vals[~np.isnan(vals)]
        mean[name] = float(vals.mean()) if len(vals) else 0.0
        sd = float(vals.std()) if len(vals) else 0.0
        std[name] = sd if sd > 0 else 1.0
    return PopulationStats(mean, std)


def _round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def qids_from_features(spec: SynthSpec, stats: PopulationStats, row: FeatureRow, week_index: int) -> int:
    score = spec.intercept
    for name, w in spec.qids_weights.items():
        if w == 0:
            continue
        v = row.values[name]
        z = 0.0 if math.isnan(v) else (v - stats.mean[name]) / stats.std[name]
        score += w * z
    if spec.noise_sigma > 0:
        score += spec.noise_sigma * _rng(spec.seed, week_index, _LABEL).standard_normal()
    return _round_half_away(min(max(score, 0.0), float(QIDS_MAX)))


def simulate_participant_rows(spec: SynthSpec, stats: PopulationStats | None = None):
    """Labelled weeks plus the feature rows the labels were generated from."""
    if stats is None:
        stats = population_stats(spec)
    weeks, rows = [], []
    for k in range(spec.n_weeks):
        week = _week_record(spec, k)
        row = process_week(week, spec.fit)[3]
        q = qids_from_features(spec, stats, row, k)
        eligible = week.missing_fraction < spec.missing_threshold
        week = replace(week, qids=q, eligible=eligible, reason="ok" if eligible else "too_much_missing")
        row.qids = q
        weeks.append(week)
        rows.append(row)
    return weeks, rows


def simulate_participant(spec: SynthSpec, stats: PopulationStats | None = None) -> list[WeekRecord]:
    return simulate_participant_rows(spec, stats)[0]


# -- file emission -----------------------------------------------------------------

SQRT3 = math.sqrt(3.0)
MAX_SD = SQRT3  # per-axis device range 2 g along the diagonal gives |m| <= 2*sqrt(3)


def epoch_samples(series: EpochSeries, eps: float = DEFAULT_EPS) -> tuple[np.ndarray, np.ndarray, int]:
    """Two samples per observed epoch whose magnitude sd reproduces the value.

    Magnitudes ``c +/- s`` along the (1,1,1) diagonal have population sd ``s``;
    values outside the representable range are clamped and counted.
    """
    obs = np.flatnonzero(~series.missing)
    s = np.exp(series.values[obs]) - eps
    clamped = int(np.sum((s < 0) | (s > MAX_SD)))
    s = np.clip(s, 0.0, MAX_SD)
    centre = np.maximum(1.0, s)
    starts = series.start_ms + obs.astype(np.int64) * series.epoch_ms
    ts = np.column_stack([starts, starts + series.epoch_ms // 2]).ravel()
    mags = np.column_stack([centre + s, centre - s]).ravel()
    return ts, mags / SQRT3, clamped


def write_accel_csv(path, weeks: list[WeekRecord], eps: float = DEFAULT_EPS) -> int:
    """Write one participant's weeks; returns the number of clamped epochs."""
    chunks, clamped = [], 0
    for week in sorted(weeks, key=lambda w: w.week_start_ms):
        ts, axis, c = epoch_samples(week.series, eps)
        clamped += c
        chunks.append((ts, axis))
    ts = np.concatenate([c[0] for c in chunks]) if chunks else np.zeros(0, np.int64)
    axis = np.concatenate([c[1] for c in chunks]) if chunks else np.zeros(0)
    with open(path, "w", newline="") as fh:
        fh.write("timestamp_ms,ax_g,ay_g,az_g\n")
        for t, a in zip(ts.tolist(), axis.tolist()):
            r = repr(a)
            fh.write(f"{t},{r},{r},{r}\n")
    return clamped


def label_rows(weeks: list[WeekRecord], weekday_offset: int = 3) -> list[tuple[str, str, int]]:
    out = []
    for week in weeks:
        if week.qids is None:
            continue
        date = week.week_start.date() + dt.timedelta(days=weekday_offset)
        out.append((week.participant_id, date.isoformat(), int(week.qids)))
    return out


def write_labels_csv(path, weeks: list[WeekRecord]) -> None:
    rows = sorted(label_rows(weeks))
    with open(path, "w", newline="") as fh:
        fh.write("participant_id,date,qids\n")
        for pid, date, q in rows:
            fh.write(f"{pid},{date},{q}\n")
