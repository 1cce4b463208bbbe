"""Weekly features computed from the activity series and the fitted model.

Unavailable features are NaN here; they are imputed at regression time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .ingest import EpochSeries, WeekRecord
from .tvhmm import INACTIVE, DailyProfile, StatePath, TvHmmModel

TRADITIONAL = ("L5", "L5_time", "M10", "M10_time", "relative_amplitude")
VITERBI = tuple(
    f"{q}_{s}"
    for q in ("sleep_duration", "sleep_onset", "sleep_offset", "inactive_bouts")
    for s in ("mean", "std")
)
PROFILE = (
    "inactive_duration",
    "inactive_onset",
    "inactive_offset",
    "inactive_area",
    "max_p_inactive",
    "max_p_inactive_time",
    "max_p_active",
    "max_p_active_time",
    "rhythm_index",
)
FEATURE_NAMES = TRADITIONAL + VITERBI + PROFILE
TIME_FEATURES = ("L5_time", "M10_time", "inactive_onset", "inactive_offset",
                 "max_p_inactive_time", "max_p_active_time")

NAN = float("nan")


@dataclass
class FeatureRow:
    participant_id: str
    week_start_ms: int
    week_start: str  # local ISO date-time of the Sunday midnight
    qids: int | None
    values: dict = field(default_factory=dict)
    skipped_windows: int = 0

    def as_array(self) -> np.ndarray:
        return np.array([self.values[name] for name in FEATURE_NAMES], dtype=float)

    def available(self) -> dict:
        return {name: not math.isnan(self.values[name]) for name in FEATURE_NAMES}


# -- traditional measures ---------------------------------------------------

def day_curve(series: EpochSeries) -> np.ndarray:
    """Mean activity per clock slot across days, NaN where never observed."""
    g = series.epochs_per_day
    slots = (series.start_slot + np.arange(len(series))) % g
    obs = ~series.missing
    activity = np.exp(series.values[obs])
    counts = np.bincount(slots[obs], minlength=g)
    sums = np.bincount(slots[obs], weights=activity, minlength=g)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


def _window_means(curve: np.ndarray, width: int) -> np.ndarray:
    doubled = np.concatenate([curve, curve[: width - 1]])
    return sliding_window_view(doubled, width).mean(axis=1)


def traditional_features(series: EpochSeries) -> dict:
    """L5, M10 (circular windows on the day-averaged curve) and relative amplitude.

    Computed on the non-negative activity scale ``exp(value) = eps + sd``.
    """
    curve = day_curve(series)
    if np.any(np.isnan(curve)):
        return {name: NAN for name in TRADITIONAL}
    step_h = series.epoch_minutes / 60.0
    l5_means = _window_means(curve, int(round(5 / step_h)))
    m10_means = _window_means(curve, int(round(10 / step_h)))
    i5 = int(np.argmin(l5_means))
    i10 = int(np.argmax(m10_means))
    l5, m10 = float(l5_means[i5]), float(m10_means[i10])
    ra = 0.0 if m10 + l5 == 0 else (m10 - l5) / (m10 + l5)
    return {
        "L5": l5,
        "L5_time": i5 * step_h,
        "M10": m10,
        "M10_time": i10 * step_h,
        "relative_amplitude": ra,
    }


# -- Viterbi sleep measures ---------------------------------------------------

def noon_windows(n_epochs: int, epochs_per_day: int, start_slot: int = 0) -> list[tuple[int, int, int]]:
    """(start, stop, nominal_noon) of each noon-to-noon window.

    A window ends at every noon inside the span; the first one is cut at the
    series start and the tail after the last noon is left out.
    """
    half = epochs_per_day // 2
    first_noon = (half - start_slot) % epochs_per_day
    out = []
    noon = first_noon
    while noon <= n_epochs:
        if noon > 0:
            out.append((max(noon - epochs_per_day, 0), noon, noon - epochs_per_day))
        noon += epochs_per_day
    return out


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Half-open [start, stop) runs of True values."""
    if not mask.any():
        return []
    padded = np.concatenate([[False], mask, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return list(zip(edges[::2], edges[1::2]))


def viterbi_features(path, epoch_minutes: int = 5, start_slot: int = 0) -> tuple[dict, int]:
    """Mean and population std over noon-to-noon windows of the longest
    inactive run (duration, onset, offset in hours since noon) and of the
    number of entries into the inactive state.

    Returns the features and the number of windows skipped for having no
    inactive epoch.
    """
    states = np.asarray(getattr(path, "states", path))
    epd = 24 * 60 // epoch_minutes
    step_h = epoch_minutes / 60.0
    inactive = states == INACTIVE
    entered = inactive.copy()
    entered[1:] &= ~inactive[:-1]

    per_window = []
    skipped = 0
    for start, stop, noon in noon_windows(len(states), epd, start_slot):
        runs = _runs(inactive[start:stop])
        if not runs:
            skipped += 1
            continue
        a, b = max(runs, key=lambda r: (r[1] - r[0], -r[0]))
        onset = (start + a - noon) * step_h
        duration = (b - a) * step_h
        per_window.append((duration, onset, onset + duration, float(entered[start:stop].sum())))

    if not per_window:
        return {name: NAN for name in VITERBI}, skipped
    arr = np.array(per_window)
    means, stds = arr.mean(axis=0), arr.std(axis=0)
    out = {}
    for k, q in enumerate(("sleep_duration", "sleep_onset", "sleep_offset", "inactive_bouts")):
        out[f"{q}_mean"] = float(means[k])
        out[f"{q}_std"] = float(stds[k])
    return out, skipped


# -- profile measures ------------------------------------------------------------

def _peak(values: np.ndarray, times: np.ndarray, step: float) -> tuple[float, float]:
    """Maximum (first occurrence) with parabolic refinement through the
    circular neighbours.

    A two-point tie is a peak midway between grid points and is refined;
    wider plateaus (step-shaped profiles) are reported as sampled.
    """
    n = len(values)
    k = int(np.argmax(values))
    y0 = values[k]
    ym, yp = values[k - 1], values[(k + 1) % n]
    curv = ym - 2.0 * y0 + yp
    left_ok = ym < y0 or values[k - 2] < y0
    right_ok = yp < y0 or values[(k + 2) % n] < y0
    if curv < 0 and left_ok and right_ok and not (ym == y0 and yp == y0):
        delta = 0.5 * (ym - yp) / curv
        peak = y0 - 0.25 * (ym - yp) * delta
        return float(min(max(peak, 0.0), 1.0)), float((times[k] + delta * step) % 24.0)
    return float(y0), float(times[k] % 24.0)


def inactive_regions(profile: DailyProfile) -> list[tuple[float, float, float]]:
    """(onset, offset, area) of each circular run with p_inactive > 0.5.

    Crossing times are linearly interpolated between grid points. Each grid
    point stands for its epoch cell, so the area integrates the cell values
    between the two crossings. Offsets are unwrapped (may exceed 24).
    """
    p = np.asarray(profile.p_inactive, dtype=float)
    n = len(p)
    h = profile.step_hours
    t = profile.clock_hours()
    above = p > 0.5
    if above.all() or not above.any():
        return []
    out = []
    for a in np.flatnonzero(above & ~np.roll(above, 1)):
        b = a
        while above[(b + 1) % n]:
            b += 1
        prev, first = p[a - 1], p[a]
        onset = t[a] - h + (0.5 - prev) / (first - prev) * h
        last, nxt = p[b % n], p[(b + 1) % n]
        t_last = t[a] + (b - a) * h
        offset = t_last + (0.5 - last) / (nxt - last) * h
        idx = np.arange(a, b + 1) % n
        vals = p[idx]
        area = vals.sum() * h
        # a crossing can sit inside the neighbouring cell or inside the edge cell
        head = onset - (t[a] - 0.5 * h)
        area -= (first if head >= 0 else prev) * head
        tail = (t_last + 0.5 * h) - offset
        area -= (last if tail >= 0 else nxt) * tail
        out.append((onset, offset, area))
    return out


def profile_features(profile: DailyProfile) -> dict:
    p = np.asarray(profile.p_inactive, dtype=float)
    t = profile.clock_hours()
    h = profile.step_hours
    max_in, max_in_t = _peak(p, t, h)
    max_act, max_act_t = _peak(1.0 - p, t, h)
    out = {
        "max_p_inactive": max_in,
        "max_p_inactive_time": max_in_t,
        "max_p_active": max_act,
        "max_p_active_time": max_act_t,
        "rhythm_index": float(min(max(max_in + max_act - 1.0, 0.0), 1.0)),
    }
    regions = inactive_regions(profile)
    if regions:
        lengths = [off - on for on, off, _ in regions]
        k = int(np.argmax(lengths))
        out["inactive_duration"] = float(sum(lengths))
        out["inactive_onset"] = float(regions[k][0] % 24.0)
        out["inactive_offset"] = float(regions[k][1] % 24.0)
        out["inactive_area"] = float(sum(r[2] for r in regions))
    elif np.all(p > 0.5):
        out["inactive_duration"] = 24.0
        out["inactive_onset"] = NAN
        out["inactive_offset"] = NAN
        out["inactive_area"] = float(p.sum() * h)
    else:
        for name in ("inactive_duration", "inactive_onset", "inactive_offset", "inactive_area"):
            out[name] = NAN
    return {name: out[name] for name in PROFILE}


# -- assembly ------------------------------------------------------------------

def assemble_feature_row(
    week: WeekRecord,
    model: TvHmmModel | None,
    path: StatePath,
    profile: DailyProfile,
) -> FeatureRow:
    key = week.key
    for name, obj in (("path", path), ("profile", profile)):
        other = getattr(obj, "week_key", None)
        if other is not None and tuple(other) != key:
            raise ValueError(f"{name} belongs to week {other}, not {key}")
    if model is not None and "week_key" in model.meta and tuple(model.meta["week_key"]) != key:
        raise ValueError(f"model belongs to week {model.meta['week_key']}, not {key}")
    if len(path.states) != len(week.series):
        raise ValueError("state path and week differ in length")
    values = traditional_features(week.series)
    vit, skipped = viterbi_features(path, week.series.epoch_minutes, week.series.start_slot)
    values.update(vit)
    values.update(profile_features(profile))
    return FeatureRow(
        week.participant_id,
        week.week_start_ms,
        week.week_start.isoformat(),
        week.qids,
        {name: values[name] for name in FEATURE_NAMES},
        skipped,
    )
