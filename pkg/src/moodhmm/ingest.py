"""Raw accelerometer files to labelled week-long epoch series."""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

MS_PER_MINUTE = 60_000
MS_PER_DAY = 86_400_000
DEVICE_RANGE_G = 2.0
DEFAULT_EPOCH_MINUTES = 5
DEFAULT_EPS = 1e-4
DEFAULT_MISSING_THRESHOLD = 0.2
QIDS_MAX = 27

ACCEL_COLUMNS = ("timestamp_ms", "ax_g", "ay_g", "az_g")
LABEL_COLUMNS = ("participant_id", "date", "qids")

_EPOCH = dt.datetime(1970, 1, 1)


class InputValidationError(ValueError):
    """Malformed input file; maps to CLI exit code 2."""


@dataclass
class IngestReport:
    clamped_samples: int = 0
    rejected_rows: int = 0
    weeks_produced: int = 0
    weeks_eligible: int = 0
    participants: dict = field(default_factory=dict)

    def merge(self, other: "IngestReport", participant_id: str | None = None) -> None:
        self.clamped_samples += other.clamped_samples
        self.rejected_rows += other.rejected_rows
        self.weeks_produced += other.weeks_produced
        self.weeks_eligible += other.weeks_eligible
        if participant_id is not None:
            self.participants[participant_id] = other.to_dict()

    def to_dict(self) -> dict:
        out = {
            "clamped_samples": self.clamped_samples,
            "rejected_rows": self.rejected_rows,
            "weeks_produced": self.weeks_produced,
            "weeks_eligible": self.weeks_eligible,
        }
        if self.participants:
            out["participants"] = {k: self.participants[k] for k in sorted(self.participants)}
        return out


@dataclass
class RawSamples:
    """Column-wise tri-axial samples, timestamps in UTC milliseconds."""

    timestamp_ms: np.ndarray
    ax: np.ndarray
    ay: np.ndarray
    az: np.ndarray

    def __len__(self) -> int:
        return len(self.timestamp_ms)


@dataclass
class EpochSeries:
    start_ms: int
    epoch_minutes: int
    values: np.ndarray
    missing: np.ndarray
    tz_offset_minutes: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.missing = np.asarray(self.missing, dtype=bool)
        if self.values.shape != self.missing.shape:
            raise ValueError("values and missing mask differ in length")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def epoch_ms(self) -> int:
        return self.epoch_minutes * MS_PER_MINUTE

    @property
    def epochs_per_day(self) -> int:
        return 24 * 60 // self.epoch_minutes

    @property
    def local_start(self) -> dt.datetime:
        return _EPOCH + dt.timedelta(milliseconds=self.start_ms + self.tz_offset_minutes * MS_PER_MINUTE)

    @property
    def start_slot(self) -> int:
        """Index of the first epoch within the local day grid."""
        local = self.start_ms + self.tz_offset_minutes * MS_PER_MINUTE
        return int((local % MS_PER_DAY) // self.epoch_ms)

    def clock_hours(self) -> np.ndarray:
        """Local clock hour at each epoch midpoint."""
        local = self.start_ms + self.tz_offset_minutes * MS_PER_MINUTE
        mid = local + (np.arange(len(self)) + 0.5) * self.epoch_ms
        return np.mod(mid / 3_600_000.0, 24.0)

    def observed(self) -> np.ndarray:
        return self.values[~self.missing]


@dataclass
class WeekRecord:
    participant_id: str
    series: EpochSeries
    qids: int | None = None
    missing_fraction: float = 0.0
    eligible: bool = False
    reason: str = "unlabelled"

    @property
    def week_start_ms(self) -> int:
        return self.series.start_ms

    @property
    def week_start(self) -> dt.datetime:
        return self.series.local_start

    @property
    def key(self) -> tuple[str, int]:
        return (self.participant_id, self.series.start_ms)

    @property
    def local_dates(self) -> tuple[dt.date, dt.date]:
        first = self.week_start.date()
        return first, first + dt.timedelta(days=6)


@dataclass(frozen=True)
class LabelPoint:
    participant_id: str
    date: dt.date
    qids: int

    def __post_init__(self):
        if not 0 <= self.qids <= QIDS_MAX:
            raise ValueError(f"qids {self.qids} outside [0, {QIDS_MAX}]")


def magnitude(ax, ay, az):
    """Total acceleration sqrt(ax^2 + ay^2 + az^2), elementwise."""
    ax = np.asarray(ax, dtype=float)
    ay = np.asarray(ay, dtype=float)
    az = np.asarray(az, dtype=float)
    if not (np.all(np.isfinite(ax)) and np.all(np.isfinite(ay)) and np.all(np.isfinite(az))):
        raise ValueError("non-finite acceleration")
    return np.sqrt(ax * ax + ay * ay + az * az)


def clean_samples(samples: RawSamples) -> tuple[RawSamples, IngestReport]:
    """Drop non-finite or out-of-order rows and clamp to the device range."""
    report = IngestReport()
    ts = np.asarray(samples.timestamp_ms, dtype=float)
    axes = np.vstack([samples.ax, samples.ay, samples.az]).astype(float)
    ok = np.isfinite(ts) & np.all(np.isfinite(axes), axis=0)
    # keep only rows that advance time strictly
    keep = np.zeros(len(ts), dtype=bool)
    ok_idx = np.flatnonzero(ok)
    if len(ok_idx):
        t_ok = ts[ok_idx]
        prev_max = np.concatenate([[-np.inf], np.maximum.accumulate(t_ok)[:-1]])
        keep[ok_idx[t_ok > prev_max]] = True
    report.rejected_rows = int(len(ts) - keep.sum())
    axes = axes[:, keep]
    over = np.abs(axes) > DEVICE_RANGE_G
    report.clamped_samples = int(np.any(over, axis=0).sum())
    axes = np.clip(axes, -DEVICE_RANGE_G, DEVICE_RANGE_G)
    cleaned = RawSamples(ts[keep].astype(np.int64), axes[0], axes[1], axes[2])
    return cleaned, report


def epoch_aggregate(
    samples: RawSamples,
    epoch_minutes: int = DEFAULT_EPOCH_MINUTES,
    eps: float = DEFAULT_EPS,
    *,
    start_ms: int | None = None,
    end_ms: int | None = None,
    tz_offset_minutes: int = 0,
    min_samples: int = 1,
) -> EpochSeries:
    """Per-epoch ln(eps + sd of total magnitude) on a local-time aligned grid.

    The span defaults to the local days covered by the samples, so a recording
    that stops mid-epoch still yields whole days. ``start_ms``/``end_ms`` pin
    the span explicitly (both are floored to the epoch grid).
    """
    if 60 % epoch_minutes != 0:
        raise ValueError("epoch_minutes must divide 60")
    if eps <= 0:
        raise ValueError("eps must be positive")
    epoch_ms = epoch_minutes * MS_PER_MINUTE
    offset_ms = tz_offset_minutes * MS_PER_MINUTE
    ts = np.asarray(samples.timestamp_ms, dtype=np.int64)

    if start_ms is None or end_ms is None:
        if len(ts) == 0:
            raise ValueError("empty input needs an explicit span")
        local_first = int(ts[0]) + offset_ms
        local_last = int(ts[-1]) + offset_ms
        if start_ms is None:
            start_ms = (local_first // MS_PER_DAY) * MS_PER_DAY - offset_ms
        if end_ms is None:
            end_ms = (local_last // MS_PER_DAY + 1) * MS_PER_DAY - offset_ms
    start_local = ((start_ms + offset_ms) // epoch_ms) * epoch_ms
    end_local = -((-(end_ms + offset_ms)) // epoch_ms) * epoch_ms
    n = max(int((end_local - start_local) // epoch_ms), 0)
    start_ms = start_local - offset_ms

    values = np.zeros(n)
    missing = np.ones(n, dtype=bool)
    if len(ts) and n:
        idx = (ts + offset_ms - start_local) // epoch_ms
        inside = (idx >= 0) & (idx < n)
        idx = idx[inside]
        mag = magnitude(samples.ax[inside], samples.ay[inside], samples.az[inside])
        counts = np.bincount(idx, minlength=n)
        has = counts > 0
        means = np.bincount(idx, weights=mag, minlength=n)
        means[has] /= counts[has]
        # two-pass variance: avoids cancellation around the 1 g baseline
        dev = mag - means[idx]
        var = np.bincount(idx, weights=dev * dev, minlength=n)
        var[has] /= counts[has]
        sd = np.sqrt(var)
        ok = counts >= max(min_samples, 1)
        values[ok] = np.log(eps + sd[ok])
        missing = ~ok
    return EpochSeries(int(start_ms), epoch_minutes, values, missing, tz_offset_minutes)


def week_segment(series: EpochSeries, participant_id: str = "") -> list[WeekRecord]:
    """Cut a series into complete local Sunday-to-Sunday weeks."""
    epd = series.epochs_per_day
    per_week = 7 * epd
    local = series.local_start
    if (local - local.replace(hour=0, minute=0, second=0, microsecond=0)).total_seconds() % (
        series.epoch_minutes * 60
    ):
        raise ValueError("series is not aligned to the epoch grid")
    slot = series.start_slot
    # python weekday: Monday=0 ... Sunday=6
    days_to_sunday = (6 - local.weekday()) % 7
    first = days_to_sunday * epd - slot
    if first < 0:
        first += per_week
    weeks = []
    pos = first
    while pos + per_week <= len(series):
        sub = EpochSeries(
            series.start_ms + pos * series.epoch_ms,
            series.epoch_minutes,
            series.values[pos:pos + per_week].copy(),
            series.missing[pos:pos + per_week].copy(),
            series.tz_offset_minutes,
        )
        frac = float(sub.missing.sum()) / per_week
        weeks.append(WeekRecord(participant_id, sub, None, frac, False, "unlabelled"))
        pos += per_week
    return weeks


def _round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def label_for_week(week: WeekRecord, labels: Sequence[LabelPoint], max_gap_days: int = 7) -> int | None:
    first, last = week.local_dates
    own = [lp for lp in labels if lp.participant_id == week.participant_id]
    inside = [lp for lp in own if first <= lp.date <= last]
    if inside:
        return max(inside, key=lambda lp: lp.date).qids
    before = [lp for lp in own if lp.date < first]
    after = [lp for lp in own if lp.date > last]
    if not before or not after:
        return None
    lo = max(before, key=lambda lp: lp.date)
    hi = min(after, key=lambda lp: lp.date)
    gap = min((first - lo.date).days, (hi.date - last).days)
    if gap > max_gap_days:
        return None
    # interpolate on calendar time at the middle of the week
    mid = dt.datetime.combine(first, dt.time()) + dt.timedelta(days=3.5)
    t_lo = dt.datetime.combine(lo.date, dt.time())
    t_hi = dt.datetime.combine(hi.date, dt.time())
    frac = (mid - t_lo) / (t_hi - t_lo)
    return _round_half_away(lo.qids + frac * (hi.qids - lo.qids))


def attach_labels(
    weeks: Iterable[WeekRecord],
    labels: Sequence[LabelPoint],
    missing_threshold: float = DEFAULT_MISSING_THRESHOLD,
) -> list[WeekRecord]:
    """Assign QIDS to each week and evaluate eligibility.

    In-week questionnaires win (latest date first); otherwise the two
    neighbouring questionnaires are interpolated when the nearer one is within
    a week of the span.
    """
    labels = sorted(labels, key=lambda lp: (lp.participant_id, lp.date))
    out = []
    for week in weeks:
        q = label_for_week(week, labels)
        if q is None:
            eligible, reason = False, "unlabelled"
        elif week.missing_fraction >= missing_threshold:
            eligible, reason = False, "too_much_missing"
        else:
            eligible, reason = True, "ok"
        out.append(replace(week, qids=q, eligible=eligible, reason=reason))
    return out


# -- file readers ---------------------------------------------------------

def _check_header(columns, expected, path) -> None:
    cols = [c.strip() for c in columns]
    if tuple(cols) != tuple(expected):
        bad = [e for e in expected if e not in cols]
        extra = [c for c in cols if c not in expected]
        detail = []
        if bad:
            detail.append("missing column(s): " + ", ".join(bad))
        if extra:
            detail.append("unexpected column(s): " + ", ".join(extra))
        if not detail:
            detail.append("columns out of order")
        raise InputValidationError(f"{path}: bad header ({'; '.join(detail)}); expected {','.join(expected)}")


_NONFINITE = {"nan", "inf", "+inf", "-inf", "infinity", "-infinity", "+infinity"}


def read_accel_csv(path) -> tuple[RawSamples, IngestReport]:
    """Read one participant's accelerometer CSV.

    Unparseable text raises InputValidationError with the 1-based file line;
    ``nan``/``inf`` cells and non-increasing timestamps are rejected and
    counted instead.
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise InputValidationError(f"{path}: empty file") from None
    except pd.errors.ParserError as exc:
        raise InputValidationError(f"{path}: {exc}") from None
    _check_header(frame.columns, ACCEL_COLUMNS, path)
    parsed = {}
    for col in ACCEL_COLUMNS:
        raw = frame[col].str.strip()
        num = pd.to_numeric(raw, errors="coerce")
        bad = num.isna() & ~raw.str.lower().isin(_NONFINITE)
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise InputValidationError(
                f"{path}: line {row + 2}: column {col}: cannot parse {frame[col].iloc[row]!r}"
            )
        parsed[col] = num.to_numpy(dtype=float)
    raw_samples = RawSamples(parsed["timestamp_ms"], parsed["ax_g"], parsed["ay_g"], parsed["az_g"])
    return clean_samples(raw_samples)


def read_labels_csv(path) -> list[LabelPoint]:
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise InputValidationError(f"{path}: empty file") from None
    _check_header(frame.columns, LABEL_COLUMNS, path)
    labels = []
    seen = set()
    for row, rec in enumerate(frame.itertuples(index=False), start=2):
        pid, date_s, q_s = (str(v).strip() for v in rec)
        try:
            date = dt.date.fromisoformat(date_s)
        except ValueError:
            raise InputValidationError(f"{path}: line {row}: column date: bad ISO date {date_s!r}") from None
        try:
            q = int(q_s)
        except ValueError:
            raise InputValidationError(f"{path}: line {row}: column qids: not an integer {q_s!r}") from None
        if not 0 <= q <= QIDS_MAX:
            raise InputValidationError(f"{path}: line {row}: column qids: {q} outside [0, {QIDS_MAX}]")
        if (pid, date) in seen:
            raise InputValidationError(f"{path}: line {row}: duplicate label for {pid} on {date}")
        seen.add((pid, date))
        labels.append(LabelPoint(pid, date, q))
    return labels


def ingest_participant(
    accel_path,
    labels: Sequence[LabelPoint],
    participant_id: str | None = None,
    *,
    epoch_minutes: int = DEFAULT_EPOCH_MINUTES,
    eps: float = DEFAULT_EPS,
    tz_offset_minutes: int = 0,
    missing_threshold: float = DEFAULT_MISSING_THRESHOLD,
) -> tuple[list[WeekRecord], IngestReport]:
    accel_path = Path(accel_path)
    pid = participant_id or accel_path.stem
    samples, report = read_accel_csv(accel_path)
    if len(samples) == 0:
        return [], report
    series = epoch_aggregate(samples, epoch_minutes, eps, tz_offset_minutes=tz_offset_minutes)
    weeks = attach_labels(week_segment(series, pid), labels, missing_threshold)
    report.weeks_produced = len(weeks)
    report.weeks_eligible = sum(w.eligible for w in weeks)
    return weeks, report
