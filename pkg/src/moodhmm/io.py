"""On-disk formats: weeks JSON, model JSON, profile/feature/prediction CSVs.

Floats are written with ``repr`` so every file round-trips exactly and two
runs with the same inputs produce byte-identical output.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import math
import re
from pathlib import Path

import numpy as np

from .features import FEATURE_NAMES, FeatureRow
from .ingest import EpochSeries, InputValidationError, WeekRecord
from .tvhmm import DailyProfile, TransitionCoeffs, TvHmmModel

_SAFE_ID = re.compile(r"^[A-Za-z0-9_.-]+$")
NA = "NA"


def check_participant_id(pid: str) -> str:
    if not _SAFE_ID.match(pid):
        raise InputValidationError(f"participant id {pid!r} must match [A-Za-z0-9_.-]+")
    return pid


def dump_json(obj, path) -> None:
    text = json.dumps(obj, sort_keys=True, indent=2, allow_nan=False)
    Path(path).write_text(text + "\n")


def load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InputValidationError(f"{path}: line {exc.lineno}: {exc.msg}") from None


def _num(x: float) -> str:
    return NA if x is None or math.isnan(x) else repr(float(x))


def _jsonable(x):
    """NaN/inf to None, numpy scalars to Python."""
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return float(x) if math.isfinite(x) else None
    return x


# -- weeks ---------------------------------------------------------------------

def week_to_dict(week: WeekRecord) -> dict:
    s = week.series
    values = [None if m else float(v) for v, m in zip(s.values.tolist(), s.missing.tolist())]
    return {
        "participant_id": week.participant_id,
        "week_start": week.week_start.isoformat(),
        "start_ms": int(s.start_ms),
        "epoch_minutes": int(s.epoch_minutes),
        "tz_offset_minutes": int(s.tz_offset_minutes),
        "qids": week.qids,
        "missing_fraction": float(week.missing_fraction),
        "eligible": bool(week.eligible),
        "reason": week.reason,
        "values": values,
    }


def week_from_dict(d: dict) -> WeekRecord:
    try:
        raw = d["values"]
        missing = np.array([v is None for v in raw], dtype=bool)
        values = np.array([np.nan if v is None else v for v in raw], dtype=float)
        series = EpochSeries(int(d["start_ms"]), int(d["epoch_minutes"]), values, missing,
                             int(d["tz_offset_minutes"]))
        return WeekRecord(d["participant_id"], series, d["qids"], float(d["missing_fraction"]),
                          bool(d["eligible"]), d["reason"])
    except (KeyError, TypeError, ValueError) as exc:
        raise InputValidationError(f"malformed week record: {exc}") from None


def sort_weeks(weeks):
    return sorted(weeks, key=lambda w: w.key)


def save_weeks(path, weeks: list[WeekRecord], report: dict | None = None) -> None:
    doc = {"weeks": [week_to_dict(w) for w in sort_weeks(weeks)]}
    if report is not None:
        doc["report"] = report
    dump_json(doc, path)


def load_weeks(path) -> list[WeekRecord]:
    doc = load_json(path)
    if not isinstance(doc, dict) or "weeks" not in doc:
        raise InputValidationError(f"{path}: missing 'weeks' list")
    return [week_from_dict(d) for d in doc["weeks"]]


def week_stem(week: WeekRecord) -> str:
    return f"{week.participant_id}_{week.week_start.date().isoformat()}"


# -- models and profiles -------------------------------------------------------------

def model_to_dict(model: TvHmmModel) -> dict:
    return _jsonable({
        "pi": model.pi,
        "means": model.means,
        "variances": model.variances,
        "c0": model.coeffs.c0,
        "c1": model.coeffs.c1,
        "loglik_trace": list(model.fit_log),
        "meta": model.meta,
    })


def model_from_dict(d: dict) -> TvHmmModel:
    try:
        coeffs = TransitionCoeffs(np.array(d["c0"], float), np.array(d["c1"], float))
        return TvHmmModel(np.array(d["pi"], float), np.array(d["means"], float),
                          np.array(d["variances"], float), coeffs,
                          tuple(d.get("loglik_trace", ())), dict(d.get("meta", {})))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputValidationError(f"malformed model: {exc}") from None


def write_profile_csv(path, profile: DailyProfile) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("clock_hour,p_inactive,p_active\n")
        for h, p, q in zip(profile.clock_hours().tolist(), profile.p_inactive.tolist(), profile.p_active.tolist()):
            fh.write(f"{h!r},{p!r},{q!r}\n")


def write_path_csv(path, week: WeekRecord, states) -> None:
    """Epoch-level decoded states next to the observations."""
    s = week.series
    hours = s.clock_hours()
    with open(path, "w", newline="") as fh:
        fh.write("epoch,clock_hour,value,state\n")
        for t in range(len(s)):
            v = NA if s.missing[t] else repr(float(s.values[t]))
            fh.write(f"{t},{float(hours[t])!r},{v},{int(states[t])}\n")


# -- features ---------------------------------------------------------------------

FEATURE_HEADER = ("participant_id", "week_start", "qids") + FEATURE_NAMES


def write_features_csv(path, rows: list[FeatureRow]) -> None:
    rows = sorted(rows, key=lambda r: (r.participant_id, r.week_start_ms))
    with open(path, "w", newline="") as fh:
        fh.write(",".join(FEATURE_HEADER) + "\n")
        for r in rows:
            q = NA if r.qids is None else str(int(r.qids))
            vals = ",".join(_num(r.values[name]) for name in FEATURE_NAMES)
            fh.write(f"{r.participant_id},{r.week_start},{q},{vals}\n")


def _iso_ms(text: str) -> int:
    t = dt.datetime.fromisoformat(text)
    return int((t - dt.datetime(1970, 1, 1)).total_seconds() * 1000)


def read_features_csv(path) -> list[FeatureRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != FEATURE_HEADER:
            got = [] if header is None else header
            bad = next((f"column {i + 1}: expected {e!r}, got {g!r}"
                        for i, (e, g) in enumerate(zip(FEATURE_HEADER, got)) if e != g),
                       f"expected {len(FEATURE_HEADER)} columns, got {len(got)}")
            raise InputValidationError(f"{path}: line 1: bad header, {bad}")
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(FEATURE_HEADER):
                raise InputValidationError(f"{path}: line {lineno}: expected {len(FEATURE_HEADER)} fields")
            try:
                ms = _iso_ms(rec[1])
                q = None if rec[2] == NA else int(rec[2])
                vals = {name: (math.nan if v == NA else float(v)) for name, v in zip(FEATURE_NAMES, rec[3:])}
            except ValueError as exc:
                raise InputValidationError(f"{path}: line {lineno}: {exc}") from None
            rows.append(FeatureRow(rec[0], ms, rec[1], q, vals))
    return rows


def write_predictions_csv(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("participant_id,week_start,true_qids,predicted_qids\n")
        for rep in sorted(reports, key=lambda r: r.participant_id):
            for ws, t, p in zip(rep.week_starts, rep.true.tolist(), rep.pred.tolist()):
                fh.write(f"{rep.participant_id},{ws},{int(t)},{p!r}\n")
