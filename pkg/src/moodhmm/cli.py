"""Command-line pipeline: simulate, ingest, fit, features, evaluate.

Exit codes: 0 success, 1 runtime failure, 2 input validation failure.
"""

from __future__ import annotations

import argparse
import datetime as dt
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import io
from .config import RunConfig, load_config
from .features import assemble_feature_row
from .ingest import InputValidationError, IngestReport, ingest_participant, read_labels_csv
from .pipeline import FitConfig, decode_week, fit_week
from .regress import InsufficientDataError, MIN_WEEKS, cohort_summary, evaluate_participant
from .synth import (PopulationStats, SynthSpec, circadian_model, population_stats, simulate_participant,
                    write_accel_csv, write_labels_csv)
from .tvhmm import InsufficientDataError as FitDataError

log = logging.getLogger("moodhmm")


class RuntimeFailure(RuntimeError):
    """Pipeline could not produce its output; exit code 1."""


def _map(fn, items, jobs: int):
    """Order-preserving map, in worker processes when ``jobs > 1``."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _require(value: str, flag: str) -> str:
    if not value:
        raise InputValidationError(f"missing required {flag}")
    return value


# -- simulate ---------------------------------------------------------------------

_SPEC_KEYS = {"seed", "n_weeks", "epoch_minutes", "missing_rate", "noise_sigma", "intercept", "participants",
              "qids_weights", "models", "regime_weeks", "start_date", "tz_offset_minutes", "burn_in_weeks"}
_MODEL_KEYS = {"persistence", "amplitude", "peak_hour", "means", "sd"}


def synth_specs_from_dict(doc: dict, cfg: RunConfig) -> list[SynthSpec]:
    """One SynthSpec per participant; participant ``i`` uses seed ``seed + i``."""
    if not isinstance(doc, dict):
        raise InputValidationError("spec: top level must be an object")
    unknown = set(doc) - _SPEC_KEYS
    if unknown:
        raise InputValidationError(f"spec: unknown field(s) {sorted(unknown)}")
    try:
        participants = doc.get("participants", 1)
        if isinstance(participants, int):
            participants = [f"P{i + 1:02d}" for i in range(participants)]
        for pid in participants:
            io.check_participant_id(pid)
        models = []
        for k, m in enumerate(doc.get("models", [{}])):
            bad = set(m) - _MODEL_KEYS
            if bad:
                raise InputValidationError(f"spec: models[{k}]: unknown field(s) {sorted(bad)}")
            models.append(circadian_model(**m))
        seed = int(doc.get("seed", cfg.seed))
        fit = FitConfig(cfg.max_iter, cfg.tol, cfg.seed, cfg.restarts)
        common = dict(
            n_weeks=int(doc.get("n_weeks", 40)),
            epoch_minutes=int(doc.get("epoch_minutes", cfg.epoch_minutes)),
            models=tuple(models),
            regime_weeks=int(doc.get("regime_weeks", 1)),
            missing_rate=float(doc.get("missing_rate", 0.0)),
            qids_weights={str(k): float(v) for k, v in doc.get("qids_weights", {}).items()},
            intercept=float(doc.get("intercept", 8.0)),
            noise_sigma=float(doc.get("noise_sigma", 1.0)),
            start_date=dt.date.fromisoformat(doc.get("start_date", "2024-01-07")),
            tz_offset_minutes=int(doc.get("tz_offset_minutes", cfg.tz_offset_minutes)),
            burn_in_weeks=int(doc.get("burn_in_weeks", 200)),
            fit=fit,
            missing_threshold=cfg.missing_threshold,
        )
        return [SynthSpec(seed=seed + i, participant_id=pid, **common) for i, pid in enumerate(participants)]
    except InputValidationError:
        raise
    except (TypeError, ValueError, AttributeError) as exc:
        raise InputValidationError(f"spec: {exc}") from None


def _simulate_one(args):
    spec, stats = args
    return spec.participant_id, simulate_participant(spec, stats)


def cmd_simulate(cfg: RunConfig) -> int:
    specs = synth_specs_from_dict(io.load_json(_require(cfg.spec, "--spec")), cfg)
    out = Path(_require(cfg.out, "--out"))
    (out / "accel").mkdir(parents=True, exist_ok=True)
    # one shared standardization so weights mean the same for every participant
    stats = population_stats(specs[0]) if specs else PopulationStats({}, {})
    results = _map(_simulate_one, [(s, stats) for s in specs], cfg.jobs)
    all_weeks = []
    for pid, weeks in results:
        clamped = write_accel_csv(out / "accel" / f"{pid}.csv", weeks)
        if clamped:
            log.info("%s: %d epochs clamped to the device range", pid, clamped)
        all_weeks.extend(weeks)
    write_labels_csv(out / "labels.csv", all_weeks)
    return 0


# -- ingest -------------------------------------------------------------------------

def _accel_files(paths: list[str]) -> list[Path]:
    files = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files.extend(sorted(p.glob("*.csv")))
        elif p.is_file():
            files.append(p)
        else:
            raise InputValidationError(f"{p}: no such file or directory")
    return sorted(files, key=lambda f: f.stem)


def cmd_ingest(cfg: RunConfig, accel: list[str]) -> int:
    labels = read_labels_csv(_require(cfg.labels, "--labels"))
    files = _accel_files(accel or [_require(cfg.accel, "--accel")])
    report = IngestReport()
    weeks = []
    for f in files:
        pid = io.check_participant_id(f.stem)
        w, rep = ingest_participant(f, labels, pid, epoch_minutes=cfg.epoch_minutes,
                                    tz_offset_minutes=cfg.tz_offset_minutes,
                                    missing_threshold=cfg.missing_threshold)
        report.merge(rep, pid)
        weeks.extend(w)
    io.save_weeks(_require(cfg.out or cfg.weeks, "--out"), weeks, report.to_dict())
    log.info("%d weeks, %d eligible", report.weeks_produced, report.weeks_eligible)
    return 0


# -- fit ----------------------------------------------------------------------------

def _fit_one(args):
    week, fit_cfg = args
    try:
        return fit_week(week, fit_cfg), None
    except FitDataError as exc:
        return None, str(exc)


def cmd_fit(cfg: RunConfig) -> int:
    weeks = io.load_weeks(_require(cfg.weeks, "--weeks"))
    out = Path(_require(cfg.out or cfg.models, "--out"))
    eligible = [w for w in weeks if w.eligible]
    if not eligible:
        raise RuntimeFailure("no eligible weeks to fit")
    (out / "models").mkdir(parents=True, exist_ok=True)
    (out / "profiles").mkdir(parents=True, exist_ok=True)
    fit_cfg = FitConfig(cfg.max_iter, cfg.tol, cfg.seed, cfg.restarts)
    results = _map(_fit_one, [(w, fit_cfg) for w in eligible], cfg.jobs)
    summary = []
    for w in weeks:
        if not w.eligible:
            summary.append({"week": io.week_stem(w), "status": "skipped", "reason": w.reason})
    fitted = 0
    for w, (model, err) in zip(eligible, results):
        stem = io.week_stem(w)
        if model is None:
            summary.append({"week": stem, "status": "skipped", "reason": err})
            continue
        _, profile = decode_week(w, model)
        io.dump_json(io.model_to_dict(model), out / "models" / f"{stem}.json")
        io.write_profile_csv(out / "profiles" / f"{stem}.csv", profile)
        summary.append({"week": stem, "status": "fitted", "converged": model.meta["converged"],
                        "transition_step_converged": model.meta["transition_step_converged"],
                        "loglik": model.meta["loglik"], "iterations": model.meta["iterations"],
                        "profile_converged": profile.converged})
        fitted += 1
    summary.sort(key=lambda s: s["week"])
    io.dump_json({"weeks": summary}, out / "fit_summary.json")
    if not fitted:
        raise RuntimeFailure("no week could be fitted")
    return 0


# -- features -----------------------------------------------------------------------

def cmd_features(cfg: RunConfig, paths_dir: str | None = None) -> int:
    weeks = io.load_weeks(_require(cfg.weeks, "--weeks"))
    models_dir = Path(_require(cfg.models, "--models")) / "models"
    out = Path(_require(cfg.out or cfg.features, "--out"))
    rows = []
    for w in io.sort_weeks(weeks):
        path = models_dir / f"{io.week_stem(w)}.json"
        if not w.eligible or not path.is_file():
            continue
        model = io.model_from_dict(io.load_json(path))
        states, profile = decode_week(w, model)
        rows.append(assemble_feature_row(w, model, states, profile))
        if paths_dir:
            Path(paths_dir).mkdir(parents=True, exist_ok=True)
            io.write_path_csv(Path(paths_dir) / f"{io.week_stem(w)}.csv", w, states.states)
    if not rows:
        raise RuntimeFailure("no fitted eligible weeks found")
    io.write_features_csv(out, rows)
    return 0


# -- evaluate -----------------------------------------------------------------------

def cmd_evaluate(cfg: RunConfig) -> int:
    rows = io.read_features_csv(_require(cfg.features, "--features"))
    out = Path(_require(cfg.out, "--out"))
    by_pid = {}
    for r in rows:
        by_pid.setdefault(r.participant_id, []).append(r)
    reports, excluded = [], []
    for pid in sorted(by_pid):
        labelled = [r for r in by_pid[pid] if r.qids is not None]
        if len(labelled) < MIN_WEEKS:
            excluded.append({"participant_id": pid,
                             "reason": f"{len(labelled)} labelled weeks, needs at least {MIN_WEEKS}"})
            continue
        try:
            reports.append(evaluate_participant(labelled, cfg.mode, grid_size=cfg.lambda_grid_size,
                                                min_ratio=cfg.lambda_min_ratio))
        except InsufficientDataError as exc:
            excluded.append({"participant_id": pid, "reason": str(exc)})
    if not reports:
        raise RuntimeFailure("no participant could be evaluated")
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "mode": cfg.mode,
        "participants": [r.to_dict() for r in reports],
        "excluded": excluded,
        "cohort": cohort_summary(reports),
    }
    io.dump_json(io._jsonable(doc), out / "report.json")
    io.write_predictions_csv(out / "predictions.csv", reports)
    return 0


# -- entry point --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--epoch-minutes", type=int)
    common.add_argument("--missing-threshold", type=float)
    common.add_argument("--states", type=int, help="number of hidden states (fixed at 2)")
    common.add_argument("--max-iter", type=int)
    common.add_argument("--tol", type=float)
    common.add_argument("--restarts", type=int)
    common.add_argument("--lambda-grid-size", type=int)
    common.add_argument("--lambda-min-ratio", type=float)
    common.add_argument("--seed", type=int)
    common.add_argument("--tz-offset-minutes", type=int)
    common.add_argument("--jobs", type=int)
    common.add_argument("--mode", choices=("loo", "prospective"))
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="moodhmm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="write synthetic accelerometer and label CSVs")
    p.add_argument("--spec", help="JSON synthetic-cohort spec")
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("ingest", parents=[common], help="accelerometer CSVs to labelled weeks")
    p.add_argument("--accel", nargs="+", help="accelerometer CSV files or directories")
    p.add_argument("--labels", help="labels CSV")
    p.add_argument("--out", help="weeks JSON to write")

    p = sub.add_parser("fit", parents=[common], help="fit one model per eligible week")
    p.add_argument("--weeks", help="weeks JSON")
    p.add_argument("--out", help="output directory for models/ and profiles/")

    p = sub.add_parser("features", parents=[common], help="weekly feature table")
    p.add_argument("--weeks", help="weeks JSON")
    p.add_argument("--models", help="directory written by fit")
    p.add_argument("--out", help="features CSV to write")
    p.add_argument("--paths", help="optional directory for decoded state paths")

    p = sub.add_parser("evaluate", parents=[common], help="per-participant LASSO evaluation")
    p.add_argument("--features", help="features CSV")
    p.add_argument("--out", help="output directory for report.json and predictions.csv")
    return parser


_CONFIG_FLAGS = ("epoch_minutes", "missing_threshold", "states", "max_iter", "tol", "restarts",
                 "lambda_grid_size", "lambda_min_ratio", "seed", "tz_offset_minutes", "jobs", "mode",
                 "labels", "weeks", "models", "features", "spec", "out")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        overrides = {k: getattr(args, k, None) for k in _CONFIG_FLAGS}
        cfg = load_config(args.config, **overrides)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "ingest":
            return cmd_ingest(cfg, args.accel or [])
        if args.command == "fit":
            return cmd_fit(cfg)
        if args.command == "features":
            return cmd_features(cfg, args.paths)
        return cmd_evaluate(cfg)
    except InputValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeFailure, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
