"""Week-level glue: fit, decode, profile, features."""

from __future__ import annotations

from dataclasses import dataclass, replace

from .features import FeatureRow, assemble_feature_row
from .ingest import WeekRecord
from .tvhmm import DailyProfile, StatePath, TvHmmModel, em_fit, profile24, viterbi


@dataclass(frozen=True)
class FitConfig:
    max_iter: int = 100
    tol: float = 1e-6
    seed: int = 0
    n_restarts: int = 3


def fit_week(week: WeekRecord, cfg: FitConfig = FitConfig()) -> TvHmmModel:
    model = em_fit(week.series, cfg.max_iter, cfg.tol, cfg.seed, cfg.n_restarts)
    return replace(model, meta={**model.meta, "week_key": list(week.key)})


def decode_week(week: WeekRecord, model: TvHmmModel) -> tuple[StatePath, DailyProfile]:
    path = viterbi(week.series, model, week_key=week.key)
    profile = profile24(model, week.series.epoch_minutes, week_key=week.key)
    return path, profile


def features_for_week(week: WeekRecord, model: TvHmmModel) -> FeatureRow:
    path, profile = decode_week(week, model)
    return assemble_feature_row(week, model, path, profile)


def process_week(week: WeekRecord, cfg: FitConfig = FitConfig()):
    model = fit_week(week, cfg)
    path, profile = decode_week(week, model)
    return model, path, profile, assemble_feature_row(week, model, path, profile)
