import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moodhmm.features import (FEATURE_NAMES, PROFILE, TIME_FEATURES, TRADITIONAL, VITERBI, assemble_feature_row,
                              noon_windows, profile_features, traditional_features, viterbi_features)
from moodhmm.ingest import EpochSeries, WeekRecord
from moodhmm.tvhmm import DailyProfile, StatePath, TransitionCoeffs, TvHmmModel, profile24, shift_phase

from oracles import random_model, rle_oracle

SUNDAY = 1704585600000
WEEK = 2016
W = 2 * np.pi / 24


def _series(activity, start_ms=SUNDAY):
    values = np.log(np.asarray(activity, float))
    return EpochSeries(start_ms, 5, values, np.zeros(len(values), bool))


def _cell_mean_cos(a, b, peak, step_h=5 / 60, days=7):
    """Exact average of a + b cos(W (h - peak)) over each epoch cell."""
    lo = np.arange(days * 288) * step_h
    hi = lo + step_h
    return a + b * (np.sin(W * (hi - peak)) - np.sin(W * (lo - peak))) / (W * step_h)


def _circ(a, b):
    d = abs(a - b) % 24
    return min(d, 24 - d)


# -- traditional ------------------------------------------------------------------------

def test_constant_activity():
    f = traditional_features(_series(np.full(WEEK, 0.02)))
    assert f["L5"] == pytest.approx(0.02, rel=1e-12) and f["M10"] == pytest.approx(0.02, rel=1e-12)
    assert f["relative_amplitude"] == pytest.approx(0.0, abs=1e-12)
    assert f["L5_time"] == 0.0 and f["M10_time"] == 0.0


def test_rectangular_activity():
    # exp(-800) is exactly 0.0, so the first eight hours carry zero activity
    values = np.tile(np.where(np.arange(288) < 96, -800.0, np.log(0.05)), 7)
    s = EpochSeries(SUNDAY, 5, values, np.zeros(WEEK, bool))
    f = traditional_features(s)
    assert f["L5"] == 0.0
    assert f["relative_amplitude"] == 1.0
    assert 8.0 <= f["M10_time"] and f["M10_time"] + 10 <= 24.0


def test_sinusoid_windows_match_integrals():
    a, b, peak = 1.0, 0.6, 14.0
    f = traditional_features(_series(_cell_mean_cos(a, b, peak)))
    l5 = a - b * math.sin(W * 2.5) / (W * 2.5)
    m10 = a + b * math.sin(W * 5.0) / (W * 5.0)
    assert abs(f["L5"] - l5) <= 1e-6
    assert abs(f["M10"] - m10) <= 1e-6
    assert f["L5_time"] == pytest.approx(23.5)
    assert f["M10_time"] == pytest.approx(9.0)
    assert f["relative_amplitude"] == pytest.approx((m10 - l5) / (m10 + l5), abs=1e-6)


def test_uncovered_clock_slot_makes_traditional_unavailable():
    s = _series(np.full(WEEK, 0.02))
    s.missing[np.arange(7) * 288 + 100] = True
    f = traditional_features(s)
    assert all(math.isnan(f[k]) for k in TRADITIONAL)


def test_missing_epochs_ignored_in_day_average():
    act = np.tile(np.where(np.arange(288) < 60, 0.01, 0.05), 7)
    s = _series(act)
    s.values[5] = 50.0  # garbage under the mask must not matter
    s.missing[5] = True
    f = traditional_features(s)
    assert f["L5"] == pytest.approx(0.01, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_relative_amplitude_bounded(seed):
    r = np.random.default_rng(seed)
    f = traditional_features(_series(r.exponential(0.05, WEEK) + 1e-4))
    assert 0.0 <= f["relative_amplitude"] <= 1.0
    assert (f["relative_amplitude"] == 0.0) == (f["L5"] == f["M10"])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, WEEK - 1))
def test_traditional_shift_equivariance(seed, k):
    r = np.random.default_rng(seed)
    day = np.convolve(r.exponential(1.0, 288 + 40), np.ones(40) / 40, "valid")[:288] + 0.01
    act = np.tile(day, 7)
    base = traditional_features(_series(act))
    moved = traditional_features(_series(np.roll(act, k)))
    for name in ("L5", "M10", "relative_amplitude"):
        assert abs(base[name] - moved[name]) <= 1e-6
    for name in ("L5_time", "M10_time"):
        assert _circ(moved[name], base[name] + k * 5 / 60) <= 1e-6


# -- Viterbi ------------------------------------------------------------------------------

def _nightly(start_h, end_h):
    day = np.ones(288, dtype=np.int8)
    day[int(start_h * 12):int(end_h * 12)] = 0
    return np.tile(day, 7)


def test_fixed_nightly_sleep():
    f, skipped = viterbi_features(_nightly(1, 7))
    assert skipped == 0
    assert f["sleep_duration_mean"] == pytest.approx(6.0) and f["sleep_duration_std"] == pytest.approx(0.0)
    assert f["sleep_onset_mean"] == pytest.approx(13.0)
    assert f["sleep_offset_mean"] == pytest.approx(19.0)
    assert f["inactive_bouts_mean"] == 1.0 and f["inactive_bouts_std"] == 0.0


def test_all_active_path_unavailable():
    f, skipped = viterbi_features(np.ones(WEEK, dtype=np.int8))
    assert skipped == 7
    assert all(math.isnan(f[k]) for k in VITERBI)


def test_noon_windows_for_midnight_week():
    wins = noon_windows(WEEK, 288, 0)
    assert len(wins) == 7
    assert wins[0] == (0, 144, -144)
    assert wins[-1] == (1584, 1872, 1584)


def _compare_with_oracle(states, start_slot):
    got, skipped = viterbi_features(states, 5, start_slot)
    rows, skipped_ref = rle_oracle(states.tolist(), 5, start_slot)
    assert skipped == skipped_ref
    if not rows:
        assert all(math.isnan(got[k]) for k in VITERBI)
        return
    arr = np.array(rows, float)
    for k, q in enumerate(("sleep_duration", "sleep_onset", "sleep_offset", "inactive_bouts")):
        assert got[f"{q}_mean"] == pytest.approx(arr[:, k].mean(), abs=1e-12)
        assert got[f"{q}_std"] == pytest.approx(arr[:, k].std(), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 287))
def test_viterbi_features_match_rle_oracle(seed, start_slot):
    r = np.random.default_rng(seed)
    # persistent random paths so runs are long enough to matter
    stay = r.uniform(0.8, 0.999)
    flips = r.random(WEEK) > stay
    states = (np.cumsum(flips) % 2).astype(np.int8)
    if r.random() < 0.3:
        states = 1 - states
    _compare_with_oracle(states, start_slot)


# -- profile --------------------------------------------------------------------------------

def _profile(p, minutes=5.0):
    return DailyProfile(minutes, np.asarray(p, float))


def _grid(minutes=5.0):
    n = int(round(24 * 60 / minutes))
    return (np.arange(n) + 0.5) * minutes / 60


def test_flat_half_profile():
    f = profile_features(_profile(np.full(288, 0.5)))
    assert f["rhythm_index"] == 0.0
    for k in ("inactive_duration", "inactive_onset", "inactive_offset", "inactive_area"):
        assert math.isnan(f[k])
    assert f["max_p_inactive"] == 0.5 and f["max_p_active"] == 0.5


def test_square_profile():
    p = np.where(_grid() < 8, 0.9, 0.1)
    f = profile_features(_profile(p))
    assert f["inactive_duration"] == pytest.approx(8.0, abs=1e-12)
    assert f["inactive_area"] == pytest.approx(7.2, abs=1e-12)
    assert f["rhythm_index"] == pytest.approx(0.8, abs=1e-12)
    assert _circ(f["inactive_onset"], 0.0) <= 1e-12
    assert f["inactive_offset"] == pytest.approx(8.0, abs=1e-12)


def test_sinusoid_profile_crossings_and_area():
    p = 0.5 + 0.4 * np.cos(W * (_grid() - 3))
    f = profile_features(_profile(p))
    assert f["inactive_onset"] == pytest.approx(21.0, abs=1e-4)
    assert f["inactive_offset"] == pytest.approx(9.0, abs=1e-4)
    assert f["inactive_duration"] == pytest.approx(12.0, abs=1e-4)
    assert abs(f["inactive_area"] - (6 + 0.4 * 24 / np.pi)) <= 1e-4
    assert f["max_p_inactive"] == pytest.approx(0.9, abs=1e-6)
    assert f["max_p_inactive_time"] == pytest.approx(3.0, abs=1e-3)
    assert f["max_p_active_time"] == pytest.approx(15.0, abs=1e-3)
    assert f["rhythm_index"] == pytest.approx(0.8, abs=1e-5)


def test_profile_above_half_everywhere():
    f = profile_features(_profile(0.7 + 0.1 * np.cos(W * _grid())))
    assert f["inactive_duration"] == 24.0
    assert math.isnan(f["inactive_onset"])


def _smooth(h, phase, amp2):
    return 0.5 + 0.3 * np.cos(W * (h - phase)) + amp2 * np.sin(2 * W * (h - phase / 2))


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 24), st.floats(0, 0.1))
def test_profile_grid_refinement(phase, amp2):
    coarse = profile_features(_profile(_smooth(_grid(5.0), phase, amp2), 5.0))
    fine = profile_features(_profile(_smooth(_grid(2.5), phase, amp2), 2.5))
    for k in PROFILE:
        if k in TIME_FEATURES:
            assert _circ(coarse[k], fine[k]) <= 1e-3
        else:
            assert abs(coarse[k] - fine[k]) <= 1e-3


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 287))
def test_profile_shift_equivariance(seed, k):
    model = random_model(np.random.default_rng(seed), scale=2.0)
    base = profile_features(profile24(model))
    moved = profile_features(profile24(shift_phase(model, k * 5 / 60), tol=1e-12))
    for name in PROFILE:
        if math.isnan(base[name]):
            assert math.isnan(moved[name])
        elif name in TIME_FEATURES:
            assert _circ(moved[name], base[name] + k * 5 / 60) <= 1e-6
        else:
            assert abs(moved[name] - base[name]) <= 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_profile_feature_ranges(seed):
    model = random_model(np.random.default_rng(seed), scale=3.0)
    f = profile_features(profile24(model))
    assert 0 <= f["rhythm_index"] <= 1
    for k in ("max_p_inactive", "max_p_active"):
        assert 0 <= f[k] <= 1
    if not math.isnan(f["inactive_duration"]):
        assert 0 <= f["inactive_duration"] <= 24
        assert 0 <= f["inactive_area"] <= f["inactive_duration"] + 1e-12


# -- assembly ---------------------------------------------------------------------------

def _week_and_model(rng):
    act = np.tile(np.where(np.arange(288) < 84, 0.003, 0.05), 7) * np.exp(0.3 * rng.normal(size=WEEK))
    week = WeekRecord("P1", _series(act), 9, 0.0, True, "ok")
    c0 = np.array([[4.0, 0.0], [-4.0, 0.0]])
    c1 = np.zeros((2, 2, 2))
    c1[:, 0] = [0.8, 0.8]
    model = TvHmmModel(np.array([0.5, 0.5]), np.array([-5.8, -3.0]), np.array([0.1, 0.1]), TransitionCoeffs(c0, c1))
    return week, model


def test_assemble_complete_row(rng):
    week, model = _week_and_model(rng)
    path = StatePath(_nightly(0, 7), week_key=week.key)
    row = assemble_feature_row(week, model, path, profile24(model, week_key=week.key))
    assert list(row.values) == list(FEATURE_NAMES) and len(row.values) == 22
    assert all(row.available().values())
    assert row.week_start == "2024-01-07T00:00:00"


def test_assemble_all_active_marks_viterbi_unavailable(rng):
    week, model = _week_and_model(rng)
    row = assemble_feature_row(week, model, StatePath(np.ones(WEEK, np.int8)), profile24(model))
    assert [k for k, ok in row.available().items() if not ok] == list(VITERBI)
    assert row.skipped_windows == 7


def test_assemble_rejects_foreign_inputs(rng):
    week, model = _week_and_model(rng)
    path = StatePath(_nightly(0, 7), week_key=("P1", SUNDAY + 7 * 86_400_000))
    with pytest.raises(ValueError, match="belongs to week"):
        assemble_feature_row(week, model, path, profile24(model))
    with pytest.raises(ValueError, match="length"):
        assemble_feature_row(week, model, StatePath(np.zeros(10, np.int8)), profile24(model))
