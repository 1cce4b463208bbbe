import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moodhmm.features import FEATURE_NAMES, FeatureRow
from moodhmm.regress import (InsufficientDataError, classification_metrics, cohort_summary, evaluate_participant,
                             fit_fold, fit_standardization, kkt_violation, lambda_grid, lambda_max, lasso_fit,
                             lasso_objective, loo_evaluate, loo_predictions, make_report, pearson, prospective_evaluate,
                             prospective_split, select_lambda)


def _standardized(rng, n, p):
    X = rng.normal(size=(n, p))
    return (X - X.mean(axis=0)) / X.std(axis=0)


def _rho(x, y):
    return float(x @ (y - y.mean()) / len(y))


# -- lasso fit ---------------------------------------------------------------------------

def test_zero_lambda_single_feature_is_ols(rng):
    x = _standardized(rng, 30, 1)
    y = 2.5 * x[:, 0] + rng.normal(size=30) + 7
    fit = lasso_fit(x, y, 0.0)
    slope = np.cov(x[:, 0], y, bias=True)[0, 1] / np.var(x[:, 0])
    assert fit.coef[0] == pytest.approx(slope, abs=1e-8)
    assert fit.intercept == pytest.approx(y.mean(), abs=1e-8)


def test_lambda_max_gives_null_model(rng):
    X = _standardized(rng, 25, 6)
    y = X @ rng.normal(size=6) + rng.normal(size=25)
    lam = lambda_max(X, y)
    for scale in (1.0, 1.5, 10.0):
        fit = lasso_fit(X, y, lam * scale)
        assert np.all(fit.coef == 0.0)
        assert fit.intercept == pytest.approx(y.mean(), abs=1e-12)


def test_single_feature_soft_threshold(rng):
    for _ in range(50):
        x = _standardized(rng, 20, 1)
        y = rng.normal(size=20) * 3 + x[:, 0] * rng.normal(0, 2)
        rho = _rho(x[:, 0], y)
        lam = rng.uniform(0, 1.5 * abs(rho))
        fit = lasso_fit(x, y, lam)
        assert fit.coef[0] == pytest.approx(np.sign(rho) * max(abs(rho) - lam, 0.0), abs=1e-8)


def test_too_few_rows():
    with pytest.raises(InsufficientDataError, match="insufficient training data"):
        lasso_fit(np.zeros((1, 3)), np.zeros(1), 0.1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(5, 40), st.integers(1, 25), st.floats(0.0, 1.2))
def test_kkt_holds(seed, n, p, frac):
    r = np.random.default_rng(seed)
    X = _standardized(r, n, p)
    y = X[:, 0] * 2 + r.normal(size=n)
    lam = frac * lambda_max(X, y)
    fit = lasso_fit(X, y, lam)
    assert kkt_violation(X, y, fit) <= 1e-6


def test_local_optimality_probe(rng):
    X = _standardized(rng, 30, 8)
    y = X[:, :3] @ [2.0, -1.0, 0.5] + rng.normal(size=30)
    lam = 0.2
    fit = lasso_fit(X, y, lam)
    f0 = lasso_objective(X, y, fit.intercept, fit.coef, lam)
    for _ in range(1000):
        d = rng.normal(size=9)
        d *= 1e-3 / np.linalg.norm(d)
        assert lasso_objective(X, y, fit.intercept + d[0], fit.coef + d[1:], lam) >= f0 - 1e-12


def test_monotone_sparsity_along_grid(rng):
    for _ in range(10):
        X = _standardized(rng, 40, 10)
        y = X[:, :4] @ rng.normal(size=4) + rng.normal(size=40)
        sizes = [len(lasso_fit(X, y, lam).active_set) for lam in lambda_grid(X, y)]
        assert all(a <= b for a, b in zip(sizes, sizes[1:]))


# -- standardization and folds -------------------------------------------------------------

def test_standardization_drops_constant_and_imputes():
    X = np.array([[1.0, 5.0, np.nan], [2.0, 5.0, 4.0], [3.0, 5.0, 6.0]])
    params = fit_standardization(X)
    assert params.keep.tolist() == [0, 2] and params.dropped == [1]
    assert params.impute[2] == 5.0
    Z = params.transform(np.array([[2.0, 0.0, np.nan]]))
    assert Z[0, 1] == pytest.approx(0.0)


def test_held_out_label_never_used(rng):
    X = rng.normal(size=(12, 4))
    y = X[:, 0] * 3 + 10 + rng.normal(size=12)
    grid = lambda_grid(X, y, 8)
    base, _ = loo_predictions(X, y, grid)
    for i in (0, 5, 11):
        y2 = y.copy()
        y2[i] += 100.0
        X2 = X.copy()
        X2[i] += 50.0
        moved, _ = loo_predictions(X2, y2, grid)
        # fold i's model depends only on the other rows: only the test input changed
        params, fit = fit_fold(np.delete(X, i, 0), np.delete(y, i), grid[3])
        ref = np.clip(fit.predict(params.transform(X2[i:i + 1]))[0], 0, 27)
        assert moved[3, i] == pytest.approx(ref, abs=1e-9)


def test_prospective_ignores_test_rows(rng):
    X = rng.normal(size=(15, 5))
    y = X[:, 1] * 2 + 10 + rng.normal(size=15)
    a = prospective_evaluate(X, y)
    y2, X2 = y.copy(), X.copy()
    y2[10:] = 0.0
    X2[10:, 0] = np.nan
    b = prospective_evaluate(X2, y2)
    assert a.lam == b.lam
    assert np.all(np.isfinite(b.pred))


# -- lambda selection --------------------------------------------------------------------

def test_noiseless_linear_selection(rng):
    X = rng.normal(size=(12, 6))
    y = 8 + 2 * X[:, 2]
    grid = lambda_grid(X, y, 50, 1e-6)
    lam = select_lambda(X, y, grid)
    preds, _ = loo_predictions(X, y, np.array([lam]))
    assert np.mean((preds[0] - y) ** 2) <= 1e-6
    for i in range(12):
        params, fit = fit_fold(np.delete(X, i, 0), np.delete(y, i), lam)
        assert 2 in params.keep[fit.active_set]


def test_pure_noise_prefers_null_model():
    hits = 0
    for s in range(50):
        r = np.random.default_rng([7, s])
        X = r.normal(size=(30, 5))
        y = r.normal(10, 3, 30)
        grid = lambda_grid(X, y)
        hits += select_lambda(X, y, grid) == grid[0]
    assert hits > 25


def test_singleton_grid(rng):
    X = rng.normal(size=(8, 3))
    y = rng.normal(size=8)
    assert select_lambda(X, y, [0.37]) == 0.37


def test_selection_needs_five_weeks(rng):
    with pytest.raises(InsufficientDataError):
        select_lambda(rng.normal(size=(4, 3)), rng.normal(size=4), [0.1])


def test_ties_go_to_larger_lambda():
    # all-constant target: every lambda predicts the mean identically
    X = np.random.default_rng(0).normal(size=(10, 3))
    y = np.full(10, 5.0)
    assert select_lambda(X, y, [0.1, 0.5, 0.2]) == 0.5


# -- evaluation ------------------------------------------------------------------------

def test_perfect_predictor_report():
    y = np.array([3, 12, 15, 8, 20.0])
    rep = make_report("loo", 0.1, y, y, [2] * 5)
    assert rep.rmse == 0 and rep.mae == 0 and rep.accuracy == 1.0


def test_constant_truth_pearson_undefined():
    rep = make_report("loo", 0.1, np.full(6, 7.0), np.arange(6.0), [0] * 6)
    assert rep.pearson_rho is None
    assert rep.mae > 0


def test_prospective_split_arithmetic():
    assert prospective_split(6) == 4
    assert [prospective_split(n) for n in (5, 7, 9, 40)] == [4, 5, 6, 27]


def test_prospective_worse_than_loo_on_average():
    gaps = []
    for s in range(50):
        r = np.random.default_rng([11, s])
        X = r.normal(size=(30, 8))
        y = np.clip(10 + X[:, :2] @ [2.0, -1.5] + r.normal(size=30), 0, 27)
        gaps.append(prospective_evaluate(X, y).mae - loo_evaluate(X, y).mae)
    assert np.mean(gaps) >= 0


def test_report_invariants(rng):
    for _ in range(5):
        X = rng.normal(size=(15, 6))
        y = np.round(np.clip(12 + 6 * X[:, 0] + rng.normal(size=15), 0, 27))
        rep = loo_evaluate(X, y)
        assert rep.rmse >= rep.mae >= 0
        assert np.all((rep.pred >= 0) & (rep.pred <= 27))
        assert sum(rep.confusion.values()) == 15
        assert rep.pearson_rho is None or -1 <= rep.pearson_rho <= 1


# -- classification ----------------------------------------------------------------------

def test_concordant_pairs():
    m = classification_metrics([12, 3], [15, 2])
    assert (m["accuracy"], m["sensitivity"], m["specificity"]) == (1.0, 1.0, 1.0)


def test_absent_positive_class():
    m = classification_metrics([3, 5, 10], [11, 2, 4])
    assert m["sensitivity"] is None and m["specificity"] == pytest.approx(2 / 3)


def test_confusion_recount(rng):
    t = rng.integers(0, 28, 1000)
    p = rng.uniform(0, 27, 1000)
    m = classification_metrics(t, p)
    tp = tn = fp = fn = 0
    for a, b in zip(t, p):
        if a > 10 and b > 10:
            tp += 1
        elif a <= 10 and b <= 10:
            tn += 1
        elif b > 10:
            fp += 1
        else:
            fn += 1
    assert (m["tp"], m["tn"], m["fp"], m["fn"]) == (tp, tn, fp, fn)
    assert m["accuracy"] == (tp + tn) / 1000
    assert m["sensitivity"] == tp / (tp + fn) and m["specificity"] == tn / (tn + fp)


def test_length_mismatch():
    with pytest.raises(ValueError):
        classification_metrics([1, 2], [1])


def test_pearson_matches_numpy(rng):
    a, b = rng.normal(size=30), rng.normal(size=30)
    assert pearson(a, b) == pytest.approx(np.corrcoef(a, b)[0, 1], abs=1e-14)


# -- participant / cohort ------------------------------------------------------------------

def _rows(rng, pid, n, with_nan=False):
    rows = []
    for k in range(n):
        vals = {name: float(rng.normal()) for name in FEATURE_NAMES}
        if with_nan and k % 3 == 0:
            vals["inactive_onset"] = math.nan
        q = int(np.clip(round(10 + 4 * vals["L5"] + rng.normal()), 0, 27))
        rows.append(FeatureRow(pid, k * 604_800_000, f"2024-01-{k + 1:02d}", q, vals))
    return rows


def test_participant_with_four_weeks_excluded(rng):
    with pytest.raises(InsufficientDataError):
        evaluate_participant(_rows(rng, "A", 4))


def test_unavailable_features_imputed(rng):
    rep = evaluate_participant(_rows(rng, "A", 12, with_nan=True), "prospective")
    assert len(rep.pred) == 4 and np.all(np.isfinite(rep.pred))


def test_cohort_summary_counts(rng):
    reports = [evaluate_participant(_rows(rng, f"P{i}", 10)) for i in range(5)]
    summary = cohort_summary(reports)
    assert summary["n_participants"] == 5
    assert summary["mae"]["n"] == 5
    vals = [r.mae for r in reports]
    assert summary["mae"]["mean"] == pytest.approx(np.mean(vals))
    assert summary["mae"]["std"] == pytest.approx(np.std(vals, ddof=1))
