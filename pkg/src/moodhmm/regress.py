"""Per-participant LASSO regression of QIDS with leave-one-week-out and
prospective evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .features import FEATURE_NAMES, FeatureRow

QIDS_RANGE = (0.0, 27.0)
DEPRESSION_THRESHOLD = 10
MIN_WEEKS = 5
DEFAULT_GRID_SIZE = 50
DEFAULT_MIN_RATIO = 1e-3
CD_TOL = 1e-7
KKT_TOL = 1e-6


class InsufficientDataError(ValueError):
    pass


@dataclass
class StandardizationParams:
    keep: np.ndarray  # indices of retained columns
    mean: np.ndarray  # per retained column
    std: np.ndarray  # per retained column
    impute: np.ndarray  # per input column (training mean, NaN if never observed)
    dropped: list = field(default_factory=list)

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        X = np.where(np.isnan(X), self.impute[None, :], X)
        return (X[:, self.keep] - self.mean) / self.std


def fit_standardization(X: np.ndarray) -> StandardizationParams:
    """Imputation and scaling parameters from the training rows; constant columns dropped."""
    X = np.asarray(X, dtype=float)
    observed = ~np.isnan(X)
    counts = observed.sum(axis=0)
    sums = np.where(observed, X, 0.0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        impute = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    filled = np.where(observed, X, impute[None, :])
    mean = filled.mean(axis=0)
    std = filled.std(axis=0)
    scale = np.maximum(1.0, np.abs(mean))
    ok = (counts > 0) & (std > 1e-12 * scale)
    keep = np.flatnonzero(ok)
    dropped = [int(j) for j in np.flatnonzero(~ok)]
    return StandardizationParams(keep, mean[keep], std[keep], impute, dropped)


@dataclass
class LassoFit:
    lam: float
    intercept: float
    coef: np.ndarray
    converged: bool = True
    sweeps: int = 0

    @property
    def active_set(self) -> np.ndarray:
        return np.flatnonzero(self.coef != 0.0)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.intercept + np.asarray(X, dtype=float) @ self.coef


def lasso_objective(X, y, intercept, coef, lam) -> float:
    r = np.asarray(y, float) - intercept - np.asarray(X, float) @ coef
    return float(r @ r / (2 * len(r)) + lam * np.abs(coef).sum())


def kkt_violation(X, y, fit: LassoFit) -> float:
    """Largest violation of the lasso optimality conditions (0 at optimum)."""
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    n = len(y)
    resid = y - fit.intercept - X @ fit.coef
    grad = -(X.T @ resid) / n  # gradient of the smooth part
    viol = np.where(
        fit.coef == 0.0,
        np.maximum(np.abs(grad) - fit.lam, 0.0),
        np.abs(grad + fit.lam * np.sign(fit.coef)),
    )
    return float(max(viol.max(initial=0.0), abs(resid.mean())))


def lasso_fit(X, y, lam: float, *, warm_start: np.ndarray | None = None,
              tol: float = CD_TOL, max_sweeps: int = 100_000) -> LassoFit:
    """Minimise (1/2n)||y - b0 - Xb||^2 + lam*||b||_1 by cyclic coordinate descent."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(y)
    if n < 2:
        raise InsufficientDataError("insufficient training data")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    p = X.shape[1]
    if p == 0:
        return LassoFit(lam, float(y.mean()), np.zeros(0))
    xbar = X.mean(axis=0)
    ybar = y.mean()
    Xc = X - xbar
    gram = Xc.T @ Xc / n
    xty = Xc.T @ (y - ybar) / n
    beta = np.zeros(p) if warm_start is None else np.array(warm_start, dtype=float)
    total = 0
    converged = False
    for _ in range(4):
        beta, sweeps, converged = _kernels.lasso_cd(gram, xty, beta, float(lam), tol, max_sweeps)
        total += sweeps
        fit = LassoFit(float(lam), float(ybar - xbar @ beta), beta.copy(), converged, total)
        viol = kkt_violation(X, y, fit)
        if viol <= 0.1 * KKT_TOL:
            break
        polished = _polish(gram, xty, beta, float(lam))
        if polished is not None:
            cand = LassoFit(float(lam), float(ybar - xbar @ polished), polished, True, total)
            if kkt_violation(X, y, cand) < viol:
                fit, beta = cand, polished.copy()
                if kkt_violation(X, y, fit) <= 0.1 * KKT_TOL:
                    break
        tol *= 0.01
    return fit


def _reduce_support(gram, beta):
    """Shrink a support whose Gram block is singular without changing the fit.

    Moving along a null direction of the block leaves fitted values fixed and
    lowers the L1 norm until some coefficient reaches zero.
    """
    beta = beta.copy()
    while True:
        active = np.flatnonzero(beta)
        if active.size == 0:
            return beta
        _, sv, vt = np.linalg.svd(gram[np.ix_(active, active)])
        if sv[-1] > 1e-10 * max(sv[0], 1e-300):
            return beta
        d = vt[-1]
        b = beta[active]
        if np.sign(b) @ d < 0:
            d = -d
        ratios = np.where(d * np.sign(b) > 0, b / np.where(d == 0, 1.0, d), np.inf)
        k = int(np.argmin(ratios))
        beta[active] = b - ratios[k] * d
        beta[active[k]] = 0.0


def _polish(gram, xty, beta, lam, max_steps=100):
    """Active-set refinement of a coordinate descent solution.

    Coordinate descent crawls when the Gram matrix is singular (p >= n, lam
    near 0). Each step solves the stationarity equations on the current
    support, pruning coordinates whose sign flips. The zero coordinate that
    most violates optimality then joins the support.
    """
    if lam == 0:
        return np.linalg.lstsq(gram, xty, rcond=None)[0]
    out = _reduce_support(gram, beta)
    for _ in range(max_steps):
        active = np.flatnonzero(out)
        signs = np.sign(out[active])
        while active.size:
            sol = np.linalg.lstsq(gram[np.ix_(active, active)], xty[active] - lam * signs, rcond=None)[0]
            flipped = np.sign(sol) != signs
            if not flipped.any():
                break
            active, signs = active[~flipped], signs[~flipped]
        out = np.zeros_like(beta)
        if active.size:
            out[active] = sol
        grad = gram @ out - xty
        excess = np.where(out == 0.0, np.abs(grad) - lam, 0.0)
        j = int(np.argmax(excess))
        if excess[j] <= 0.01 * KKT_TOL:
            return out
        out[j] = -np.sign(grad[j]) * 1e-12
        out = _reduce_support(gram, out)
    return out


def lambda_max(Z: np.ndarray, y: np.ndarray) -> float:
    Z = np.asarray(Z, float)
    y = np.asarray(y, float)
    if Z.shape[1] == 0:
        return 0.0
    Zc = Z - Z.mean(axis=0)
    return float(np.max(np.abs(Zc.T @ (y - y.mean()))) / len(y))


def lambda_grid(X: np.ndarray, y: np.ndarray, size: int = DEFAULT_GRID_SIZE,
                min_ratio: float = DEFAULT_MIN_RATIO) -> np.ndarray:
    """Log-spaced grid from lambda_max of the standardised data downwards."""
    Z = fit_standardization(X).transform(X)
    top = lambda_max(Z, y)
    if top <= 0:
        return np.zeros(1)
    return np.geomspace(top, top * min_ratio, size)


def fit_fold(X_train, y_train, lam: float, warm_start=None) -> tuple[StandardizationParams, LassoFit]:
    """Standardise on the training rows only, then fit."""
    params = fit_standardization(X_train)
    Z = params.transform(X_train)
    if warm_start is not None and len(warm_start) != Z.shape[1]:
        warm_start = None
    return params, lasso_fit(Z, y_train, lam, warm_start=warm_start)


def predict(params: StandardizationParams, fit: LassoFit, X) -> np.ndarray:
    return np.clip(fit.predict(params.transform(np.atleast_2d(X))), *QIDS_RANGE)


def loo_predictions(X, y, grid) -> tuple[np.ndarray, np.ndarray]:
    """Held-out predictions and active-set sizes, shape (len(grid), n).

    Each fold walks the grid from the largest lambda down with warm starts.
    """
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    n = len(y)
    grid = np.asarray(grid, float)
    order = np.argsort(-grid, kind="stable")
    preds = np.empty((len(grid), n))
    active = np.empty((len(grid), n), dtype=int)
    for i in range(n):
        train = np.arange(n) != i
        params = fit_standardization(X[train])
        Z = params.transform(X[train])
        z_test = params.transform(X[i:i + 1])
        beta = None
        for g in order:
            fit = lasso_fit(Z, y[train], grid[g], warm_start=beta)
            beta = fit.coef
            preds[g, i] = np.clip(fit.predict(z_test)[0], *QIDS_RANGE)
            active[g, i] = len(fit.active_set)
    return preds, active


def _pick(grid: np.ndarray, mse: np.ndarray) -> int:
    # scan from the largest lambda so exact ties keep the sparser model
    best = None
    for g in np.argsort(-grid, kind="stable"):
        if best is None or mse[g] < mse[best] - 1e-12 * max(1.0, mse[best]):
            best = g
    return int(best)


def select_lambda(X, y, grid) -> float:
    """Lambda minimising leave-one-week-out mean squared error."""
    y = np.asarray(y, float)
    if len(y) < MIN_WEEKS:
        raise InsufficientDataError(f"needs at least {MIN_WEEKS} labelled weeks, got {len(y)}")
    grid = np.asarray(grid, float)
    if grid.size == 0:
        raise ValueError("empty lambda grid")
    preds, _ = loo_predictions(X, y, grid)
    mse = ((preds - y[None, :]) ** 2).mean(axis=1)
    return float(grid[_pick(grid, mse)])


# -- metrics -------------------------------------------------------------------

def classification_metrics(true_qids, predicted_qids, threshold: float = DEPRESSION_THRESHOLD) -> dict:
    true_qids = np.asarray(true_qids, float)
    predicted_qids = np.asarray(predicted_qids, float)
    if true_qids.shape != predicted_qids.shape:
        raise ValueError("length mismatch")
    t = true_qids > threshold
    p = predicted_qids > threshold
    tp = int(np.sum(t & p))
    tn = int(np.sum(~t & ~p))
    fp = int(np.sum(~t & p))
    fn = int(np.sum(t & ~p))
    n = tp + tn + fp + fn
    return {
        "accuracy": (tp + tn) / n if n else None,
        "sensitivity": tp / (tp + fn) if tp + fn else None,
        "specificity": tn / (tn + fp) if tn + fp else None,
        "tp": tp, "tn": tn, "fp": fp, "fn": fn,
    }


def pearson(a, b) -> float | None:
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if len(a) < 2 or np.std(a) == 0 or np.std(b) == 0:
        return None
    r = float(np.corrcoef(a, b)[0, 1])
    return min(max(r, -1.0), 1.0)


@dataclass
class EvalReport:
    mode: str
    lam: float
    true: np.ndarray
    pred: np.ndarray
    rmse: float
    mae: float
    pearson_rho: float | None
    accuracy: float | None
    sensitivity: float | None
    specificity: float | None
    confusion: dict
    mean_active: float
    participant_id: str = ""
    week_starts: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "participant_id": self.participant_id,
            "mode": self.mode,
            "lambda": self.lam,
            "n_weeks": int(len(self.true)),
            "rmse": self.rmse,
            "mae": self.mae,
            "pearson_rho": self.pearson_rho,
            "n_features": self.mean_active,
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "confusion": self.confusion,
        }


def make_report(mode, lam, true, pred, active, participant_id="", week_starts=()) -> EvalReport:
    true = np.asarray(true, float)
    pred = np.asarray(pred, float)
    err = pred - true
    cls = classification_metrics(true, pred)
    return EvalReport(
        mode=mode,
        lam=float(lam),
        true=true,
        pred=pred,
        rmse=float(np.sqrt(np.mean(err ** 2))),
        mae=float(np.mean(np.abs(err))),
        pearson_rho=pearson(true, pred),
        accuracy=cls["accuracy"],
        sensitivity=cls["sensitivity"],
        specificity=cls["specificity"],
        confusion={k: cls[k] for k in ("tp", "tn", "fp", "fn")},
        mean_active=float(np.mean(active)),
        participant_id=participant_id,
        week_starts=list(week_starts),
    )


def loo_evaluate(X, y, grid=None, *, grid_size=DEFAULT_GRID_SIZE, min_ratio=DEFAULT_MIN_RATIO,
                 participant_id="", week_starts=()) -> EvalReport:
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    if len(y) < MIN_WEEKS:
        raise InsufficientDataError(f"needs at least {MIN_WEEKS} labelled weeks, got {len(y)}")
    grid = lambda_grid(X, y, grid_size, min_ratio) if grid is None else np.asarray(grid, float)
    preds, active = loo_predictions(X, y, grid)
    mse = ((preds - y[None, :]) ** 2).mean(axis=1)
    g = _pick(grid, mse)
    return make_report("loo", grid[g], y, preds[g], active[g], participant_id, week_starts)


def prospective_split(n: int) -> int:
    """Number of training weeks: the first ceil(2n/3)."""
    return -(-2 * n // 3)


def prospective_evaluate(X, y, grid=None, *, grid_size=DEFAULT_GRID_SIZE, min_ratio=DEFAULT_MIN_RATIO,
                         participant_id="", week_starts=()) -> EvalReport:
    """Train on the earliest two thirds (rows must be in time order), test on the rest."""
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    n = len(y)
    if n < MIN_WEEKS:
        raise InsufficientDataError(f"needs at least {MIN_WEEKS} labelled weeks, got {n}")
    n_train = prospective_split(n)
    if n_train >= n:
        raise InsufficientDataError("empty test split")
    Xtr, ytr = X[:n_train], y[:n_train]
    grid = lambda_grid(Xtr, ytr, grid_size, min_ratio) if grid is None else np.asarray(grid, float)
    preds, _ = loo_predictions(Xtr, ytr, grid)
    mse = ((preds - ytr[None, :]) ** 2).mean(axis=1)
    lam = grid[_pick(grid, mse)]
    params, fit = fit_fold(Xtr, ytr, lam)
    pred = predict(params, fit, X[n_train:])
    active = np.full(n - n_train, len(fit.active_set))
    return make_report("prospective", lam, y[n_train:], pred, active, participant_id,
                       list(week_starts)[n_train:])


# -- participant / cohort level --------------------------------------------------

def design(rows: list[FeatureRow]) -> tuple[np.ndarray, np.ndarray, list]:
    rows = sorted(rows, key=lambda r: r.week_start_ms)
    X = np.array([r.as_array() for r in rows]).reshape(len(rows), len(FEATURE_NAMES))
    y = np.array([r.qids for r in rows], dtype=float)
    return X, y, [r.week_start for r in rows]


def evaluate_participant(rows: list[FeatureRow], mode: str = "loo", *, grid_size=DEFAULT_GRID_SIZE,
                         min_ratio=DEFAULT_MIN_RATIO, features=FEATURE_NAMES) -> EvalReport:
    rows = [r for r in rows if r.qids is not None]
    if len(rows) < MIN_WEEKS:
        raise InsufficientDataError(f"needs at least {MIN_WEEKS} labelled weeks, got {len(rows)}")
    X, y, starts = design(rows)
    cols = [FEATURE_NAMES.index(f) for f in features]
    X = X[:, cols]
    pid = rows[0].participant_id
    if mode == "loo":
        return loo_evaluate(X, y, grid_size=grid_size, min_ratio=min_ratio, participant_id=pid, week_starts=starts)
    if mode == "prospective":
        return prospective_evaluate(X, y, grid_size=grid_size, min_ratio=min_ratio, participant_id=pid,
                                    week_starts=starts)
    raise ValueError(f"unknown mode {mode!r}")


SUMMARY_METRICS = ("rmse", "mae", "pearson_rho", "n_features", "accuracy", "sensitivity", "specificity")


def cohort_summary(reports: list[EvalReport]) -> dict:
    """Mean and sample std across participants, undefined values left out."""
    out = {"n_participants": len(reports)}
    for name in SUMMARY_METRICS:
        vals = [r.to_dict()[name] for r in reports]
        vals = [v for v in vals if v is not None and not math.isnan(v)]
        if vals:
            std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
            out[name] = {"mean": float(np.mean(vals)), "std": std, "n": len(vals)}
        else:
            out[name] = {"mean": None, "std": None, "n": 0}
    return out
