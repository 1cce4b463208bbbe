"""Two-state hidden Markov model with 24-hour sinusoidal transition covariates.

State 0 is the inactive state (lower emission mean), state 1 the active one.
Transitions into epoch ``t`` follow a multinomial-logit in the covariate
``X_t = [sin(2 pi h_t / 24), cos(2 pi h_t / 24)]`` with ``h_t`` the local clock
hour at the epoch midpoint. The last destination column is the reference
category and its coefficients are pinned at zero.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from . import _kernels
from .ingest import EpochSeries

logger = logging.getLogger(__name__)

N_STATES = 2
INACTIVE, ACTIVE = 0, 1
PERIOD_HOURS = 24.0
VAR_FLOOR = 1e-6


class InsufficientDataError(ValueError):
    pass


class MonotonicityError(RuntimeError):
    """EM log-likelihood decreased: an internal invariant was breached."""


@dataclass(frozen=True)
class TransitionCoeffs:
    c0: np.ndarray  # (m, m) intercepts
    c1: np.ndarray  # (m, m, 2) sine/cosine weights

    def __post_init__(self):
        # subtracting the reference column leaves every softmax row unchanged
        c0 = np.array(self.c0, dtype=float)
        c1 = np.array(self.c1, dtype=float)
        c0 = c0 - c0[:, -1:]
        c1 = c1 - c1[:, -1:, :]
        object.__setattr__(self, "c0", c0)
        object.__setattr__(self, "c1", c1)

    @classmethod
    def zeros(cls, m: int = N_STATES) -> "TransitionCoeffs":
        return cls(np.zeros((m, m)), np.zeros((m, m, 2)))

    def to_vector(self) -> np.ndarray:
        # free parameters only: (m, m-1, 3) = [intercept, sin, cos]
        free = np.concatenate([self.c0[:, :-1, None], self.c1[:, :-1, :]], axis=2)
        return free.ravel()

    @classmethod
    def from_vector(cls, vec: np.ndarray, m: int = N_STATES) -> "TransitionCoeffs":
        free = np.asarray(vec, dtype=float).reshape(m, m - 1, 3)
        c0 = np.zeros((m, m))
        c1 = np.zeros((m, m, 2))
        c0[:, :-1] = free[:, :, 0]
        c1[:, :-1, :] = free[:, :, 1:]
        return cls(c0, c1)


@dataclass(frozen=True)
class TvHmmModel:
    pi: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    coeffs: TransitionCoeffs
    fit_log: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float)
        if np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-12:
            raise ValueError("pi must be a probability vector")
        variances = np.asarray(self.variances, dtype=float)
        if np.any(variances < VAR_FLOOR):
            raise ValueError("variance below floor")
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "means", np.asarray(self.means, dtype=float))
        object.__setattr__(self, "variances", variances)

    @property
    def n_states(self) -> int:
        return len(self.pi)


@dataclass
class PosteriorSet:
    gamma: np.ndarray  # (T, m)
    xi: np.ndarray  # (T-1, m, m)
    loglik: float


@dataclass
class StatePath:
    states: np.ndarray
    log_prob: float = float("nan")
    week_key: tuple | None = None


@dataclass
class DailyProfile:
    epoch_minutes: float
    p_inactive: np.ndarray
    converged: bool = True
    cycles: int = 0
    week_key: tuple | None = None

    @property
    def p_active(self) -> np.ndarray:
        return 1.0 - self.p_inactive

    @property
    def step_hours(self) -> float:
        return self.epoch_minutes / 60.0

    def clock_hours(self) -> np.ndarray:
        """Clock hour at each grid point (epoch midpoints)."""
        return (np.arange(len(self.p_inactive)) + 0.5) * self.step_hours


# -- covariates and link ---------------------------------------------------

def covariates(clock_hours) -> np.ndarray:
    w = 2.0 * np.pi * np.asarray(clock_hours, dtype=float) / PERIOD_HOURS
    return np.stack([np.sin(w), np.cos(w)], axis=-1)


def series_covariates(series: EpochSeries) -> np.ndarray:
    return covariates(series.clock_hours())


def _logits(coeffs: TransitionCoeffs, X: np.ndarray) -> np.ndarray:
    # (T, m, m)
    return coeffs.c0[None, :, :] + np.einsum("ijk,tk->tij", coeffs.c1, X)


def log_transition_matrices(coeffs: TransitionCoeffs, X: np.ndarray) -> np.ndarray:
    z = _logits(coeffs, np.atleast_2d(X))
    z = z - z.max(axis=2, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=2, keepdims=True))


def transition_matrices(coeffs: TransitionCoeffs, X: np.ndarray) -> np.ndarray:
    z = _logits(coeffs, np.atleast_2d(X))
    z = np.exp(z - z.max(axis=2, keepdims=True))
    return z / z.sum(axis=2, keepdims=True)


def transition_matrix(coeffs: TransitionCoeffs, x) -> np.ndarray:
    """Row-stochastic matrix A(t) for a single covariate vector."""
    return transition_matrices(coeffs, np.asarray(x, dtype=float)[None, :])[0]


def shift_phase(model: TvHmmModel, hours: float) -> TvHmmModel:
    """Model whose transition curves are those of ``model`` delayed by ``hours``."""
    theta = 2.0 * np.pi * hours / PERIOD_HOURS
    c, s = np.cos(theta), np.sin(theta)
    # X(h - d) = R X(h) with R = [[c, -s], [s, c]]; c1' = R^T c1
    rot = np.array([[c, -s], [s, c]])
    c1 = np.einsum("ijk,kl->ijl", model.coeffs.c1, rot)
    return replace(model, coeffs=TransitionCoeffs(model.coeffs.c0, c1))


# -- inference ---------------------------------------------------------------

def _safe_log(x) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(x, dtype=float))


def log_emissions(series: EpochSeries, model: TvHmmModel) -> np.ndarray:
    obs = series.values[:, None]
    var = model.variances[None, :]
    out = -0.5 * (np.log(2.0 * np.pi * var) + (obs - model.means[None, :]) ** 2 / var)
    out[series.missing] = 0.0
    return out


def _check_nonempty(series: EpochSeries) -> None:
    if len(series) == 0:
        raise ValueError("empty observation sequence")


def forward_backward(series: EpochSeries, model: TvHmmModel, X: np.ndarray | None = None) -> PosteriorSet:
    """Posterior state and pair probabilities plus log P(O | theta, X)."""
    _check_nonempty(series)
    if X is None:
        X = series_covariates(series)
    log_a = log_transition_matrices(model.coeffs, X)
    log_b = log_emissions(series, model)
    loglik, gamma, xi = _kernels.forward_backward_log(_safe_log(model.pi), log_a, log_b)
    return PosteriorSet(gamma, xi, float(loglik))


def viterbi(series: EpochSeries, model: TvHmmModel, X: np.ndarray | None = None, week_key=None) -> StatePath:
    _check_nonempty(series)
    if X is None:
        X = series_covariates(series)
    log_a = log_transition_matrices(model.coeffs, X)
    log_b = log_emissions(series, model)
    path, best = _kernels.viterbi_log(_safe_log(model.pi), log_a, log_b)
    return StatePath(path.astype(np.int8), float(best), week_key)


# -- transition M-step ---------------------------------------------------------

def transition_objective(coeffs: TransitionCoeffs, xi: np.ndarray, X: np.ndarray) -> float:
    """Expected complete-data transition log-likelihood.

    ``xi[t]`` describes the move into the epoch whose covariate is ``X[t]``.
    """
    log_a = log_transition_matrices(coeffs, X)
    mask = xi > 0
    return float(np.sum(xi[mask] * log_a[mask]))


def _objective_and_grad(vec, xi, Z, m):
    coeffs = TransitionCoeffs.from_vector(vec, m)
    log_a = log_transition_matrices(coeffs, Z[:, 1:])
    mask = xi > 0
    f = np.sum(xi[mask] * log_a[mask])
    a = np.exp(log_a)
    resid = xi - xi.sum(axis=2, keepdims=True) * a  # (T, m, m)
    grad = np.einsum("tij,tk->ijk", resid[:, :, :-1], Z)
    return f, grad.ravel()


def transition_gradient(coeffs: TransitionCoeffs, xi: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the free coefficients, ordered like ``to_vector``."""
    Z = np.column_stack([np.ones(len(X)), X])
    return _objective_and_grad(coeffs.to_vector(), xi, Z, coeffs.c0.shape[0])[1]


@dataclass
class TransitionFit:
    coeffs: TransitionCoeffs
    objective: float
    grad_norm: float
    converged: bool
    iterations: int


def maximize_transition_coeffs(
    xi: np.ndarray,
    X: np.ndarray,
    start: TransitionCoeffs,
    *,
    gtol: float = 1e-6,
    max_iter: int = 500,
) -> TransitionFit:
    """Quasi-Newton (BFGS) ascent of the transition objective."""
    xi = np.asarray(xi, dtype=float)
    if not np.all(np.isfinite(xi)):
        raise ValueError("non-finite xi")
    m = start.c0.shape[0]
    Z = np.column_stack([np.ones(len(X)), X])
    x0 = start.to_vector()
    f0, g0 = _objective_and_grad(x0, xi, Z, m)

    def neg(v):
        f, g = _objective_and_grad(v, xi, Z, m)
        return -f, -g

    res = minimize(neg, x0, jac=True, method="BFGS",
                   options={"gtol": gtol, "norm": np.inf, "maxiter": max_iter})
    x, f, g, nit = res.x, -res.fun, -res.jac, res.nit
    gnorm = float(np.max(np.abs(g))) if len(g) else 0.0
    if gnorm > gtol and np.all(np.isfinite(x)):
        # BFGS can stall on line-search precision; finish with Newton steps
        x, f, gnorm, extra = _newton_polish(x, xi, Z, m, gtol)
        nit += extra
    if not np.isfinite(f) or f < f0:
        x, f, gnorm = x0, f0, float(np.max(np.abs(g0)))
    return TransitionFit(TransitionCoeffs.from_vector(x, m), float(f), gnorm, gnorm <= gtol, nit)


def _hessian(vec, xi, Z, m):
    coeffs = TransitionCoeffs.from_vector(vec, m)
    a = np.exp(log_transition_matrices(coeffs, Z[:, 1:]))
    n = xi.sum(axis=2)  # (T, m)
    k = m - 1
    d = Z.shape[1]
    H = np.zeros((m, k, d, m, k, d))
    for i in range(m):
        for j in range(k):
            for l in range(k):
                w = n[:, i] * a[:, i, j] * ((j == l) - a[:, i, l])
                H[i, j, :, i, l, :] = -np.einsum("t,tp,tq->pq", w, Z, Z)
    size = m * k * d
    return H.reshape(size, size)


def _newton_polish(x, xi, Z, m, gtol, max_steps=25):
    f, g = _objective_and_grad(x, xi, Z, m)
    steps = 0
    for steps in range(1, max_steps + 1):
        if np.max(np.abs(g)) <= gtol:
            break
        H = _hessian(x, xi, Z, m)
        try:
            step = np.linalg.solve(H - 1e-12 * np.eye(len(x)), -g)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        while t > 1e-10:
            fn, gn = _objective_and_grad(x + t * step, xi, Z, m)
            if np.isfinite(fn) and fn >= f:
                break
            t *= 0.5
        else:
            break
        x, f, g = x + t * step, fn, gn
    return x, f, float(np.max(np.abs(g))), steps


# -- EM ----------------------------------------------------------------------

@dataclass(frozen=True)
class EmConfig:
    max_iter: int = 100
    tol: float = 1e-6
    seed: int = 0
    n_restarts: int = 3


def _check_fit_data(series: EpochSeries) -> np.ndarray:
    obs = series.observed()
    if len(series) == 0 or len(obs) < 0.1 * len(series) or len(np.unique(obs)) < 2:
        raise InsufficientDataError("insufficient data for fit")
    return obs


def initial_model(series: EpochSeries) -> TvHmmModel:
    """Median split of the observations gives emissions and hard-state counts."""
    obs = _check_fit_data(series)
    med = np.median(obs)
    strict = bool((obs > med).any())
    upper = obs > med if strict else obs >= med
    lo, hi = obs[~upper], obs[upper]
    means = np.array([lo.mean(), hi.mean()])
    variances = np.maximum([lo.var(), hi.var()], VAR_FLOOR)
    above = series.values > med if strict else series.values >= med
    state = np.where(series.missing, -1, above.astype(int))
    prev, nxt = state[:-1], state[1:]
    both = (prev >= 0) & (nxt >= 0)
    counts = np.ones((N_STATES, N_STATES))
    np.add.at(counts, (prev[both], nxt[both]), 1.0)
    c0 = np.zeros((N_STATES, N_STATES))
    c0[:, 0] = np.log(counts[:, 0]) - np.log(counts[:, 1])
    return TvHmmModel(np.full(N_STATES, 1.0 / N_STATES), means, variances,
                      TransitionCoeffs(c0, np.zeros((N_STATES, N_STATES, 2))))


def _m_step_emissions(series: EpochSeries, gamma: np.ndarray, model: TvHmmModel):
    obs_mask = ~series.missing
    g = gamma[obs_mask]
    o = series.values[obs_mask]
    w = g.sum(axis=0)
    means = model.means.copy()
    variances = model.variances.copy()
    for i in range(model.n_states):
        if w[i] > 1e-10:
            means[i] = g[:, i] @ o / w[i]
            variances[i] = max(g[:, i] @ (o - means[i]) ** 2 / w[i], VAR_FLOOR)
    return means, variances


def _normalised(p):
    p = np.clip(p, 0.0, None)
    return p / p.sum()


def _em_run(series: EpochSeries, X: np.ndarray, model: TvHmmModel, max_iter: int, tol: float):
    trace = []
    converged = False
    transition_flags = []
    for _ in range(max_iter):
        post = forward_backward(series, model, X)
        trace.append(post.loglik)
        if len(trace) >= 2:
            delta = trace[-1] - trace[-2]
            if delta < -1e-8:
                raise MonotonicityError(f"log-likelihood fell by {-delta:.3e}")
            if delta <= tol * abs(trace[-2]):
                converged = True
                break
        means, variances = _m_step_emissions(series, post.gamma, model)
        tfit = maximize_transition_coeffs(post.xi, X[1:], model.coeffs)
        transition_flags.append(tfit.converged)
        model = replace(model, pi=_normalised(post.gamma[0]), means=means,
                        variances=variances, coeffs=tfit.coeffs)
    else:
        post = forward_backward(series, model, X)
        if post.loglik - trace[-1] < -1e-8:
            raise MonotonicityError("log-likelihood fell on the final step")
        trace.append(post.loglik)
    return model, trace, converged, all(transition_flags)


def relabel(model: TvHmmModel) -> TvHmmModel:
    """Order states so that the inactive (lower-mean) state comes first."""
    order = np.argsort(model.means, kind="stable")
    if np.array_equal(order, np.arange(model.n_states)):
        return model
    c0 = model.coeffs.c0[np.ix_(order, order)]
    c1 = model.coeffs.c1[np.ix_(order, order)]
    return replace(model, pi=model.pi[order], means=model.means[order],
                   variances=model.variances[order], coeffs=TransitionCoeffs(c0, c1))


def em_fit(
    series: EpochSeries,
    max_iter: int = 100,
    tol: float = 1e-6,
    seed: int = 0,
    n_restarts: int = 3,
) -> TvHmmModel:
    """Fit by EM over seeded restarts and keep the best log-likelihood."""
    base = initial_model(series)
    X = series_covariates(series)
    best = None
    for r in range(n_restarts):
        start = base
        if r > 0:
            rng = np.random.default_rng(np.random.SeedSequence([seed, r]))
            noise = np.zeros_like(base.coeffs.c0)
            noise[:, :-1] = rng.normal(0.0, 1.0, size=(N_STATES, N_STATES - 1))
            start = replace(base, coeffs=TransitionCoeffs(base.coeffs.c0 + noise, base.coeffs.c1))
        model, trace, converged, inner_ok = _em_run(series, X, start, max_iter, tol)
        logger.debug("restart %d: loglik %.6f after %d iterations", r, trace[-1], len(trace))
        if best is None or trace[-1] > best[1][-1]:
            best = (model, trace, converged, inner_ok, r)
    model, trace, converged, inner_ok, r = best
    meta = {
        "iterations": len(trace),
        "loglik": trace[-1],
        "converged": converged,
        "transition_step_converged": inner_ok,
        "seed": seed,
        "restart": r,
    }
    return replace(relabel(model), fit_log=tuple(trace), meta=meta)


def loglik(series: EpochSeries, model: TvHmmModel) -> float:
    return forward_backward(series, model).loglik


# -- 24-hour profile -------------------------------------------------------------

def _stationary(A: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eig(A.T)
    k = int(np.argmin(np.abs(w - 1.0)))
    p = np.real(v[:, k])
    return p / p.sum()


def profile24(
    model: TvHmmModel,
    epoch_minutes: int = 5,
    *,
    init: str = "uniform",
    tol: float = 1e-8,
    max_cycles: int = 1000,
    week_key=None,
) -> DailyProfile:
    """Periodic fixed point of P(S_t) = sum_i A_ij(t) P(S_{t-1} = i) over a day."""
    n = int(round(24 * 60 / epoch_minutes))
    hours = (np.arange(n) + 0.5) * epoch_minutes / 60.0
    A = transition_matrices(model.coeffs, covariates(hours))
    if init == "uniform":
        p = np.full(model.n_states, 1.0 / model.n_states)
    elif init == "stationary":
        p = _stationary(A[0])
    else:
        raise ValueError(f"unknown init {init!r}")
    prev = None
    converged = False
    cycles = 0
    out = np.empty((n, model.n_states))
    while cycles < max_cycles:
        cycles += 1
        for g in range(n):
            p = p @ A[g]
            out[g] = p
        if prev is not None and np.max(np.abs(out - prev)) < tol:
            converged = True
            break
        prev = out.copy()
    if not converged:
        logger.warning("profile did not converge in %d cycles", max_cycles)
    return DailyProfile(epoch_minutes, np.clip(out[:, INACTIVE], 0.0, 1.0), converged, cycles, week_key)
