"""Compiled inner loops for the two-state recursions.

All arrays are float64. ``log_a[t]`` is the log transition matrix used to move
into epoch ``t`` (row = source state); ``log_a[0]`` is never read.
``log_b[t]`` holds log emission densities, zero for missing epochs.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _logsumexp(v):
    m = -np.inf
    for x in v:
        if x > m:
            m = x
    if m == -np.inf:
        return -np.inf
    s = 0.0
    for x in v:
        s += np.exp(x - m)
    return m + np.log(s)


@njit(cache=True)
def forward_backward_log(log_pi, log_a, log_b):
    T, m = log_b.shape
    la = np.empty((T, m))
    lb = np.empty((T, m))
    tmp = np.empty(m)
    for j in range(m):
        la[0, j] = log_pi[j] + log_b[0, j]
    for t in range(1, T):
        for j in range(m):
            for i in range(m):
                tmp[i] = la[t - 1, i] + log_a[t, i, j]
            la[t, j] = _logsumexp(tmp) + log_b[t, j]
    for i in range(m):
        lb[T - 1, i] = 0.0
    for t in range(T - 2, -1, -1):
        for i in range(m):
            for j in range(m):
                tmp[j] = log_a[t + 1, i, j] + log_b[t + 1, j] + lb[t + 1, j]
            lb[t, i] = _logsumexp(tmp)
    loglik = _logsumexp(la[T - 1])

    gamma = np.empty((T, m))
    for t in range(T):
        for i in range(m):
            tmp[i] = la[t, i] + lb[t, i]
        norm = _logsumexp(tmp)
        for i in range(m):
            gamma[t, i] = np.exp(tmp[i] - norm)

    xi = np.zeros((max(T - 1, 0), m, m))
    pair = np.empty(m * m)
    for t in range(T - 1):
        for i in range(m):
            for j in range(m):
                pair[i * m + j] = (la[t, i] + log_a[t + 1, i, j]
                                   + log_b[t + 1, j] + lb[t + 1, j])
        norm = _logsumexp(pair)
        for i in range(m):
            for j in range(m):
                xi[t, i, j] = np.exp(pair[i * m + j] - norm)
    return loglik, gamma, xi


@njit(cache=True)
def viterbi_log(log_pi, log_a, log_b):
    T, m = log_b.shape
    delta = np.empty((T, m))
    psi = np.zeros((T, m), dtype=np.int64)
    for j in range(m):
        delta[0, j] = log_pi[j] + log_b[0, j]
    for t in range(1, T):
        for j in range(m):
            best = -np.inf
            arg = 0
            for i in range(m):
                v = delta[t - 1, i] + log_a[t, i, j]
                # strict comparison keeps the lowest index on ties
                if v > best:
                    best = v
                    arg = i
            delta[t, j] = best + log_b[t, j]
            psi[t, j] = arg
    path = np.empty(T, dtype=np.int64)
    best = -np.inf
    arg = 0
    for j in range(m):
        if delta[T - 1, j] > best:
            best = delta[T - 1, j]
            arg = j
    path[T - 1] = arg
    for t in range(T - 1, 0, -1):
        path[t - 1] = psi[t, path[t]]
    return path, best


@njit(cache=True)
def lasso_cd(gram, xty, beta, lam, tol, max_sweeps):
    """Covariance-form coordinate descent on centred data.

    Minimises 0.5 b'Gb - c'b + lam*|b|_1 where ``gram`` = X'X/n and
    ``xty`` = X'(y - ybar)/n.
    """
    p = gram.shape[0]
    sweeps = 0
    while sweeps < max_sweeps:
        sweeps += 1
        max_delta = 0.0
        for j in range(p):
            gjj = gram[j, j]
            if gjj <= 0.0:
                continue
            rho = xty[j]
            for k in range(p):
                if k != j:
                    rho -= gram[j, k] * beta[k]
            if rho > lam:
                new = (rho - lam) / gjj
            elif rho < -lam:
                new = (rho + lam) / gjj
            else:
                new = 0.0
            d = abs(new - beta[j])
            if d > max_delta:
                max_delta = d
            beta[j] = new
        if max_delta < tol:
            return beta, sweeps, True
    return beta, sweeps, False
