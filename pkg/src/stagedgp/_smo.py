"""Compiled SMO kernels for the box-constrained SVC dual.

    min 0.5 a'Qa - 1'a   s.t.  y'a = 0,  0 <= a_i <= C,   Q_ij = y_i y_j K_ij

Working-set selection uses second-order information (WSS2).
Points with ``active[i] == False`` are frozen at zero and ignored, which lets
the leave-one-out loop reuse one Gram matrix.
"""

import numpy as np
from numba import njit

TAU = 1e-12


@njit(cache=True)
def _select(K, y, alpha, grad, active, C, eps):
    n = y.shape[0]
    gmax = -np.inf
    i = -1
    for t in range(n):
        if not active[t]:
            continue
        if y[t] > 0:
            if alpha[t] < C and -grad[t] >= gmax:
                gmax = -grad[t]
                i = t
        else:
            if alpha[t] > 0 and grad[t] >= gmax:
                gmax = grad[t]
                i = t
    gmin = np.inf
    j = -1
    obj_min = np.inf
    for t in range(n):
        if not active[t]:
            continue
        in_low = (y[t] > 0 and alpha[t] > 0) or (y[t] < 0 and alpha[t] < C)
        if not in_low:
            continue
        v = -y[t] * grad[t]
        if v < gmin:
            gmin = v
        if i >= 0:
            b = gmax - v
            if b > 0:
                a = K[i, i] + K[t, t] - 2.0 * K[i, t]
                if a <= 0:
                    a = TAU
                cand = -(b * b) / a
                if cand <= obj_min:
                    obj_min = cand
                    j = t
    return i, j, gmax - gmin


@njit(cache=True)
def solve(K, y, C, alpha, grad, active, eps, max_iter):
    """Run SMO in place on ``alpha``/``grad``; returns (iterations, final KKT gap)."""
    n = y.shape[0]
    it = 0
    gap = np.inf
    while it < max_iter:
        i, j, gap = _select(K, y, alpha, grad, active, C, eps)
        if i < 0 or j < 0 or gap < eps:
            break
        it += 1
        Kii = K[i, i]
        Kjj = K[j, j]
        Kij = K[i, j]
        old_ai = alpha[i]
        old_aj = alpha[j]
        if y[i] != y[j]:
            quad = Kii + Kjj - 2.0 * Kij
            if quad <= 0:
                quad = TAU
            delta = (-grad[i] - grad[j]) / quad
            diff = alpha[i] - alpha[j]
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j] = 0.0
                    alpha[i] = diff
            else:
                if alpha[i] < 0:
                    alpha[i] = 0.0
                    alpha[j] = -diff
            if diff > 0:
                if alpha[i] > C:
                    alpha[i] = C
                    alpha[j] = C - diff
            else:
                if alpha[j] > C:
                    alpha[j] = C
                    alpha[i] = C + diff
        else:
            quad = Kii + Kjj - 2.0 * Kij
            if quad <= 0:
                quad = TAU
            delta = (grad[i] - grad[j]) / quad
            total = alpha[i] + alpha[j]
            alpha[i] -= delta
            alpha[j] += delta
            if total > C:
                if alpha[i] > C:
                    alpha[i] = C
                    alpha[j] = total - C
            else:
                if alpha[j] < 0:
                    alpha[j] = 0.0
                    alpha[i] = total
            if total > C:
                if alpha[j] > C:
                    alpha[j] = C
                    alpha[i] = total - C
            else:
                if alpha[i] < 0:
                    alpha[i] = 0.0
                    alpha[j] = total
        dai = alpha[i] - old_ai
        daj = alpha[j] - old_aj
        for t in range(n):
            if active[t]:
                grad[t] += y[t] * (y[i] * K[t, i] * dai + y[j] * K[t, j] * daj)
    return it, gap


@njit(cache=True)
def rho(y, C, alpha, grad, active):
    """Offset rho such that the decision function is sum_i a_i y_i K(x_i, x) - rho."""
    n = y.shape[0]
    ub = np.inf
    lb = -np.inf
    s = 0.0
    nfree = 0
    for t in range(n):
        if not active[t]:
            continue
        yg = y[t] * grad[t]
        if alpha[t] >= C:
            if y[t] < 0:
                ub = min(ub, yg)
            else:
                lb = max(lb, yg)
        elif alpha[t] <= 0:
            if y[t] > 0:
                ub = min(ub, yg)
            else:
                lb = max(lb, yg)
        else:
            s += yg
            nfree += 1
    if nfree > 0:
        return s / nfree
    return 0.5 * (ub + lb)


@njit(cache=True)
def gradient(K, y, alpha, active):
    n = y.shape[0]
    g = np.empty(n)
    for t in range(n):
        acc = 0.0
        if active[t]:
            for s in range(n):
                if active[s] and alpha[s] != 0.0:
                    acc += y[t] * y[s] * K[t, s] * alpha[s]
        g[t] = acc - 1.0
    return g


@njit(cache=True)
def loo_errors(K, y, C, alpha, eps, max_iter):
    """Exact leave-one-out misclassification count, given the full-data solution.

    A point with zero multiplier leaves the solution unchanged when removed,
    so only support vectors are retrained (warm-started from ``alpha``).
    Returns (errors, failures) where failures counts non-converged retrainings.
    """
    n = y.shape[0]
    active = np.ones(n, dtype=np.bool_)
    grad = gradient(K, y, alpha, active)
    r = rho(y, C, alpha, grad, active)
    errors = 0
    failures = 0
    for k in range(n):
        if alpha[k] <= 0.0:
            f = -r
            for s in range(n):
                if alpha[s] != 0.0:
                    f += alpha[s] * y[s] * K[s, k]
            if y[k] * f <= 0:
                errors += 1
            continue
        a = alpha.copy()
        remaining = a[k]
        a[k] = 0.0
        active[k] = False
        # restore y'a = 0 using the most correlated points first: shrink
        # opposite-label multipliers, then grow same-label ones
        order = np.argsort(-K[k])
        for s in order:
            if remaining <= 0:
                break
            if active[s] and y[s] != y[k] and a[s] > 0:
                take = min(a[s], remaining)
                a[s] -= take
                remaining -= take
        for s in order:
            if remaining <= 0:
                break
            if active[s] and y[s] == y[k] and a[s] < C:
                give = min(C - a[s], remaining)
                a[s] += give
                remaining -= give
        g = grad.copy()
        for s in range(n):
            da = a[s] - alpha[s]
            if da != 0.0:
                for t in range(n):
                    g[t] += y[t] * y[s] * K[t, s] * da
        it, gap = solve(K, y, C, a, g, active, eps, max_iter)
        if it >= max_iter:
            failures += 1
        rr = rho(y, C, a, g, active)
        f = -rr
        for s in range(n):
            if active[s] and a[s] != 0.0:
                f += a[s] * y[s] * K[s, k]
        if y[k] * f <= 0:
            errors += 1
        active[k] = True
    return errors, failures
