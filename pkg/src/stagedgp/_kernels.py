"""Compiled symmetric correlation matrices for likelihood evaluations."""

import math

import numpy as np
from numba import njit

_SQRT5 = math.sqrt(5.0)


@njit(cache=True)
def matern52_sym(X, theta):
    n, m = X.shape
    R = np.empty((n, n))
    for i in range(n):
        R[i, i] = 1.0
        for j in range(i):
            r = 1.0
            for l in range(m):
                h = _SQRT5 * abs(X[i, l] - X[j, l]) / theta[l]
                r *= (1.0 + h + h * h / 3.0) * math.exp(-h)
            R[i, j] = r
            R[j, i] = r
    return R


@njit(cache=True)
def gaussian_sym(X, theta):
    n, m = X.shape
    R = np.empty((n, n))
    for i in range(n):
        R[i, i] = 1.0
        for j in range(i):
            s = 0.0
            for l in range(m):
                d = (X[i, l] - X[j, l]) / theta[l]
                s += d * d
            r = math.exp(-0.5 * s)
            R[i, j] = r
            R[j, i] = r
    return R
