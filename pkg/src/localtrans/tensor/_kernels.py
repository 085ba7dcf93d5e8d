"""Compiled per-channel reductions for batch normalisation on [M, C] rows."""
import numba
import numpy as np
from numba import njit

numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]


@njit(cache=True)
def bn_stats(x):
    m, c = x.shape
    s = np.zeros(c)
    for i in range(m):
        for j in range(c):
            s[j] += x[i, j]
    mu = s / m
    v = np.zeros(c)
    for i in range(m):
        for j in range(c):
            d = x[i, j] - mu[j]
            v[j] += d * d
    return mu, v / m


@njit(cache=True)
def bn_apply(x, mu, inv_std, gamma, beta, xhat, y):
    m, c = x.shape
    for i in range(m):
        for j in range(c):
            t = (x[i, j] - mu[j]) * inv_std[j]
            xhat[i, j] = t
            y[i, j] = t * gamma[j] + beta[j]


@njit(cache=True)
def bn_backward(g, xhat, gamma, inv_std, training, gx):
    m, c = g.shape
    sg = np.zeros(c)
    sgx = np.zeros(c)
    for i in range(m):
        for j in range(c):
            sg[j] += g[i, j]
            sgx[j] += g[i, j] * xhat[i, j]
    if training:
        for i in range(m):
            for j in range(c):
                gx[i, j] = gamma[j] * inv_std[j] * (g[i, j] - (sg[j] + xhat[i, j] * sgx[j]) / m)
    else:
        for i in range(m):
            for j in range(c):
                gx[i, j] = gamma[j] * inv_std[j] * g[i, j]
    return sgx, sg


@njit(cache=True)
def maxpool_forward(x, out, idx):
    # x: [N,H,W,C]; idx records the winning slot (row-major in the 2x2 window, first max wins)
    n_img, h2, w2, c = out.shape
    for n in range(n_img):
        for i in range(h2):
            for j in range(w2):
                for k in range(c):
                    best = x[n, 2 * i, 2 * j, k]
                    slot = 0
                    v = x[n, 2 * i, 2 * j + 1, k]
                    if v > best:
                        best, slot = v, 1
                    v = x[n, 2 * i + 1, 2 * j, k]
                    if v > best:
                        best, slot = v, 2
                    v = x[n, 2 * i + 1, 2 * j + 1, k]
                    if v > best:
                        best, slot = v, 3
                    out[n, i, j, k] = best
                    idx[n, i, j, k] = slot


@njit(cache=True)
def maxpool_backward(g, idx, gx):
    n_img, h2, w2, c = g.shape
    gx[...] = 0.0
    for n in range(n_img):
        for i in range(h2):
            for j in range(w2):
                for k in range(c):
                    s = idx[n, i, j, k]
                    gx[n, 2 * i + s // 2, 2 * j + s % 2, k] = g[n, i, j, k]
