"""Compiled forward/backward loops for the small CNN.

Layout follows channels-last convention: the conv map is (19, 62, 5) and the
flattened pooled vector is indexed ``(row * 20 + col) * 5 + channel``.

Every sample is processed on its own with a fixed loop order and parameter
gradients are accumulated sample by sample, so a sample's contribution never
depends on which other samples share the batch. Samples with a zero upstream
gradient add exact zeros.
"""

import numpy as np
from numba import njit

IN_H, IN_W = 21, 64
KSIZE = 3
N_FILTERS = 5
CONV_H, CONV_W = IN_H - KSIZE + 1, IN_W - KSIZE + 1
POOL = 3
POOL_H, POOL_W = CONV_H // POOL, CONV_W // POOL
N_FLAT = POOL_H * POOL_W * N_FILTERS
N_HIDDEN = 10


@njit(cache=True)
def forward(X, K, bc, W1, b1, w2, b2):
    n = X.shape[0]
    z = np.empty(n)
    flat = np.empty((n, N_FLAT))
    arg = np.empty((n, N_FLAT), dtype=np.int32)
    hpre = np.empty((n, N_HIDDEN))
    conv = np.empty((CONV_H, CONV_W, N_FILTERS))
    for i in range(n):
        for r in range(CONV_H):
            for s in range(CONV_W):
                for c in range(N_FILTERS):
                    acc = bc[c]
                    for a in range(KSIZE):
                        for d in range(KSIZE):
                            acc += K[c, a, d] * X[i, r + a, s + d]
                    conv[r, s, c] = acc
        for pr in range(POOL_H):
            for ps in range(POOL_W):
                for c in range(N_FILTERS):
                    best = -1.0
                    pos = 0
                    for a in range(POOL):
                        for d in range(POOL):
                            r = pr * POOL + a
                            s = ps * POOL + d
                            v = conv[r, s, c]
                            if v < 0.0:
                                v = 0.0
                            if v > best:
                                best = v
                                pos = r * CONV_W + s
                    k = (pr * POOL_W + ps) * N_FILTERS + c
                    flat[i, k] = best
                    arg[i, k] = pos
        out = b2
        for j in range(N_HIDDEN):
            acc = b1[j]
            for k in range(N_FLAT):
                acc += flat[i, k] * W1[k, j]
            hpre[i, j] = acc
            if acc > 0.0:
                out += acc * w2[j]
        z[i] = out
    return z, flat, arg, hpre


@njit(cache=True)
def backward(X, dz, flat, arg, hpre, W1, w2):
    n = X.shape[0]
    gK = np.zeros((N_FILTERS, KSIZE, KSIZE))
    gbc = np.zeros(N_FILTERS)
    gW1 = np.zeros((N_FLAT, N_HIDDEN))
    gb1 = np.zeros(N_HIDDEN)
    gw2 = np.zeros(N_HIDDEN)
    gb2 = 0.0
    dh = np.empty(N_HIDDEN)
    lK = np.empty((N_FILTERS, KSIZE, KSIZE))
    lbc = np.empty(N_FILTERS)
    for i in range(n):
        g = dz[i]
        gb2 += g
        for j in range(N_HIDDEN):
            h = hpre[i, j]
            if h > 0.0:
                gw2[j] += g * h
                dh[j] = g * w2[j]
            else:
                dh[j] = 0.0
            gb1[j] += dh[j]
        for k in range(N_FLAT):
            f = flat[i, k]
            for j in range(N_HIDDEN):
                gW1[k, j] += f * dh[j]
        lK[:] = 0.0
        lbc[:] = 0.0
        for k in range(N_FLAT):
            if flat[i, k] > 0.0:
                gk = 0.0
                for j in range(N_HIDDEN):
                    gk += W1[k, j] * dh[j]
                pos = arg[i, k]
                r = pos // CONV_W
                s = pos % CONV_W
                c = k % N_FILTERS
                lbc[c] += gk
                for a in range(KSIZE):
                    for d in range(KSIZE):
                        lK[c, a, d] += gk * X[i, r + a, s + d]
        for c in range(N_FILTERS):
            gbc[c] += lbc[c]
            for a in range(KSIZE):
                for d in range(KSIZE):
                    gK[c, a, d] += lK[c, a, d]
    return gK, gbc, gW1, gb1, gw2, gb2
