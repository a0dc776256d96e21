"""Numba loops for the hot paths of :mod:`htrner.net`.

Each kernel has a plain numpy counterpart in ``net`` (``batchnorm_forward``,
``maxpool_forward``, ...) that the tests use as reference.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def masked_moments(z, widths):
    """Per-channel mean and biased variance over columns ``< widths[n]`` of NHWC ``z``."""
    N, H, W, C = z.shape
    s = np.zeros(C)
    count = 0
    for n in range(N):
        count += H * widths[n]
        for h in range(H):
            for w in range(widths[n]):
                for c in range(C):
                    s[c] += z[n, h, w, c]
    mean = s / count
    v = np.zeros(C)
    for n in range(N):
        for h in range(H):
            for w in range(widths[n]):
                for c in range(C):
                    d = z[n, h, w, c] - mean[c]
                    v[c] += d * d
    return mean, v / count, count


@njit(cache=True)
def bn_act_pool_forward(z, widths, mean, inv_std, scale, shift, slope, thr, ph, pw):
    """Normalise, leaky-ReLU and max-pool in one pass.

    Returns the pooled map (padded columns zeroed) and the within-window
    index of each maximum (first one on ties).
    """
    N, H, W, C = z.shape
    Ho, Wo = H // ph, W // pw
    out = np.zeros((N, Ho, Wo, C))
    arg = np.zeros((N, Ho, Wo, C), dtype=np.int8)
    a = scale * inv_std
    b = shift - mean * a
    best = np.empty(C)
    for n in range(N):
        wo_valid = widths[n] // pw
        for i in range(Ho):
            for j in range(wo_valid):
                for c in range(C):
                    best[c] = -np.inf
                k = 0
                for di in range(ph):
                    for dj in range(pw):
                        for c in range(C):
                            y = z[n, i * ph + di, j * pw + dj, c] * a[c] + b[c]
                            v = y if y > thr else slope * y
                            if v > best[c]:
                                best[c] = v
                                arg[n, i, j, c] = k
                        k += 1
                for c in range(C):
                    out[n, i, j, c] = best[c]
    return out, arg


@njit(cache=True)
def bn_act_pool_backward(dout, arg, z, widths, mean, inv_std, scale, shift, slope, thr, ph, pw, train, count):
    """Gradient of :func:`bn_act_pool_forward` w.r.t. ``z``, ``scale`` and ``shift``.

    In train mode ``mean``/``inv_std`` are batch statistics and their
    dependence on ``z`` is included.
    """
    N, H, W, C = z.shape
    Ho = dout.shape[1]
    dz = np.zeros((N, H, W, C))
    dscale = np.zeros(C)
    dshift = np.zeros(C)
    for n in range(N):
        wo_valid = widths[n] // pw
        for i in range(Ho):
            for j in range(wo_valid):
                for c in range(C):
                    g = dout[n, i, j, c]
                    if g == 0.0:
                        continue
                    k = arg[n, i, j, c]
                    r = i * ph + k // pw
                    q = j * pw + k % pw
                    xh = (z[n, r, q, c] - mean[c]) * inv_std[c]
                    y = xh * scale[c] + shift[c]
                    dy = g if y > thr else slope * g
                    dz[n, r, q, c] = dy
                    dshift[c] += dy
                    dscale[c] += dy * xh
    k_c = scale * inv_std
    if train:
        m_shift = dshift / count
        m_scale = dscale / count
        for n in range(N):
            for h in range(H):
                for w in range(widths[n]):
                    for c in range(C):
                        xh = (z[n, h, w, c] - mean[c]) * inv_std[c]
                        dz[n, h, w, c] = k_c[c] * (dz[n, h, w, c] - m_shift[c] - xh * m_scale[c])
    else:
        for n in range(N):
            for h in range(H):
                for w in range(widths[n]):
                    for c in range(C):
                        dz[n, h, w, c] *= k_c[c]
    return dz, dscale, dshift


@njit(cache=True)
def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True)
def lstm_recurrence(pre, w_hh_t):
    """Run the LSTM cell over precomputed input projections ``pre`` (T, N, 4H)."""
    T, N, G = pre.shape
    H = G // 4
    acts = np.empty((T, N, G))
    cs = np.empty((T, N, H))
    tcs = np.empty((T, N, H))
    hs = np.empty((T, N, H))
    h = np.zeros((N, H))
    c = np.zeros((N, H))
    for t in range(T):
        g = pre[t] + h @ w_hh_t
        for n in range(N):
            for k in range(H):
                ii = _sigmoid(g[n, k])
                ff = _sigmoid(g[n, H + k])
                gg = math.tanh(g[n, 2 * H + k])
                oo = _sigmoid(g[n, 3 * H + k])
                acts[t, n, k] = ii
                acts[t, n, H + k] = ff
                acts[t, n, 2 * H + k] = gg
                acts[t, n, 3 * H + k] = oo
                cc = ff * c[n, k] + ii * gg
                c[n, k] = cc
                cs[t, n, k] = cc
                tc = math.tanh(cc)
                tcs[t, n, k] = tc
                h[n, k] = oo * tc
                hs[t, n, k] = oo * tc
    return acts, cs, tcs, hs


@njit(cache=True)
def lstm_recurrence_backward(dhs, acts, cs, tcs, w_hh):
    """Gradient w.r.t. the pre-activations of :func:`lstm_recurrence`."""
    T, N, H = dhs.shape
    dpre = np.empty((T, N, 4 * H))
    dh_next = np.zeros((N, H))
    dc_next = np.zeros((N, H))
    for t in range(T - 1, -1, -1):
        for n in range(N):
            for k in range(H):
                ii = acts[t, n, k]
                ff = acts[t, n, H + k]
                gg = acts[t, n, 2 * H + k]
                oo = acts[t, n, 3 * H + k]
                tc = tcs[t, n, k]
                dh = dhs[t, n, k] + dh_next[n, k]
                dc = dh * oo * (1.0 - tc * tc) + dc_next[n, k]
                cp = cs[t - 1, n, k] if t > 0 else 0.0
                dpre[t, n, k] = dc * gg * ii * (1.0 - ii)
                dpre[t, n, H + k] = dc * cp * ff * (1.0 - ff)
                dpre[t, n, 2 * H + k] = dc * ii * (1.0 - gg * gg)
                dpre[t, n, 3 * H + k] = dh * tc * oo * (1.0 - oo)
                dc_next[n, k] = dc * ff
        dh_next = dpre[t] @ w_hh
    return dpre
