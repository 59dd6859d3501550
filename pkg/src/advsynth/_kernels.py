"""Compiled inner loops for the convolution and activation hot paths.

Everything here is a plain array-in, array-out kernel with an exact numpy
fallback in tensor.py; importing this module requires numba.  Kernels are
written as explicit loops because the corresponding numpy formulations
spend most of their time gathering tiny non-contiguous inner blocks.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def im2col(xp, kh, kw, stride, oh, ow):
    """Patch matrix of a padded NHWC input: (n*oh*ow, kh*kw*c)."""
    n, hp, wp, c = xp.shape
    cols = np.empty((n * oh * ow, kh * kw * c), dtype=xp.dtype)
    row = 0
    for b in range(n):
        for y in range(oh):
            ys = y * stride
            for x in range(ow):
                xs = x * stride
                k = 0
                for i in range(kh):
                    for j in range(kw):
                        src = xp[b, ys + i, xs + j]
                        for ch in range(c):
                            cols[row, k + ch] = src[ch]
                        k += c
                row += 1
    return cols


@njit(cache=True)
def col2im(dcols, n, oh, ow, kh, kw, stride, c, pt, pl, h, w):
    """Adjoint of im2col: scatter-add patch rows onto the unpadded grid.

    Contributions landing inside the padding margin (pt rows / pl columns,
    and anything past h / w) are dropped, matching crop-after-scatter.
    """
    dx = np.zeros((n, h, w, c), dtype=dcols.dtype)
    row = 0
    for b in range(n):
        for y in range(oh):
            ys = y * stride - pt
            for x in range(ow):
                xs = x * stride - pl
                k = 0
                for i in range(kh):
                    u = ys + i
                    if 0 <= u < h:
                        for j in range(kw):
                            v = xs + j
                            if 0 <= v < w:
                                dst = dx[b, u, v]
                                src = k + j * c
                                for ch in range(c):
                                    dst[ch] += dcols[row, src + ch]
                    k += kw * c
                row += 1
    return dx


@njit(cache=True)
def bn_train_forward(d2, gamma, beta, eps):
    """Batch-normalize a (rows, channels) view; stats accumulate in float64.

    Returns (out, mu, var, inv, xhat); mu/var are in the input dtype for the
    running-moment update, inv/xhat feed the backward pass.
    """
    M, c = d2.shape
    s1 = np.zeros(c, dtype=np.float64)
    s2 = np.zeros(c, dtype=np.float64)
    for r in range(M):
        for ch in range(c):
            v = np.float64(d2[r, ch])
            s1[ch] += v
            s2[ch] += v * v
    mu = np.empty(c, dtype=d2.dtype)
    var = np.empty(c, dtype=d2.dtype)
    inv = np.empty(c, dtype=d2.dtype)
    for ch in range(c):
        m_ = s1[ch] / M
        vv = s2[ch] / M - m_ * m_
        if vv < 0.0:
            vv = 0.0
        mu[ch] = m_
        var[ch] = vv
        inv[ch] = 1.0 / np.sqrt(vv + eps)
    xhat = np.empty_like(d2)
    out = np.empty_like(d2)
    for r in range(M):
        for ch in range(c):
            xh = (d2[r, ch] - mu[ch]) * inv[ch]
            xhat[r, ch] = xh
            out[r, ch] = xh * gamma[ch] + beta[ch]
    return out, mu, var, inv, xhat


@njit(cache=True)
def bn_train_backward(g2, xhat, gamma, inv):
    """Input gradient plus per-channel gamma/beta gradients in one sweep.

    Uses sum(g*gamma) == gamma*sum(g) per channel, so only the dgamma/dbeta
    accumulation pass is needed before the dx write.
    """
    M, c = g2.shape
    acc_g = np.zeros(c, dtype=np.float64)
    acc_b = np.zeros(c, dtype=np.float64)
    for r in range(M):
        for ch in range(c):
            gv = np.float64(g2[r, ch])
            acc_g[ch] += gv * xhat[r, ch]
            acc_b[ch] += gv
    a = np.empty(c, dtype=g2.dtype)
    t1 = np.empty(c, dtype=g2.dtype)
    t2 = np.empty(c, dtype=g2.dtype)
    dgamma = np.empty(c, dtype=g2.dtype)
    dbeta = np.empty(c, dtype=g2.dtype)
    for ch in range(c):
        dgamma[ch] = acc_g[ch]
        dbeta[ch] = acc_b[ch]
        a[ch] = gamma[ch] * inv[ch]
        t1[ch] = acc_b[ch] / M
        t2[ch] = acc_g[ch] / M
    dx = np.empty_like(g2)
    for r in range(M):
        for ch in range(c):
            dx[r, ch] = a[ch] * (g2[r, ch] - t1[ch] - xhat[r, ch] * t2[ch])
    return dx, dgamma, dbeta


@njit(cache=True)
def sinkhorn_backward(C, plan, Brow, Bcol, gd, inv_reg):
    """Cotangent of <P, C> through every stored iteration; returns dC."""
    n, m = C.shape
    iters = Brow.shape[0]
    dChat = np.empty((n, m), dtype=C.dtype)
    df = np.zeros(n, dtype=C.dtype)
    dg = np.zeros(m, dtype=C.dtype)
    for i in range(n):
        for j in range(m):
            v = gd * C[i, j] * plan[i, j]
            dChat[i, j] = -v
            df[i] += v
            dg[j] += v
    for t in range(iters - 1, -1, -1):
        for i in range(n):
            acc = 0.0
            for j in range(m):
                w = Bcol[t, i, j] * dg[j]
                dChat[i, j] += w
                acc += w
            df[i] -= acc
        for j in range(m):
            dg[j] = 0.0
        for i in range(n):
            fi = df[i]
            for j in range(m):
                b = Brow[t, i, j]
                dChat[i, j] += b * fi
                dg[j] -= b * fi
        for i in range(n):
            df[i] = 0.0
    dC = np.empty((n, m), dtype=C.dtype)
    for i in range(n):
        for j in range(m):
            dC[i, j] = gd * plan[i, j] + dChat[i, j] * inv_reg
    return dC


@njit(cache=True)
def pad2d(x, pt, pb, pl, pr):
    """Zero-pad NHWC spatially; row-contiguous copies only."""
    n, h, w, c = x.shape
    out = np.zeros((n, h + pt + pb, w + pl + pr, c), dtype=x.dtype)
    for b in range(n):
        for i in range(h):
            out[b, i + pt, pl : pl + w] = x[b, i]
    return out


@njit(cache=True)
def sink_row_pre(Chat, g, M, mx):
    """M = g[None, :] - Chat shifted by its row maxima (kept in mx)."""
    n, m = Chat.shape
    for i in range(n):
        best = g[0] - Chat[i, 0]
        for j in range(m):
            v = g[j] - Chat[i, j]
            M[i, j] = v
            best = max(best, v)
        mx[i] = best
        for j in range(m):
            M[i, j] -= best
    return M


@njit(cache=True)
def sink_row_post(E, mx, logw, B, store):
    """Row potentials from exp'd shifted scores; normalized rows into B."""
    n, m = E.shape
    f = np.empty(n, dtype=E.dtype)
    for i in range(n):
        s = 0.0
        for j in range(m):
            s += E[i, j]
        if store:
            inv = 1.0 / s
            for j in range(m):
                B[i, j] = E[i, j] * inv
        f[i] = logw - (np.log(s) + mx[i])
    return f


@njit(cache=True)
def sink_col_pre(Chat, f, M, mx):
    """M = f[:, None] - Chat shifted by its column maxima (kept in mx)."""
    n, m = Chat.shape
    for j in range(m):
        mx[j] = f[0] - Chat[0, j]
    for i in range(n):
        fi = f[i]
        for j in range(m):
            v = fi - Chat[i, j]
            M[i, j] = v
            mx[j] = max(mx[j], v)
    for i in range(n):
        for j in range(m):
            M[i, j] -= mx[j]
    return M


@njit(cache=True)
def sink_col_post(E, mx, logw, B, store):
    """Column potentials from exp'd shifted scores; normalized columns into B."""
    n, m = E.shape
    s = np.zeros(m, dtype=np.float64)
    for i in range(n):
        for j in range(m):
            s[j] += E[i, j]
    g = np.empty(m, dtype=E.dtype)
    inv = np.empty(m, dtype=np.float64)
    for j in range(m):
        inv[j] = 1.0 / s[j]
        g[j] = logw - (np.log(s[j]) + mx[j])
    if store:
        for i in range(n):
            for j in range(m):
                B[i, j] = E[i, j] * inv[j]
    return g


@njit(cache=True)
def leaky_forward(x, leak):
    out = np.empty_like(x)
    for i in range(x.size):
        v = x[i]
        out[i] = v if v > 0 else v * leak
    return out


@njit(cache=True)
def leaky_backward(x, g, leak):
    out = np.empty_like(g)
    for i in range(x.size):
        out[i] = g[i] if x[i] > 0 else g[i] * leak
    return out
