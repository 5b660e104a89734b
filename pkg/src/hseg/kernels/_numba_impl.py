"""numba versions of the hot kernels.

Every prange iteration owns a disjoint slice of the output and walks its inner
loops in a fixed order, so results do not depend on the thread count.
"""
import math

import numpy as np
from numba import njit, prange


@njit(cache=True, parallel=True)
def depthwise_forward(xp, w, stride, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    k = w.shape[2]
    out = np.zeros((n, c, ho, wo), dtype=xp.dtype)
    for nc in prange(n * c):
        b = nc // c
        ch = nc % c
        # tap loops outermost so the x loop is a contiguous axpy
        for i in range(k):
            for j in range(k):
                wij = w[ch, i, j]
                for y in range(ho):
                    row = xp[b, ch, y * stride + i]
                    dst = out[b, ch, y]
                    for x in range(wo):
                        dst[x] += wij * row[x * stride + j]
    return out


@njit(cache=True, parallel=True)
def depthwise_backward(xp, w, g, stride):
    n, c = xp.shape[0], xp.shape[1]
    ho, wo = g.shape[2], g.shape[3]
    k = w.shape[2]
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for ch in prange(c):
        for b in range(n):
            for i in range(k):
                for j in range(k):
                    wij = w[ch, i, j]
                    acc = xp.dtype.type(0)
                    for y in range(ho):
                        row = xp[b, ch, y * stride + i]
                        grow = gxp[b, ch, y * stride + i]
                        gy = g[b, ch, y]
                        for x in range(wo):
                            acc += gy[x] * row[x * stride + j]
                            grow[x * stride + j] += gy[x] * wij
                    gw[ch, i, j] += acc
    return gxp, gw


@njit(cache=True, parallel=True)
def deform_im2col(x, offset, mask, k, stride, pad):
    n, c, h, w = x.shape
    ho, wo = offset.shape[2], offset.shape[3]
    kk = k * k
    cols = np.zeros((n, c, kk, ho, wo), dtype=x.dtype)
    for bt in prange(n * kk):
        b = bt // kk
        t = bt % kk
        ki = t // k
        kj = t % k
        for y in range(ho):
            for xo in range(wo):
                py = y * stride - pad + ki + offset[b, 2 * t, y, xo]
                px = xo * stride - pad + kj + offset[b, 2 * t + 1, y, xo]
                fy = math.floor(py)
                fx = math.floor(px)
                ly = py - fy
                lx = px - fx
                y0 = int(fy)
                x0 = int(fx)
                m = mask[b, t, y, xo]
                for ch in range(c):
                    v = x.dtype.type(0)
                    if 0 <= y0 < h and 0 <= x0 < w:
                        v += (1 - ly) * (1 - lx) * x[b, ch, y0, x0]
                    if 0 <= y0 < h and 0 <= x0 + 1 < w:
                        v += (1 - ly) * lx * x[b, ch, y0, x0 + 1]
                    if 0 <= y0 + 1 < h and 0 <= x0 < w:
                        v += ly * (1 - lx) * x[b, ch, y0 + 1, x0]
                    if 0 <= y0 + 1 < h and 0 <= x0 + 1 < w:
                        v += ly * lx * x[b, ch, y0 + 1, x0 + 1]
                    cols[b, ch, t, y, xo] = v * m
    return cols


@njit(cache=True, parallel=True)
def deform_col2im(x, offset, mask, gcols, k, stride, pad):
    n, c, h, w = x.shape
    ho, wo = offset.shape[2], offset.shape[3]
    kk = k * k
    gx = np.zeros_like(x)
    goff = np.zeros_like(offset)
    gmask = np.zeros_like(mask)
    # one batch image per worker: the scatter into gx stays inside that image
    for b in prange(n):
        for t in range(kk):
            ki = t // k
            kj = t % k
            for y in range(ho):
                for xo in range(wo):
                    py = y * stride - pad + ki + offset[b, 2 * t, y, xo]
                    px = xo * stride - pad + kj + offset[b, 2 * t + 1, y, xo]
                    fy = math.floor(py)
                    fx = math.floor(px)
                    ly = py - fy
                    lx = px - fx
                    hy = 1 - ly
                    hx = 1 - lx
                    y0 = int(fy)
                    x0 = int(fx)
                    m = mask[b, t, y, xo]
                    ok00 = 0 <= y0 < h and 0 <= x0 < w
                    ok01 = 0 <= y0 < h and 0 <= x0 + 1 < w
                    ok10 = 0 <= y0 + 1 < h and 0 <= x0 < w
                    ok11 = 0 <= y0 + 1 < h and 0 <= x0 + 1 < w
                    acc_m = x.dtype.type(0)
                    acc_y = x.dtype.type(0)
                    acc_x = x.dtype.type(0)
                    for ch in range(c):
                        g = gcols[b, ch, t, y, xo]
                        v00 = x[b, ch, y0, x0] if ok00 else 0
                        v01 = x[b, ch, y0, x0 + 1] if ok01 else 0
                        v10 = x[b, ch, y0 + 1, x0] if ok10 else 0
                        v11 = x[b, ch, y0 + 1, x0 + 1] if ok11 else 0
                        val = hy * hx * v00 + hy * lx * v01 + ly * hx * v10 + ly * lx * v11
                        acc_m += g * val
                        gm = g * m
                        acc_y += gm * (-hx * v00 - lx * v01 + hx * v10 + lx * v11)
                        acc_x += gm * (-hy * v00 + hy * v01 - ly * v10 + ly * v11)
                        if ok00:
                            gx[b, ch, y0, x0] += gm * hy * hx
                        if ok01:
                            gx[b, ch, y0, x0 + 1] += gm * hy * lx
                        if ok10:
                            gx[b, ch, y0 + 1, x0] += gm * ly * hx
                        if ok11:
                            gx[b, ch, y0 + 1, x0 + 1] += gm * ly * lx
                    gmask[b, t, y, xo] = acc_m
                    goff[b, 2 * t, y, xo] = acc_y
                    goff[b, 2 * t + 1, y, xo] = acc_x
    return gx, goff, gmask
