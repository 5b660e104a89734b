"""Pure-numpy versions of the hot kernels. Reference path for the numba ones."""
import numpy as np


def depthwise_forward(xp, w, stride, ho, wo):
    n, c = xp.shape[:2]
    k = w.shape[-1]
    out = np.zeros((n, c, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            out += w[None, :, i, j, None, None] * patch
    return out


def depthwise_backward(xp, w, g, stride):
    ho, wo = g.shape[2:]
    k = w.shape[-1]
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for i in range(k):
        for j in range(k):
            sl = (slice(None), slice(None),
                  slice(i, i + stride * (ho - 1) + 1, stride),
                  slice(j, j + stride * (wo - 1) + 1, stride))
            gw[:, i, j] = np.einsum("nchw,nchw->c", g, xp[sl])
            gxp[sl] += w[None, :, i, j, None, None] * g
    return gxp, gw


def _corners(offset, k, stride, pad, h, w):
    """Sampling geometry for every (n, tap, out_y, out_x)."""
    n, _, ho, wo = offset.shape
    kk = k * k
    off = offset.reshape(n, kk, 2, ho, wo)
    ki = (np.arange(kk) // k).reshape(1, kk, 1, 1)
    kj = (np.arange(kk) % k).reshape(1, kk, 1, 1)
    oy = (np.arange(ho) * stride - pad).reshape(1, 1, ho, 1)
    ox = (np.arange(wo) * stride - pad).reshape(1, 1, 1, wo)
    py = oy + ki + off[:, :, 0]
    px = ox + kj + off[:, :, 1]
    y0 = np.floor(py)
    x0 = np.floor(px)
    ly = py - y0
    lx = px - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yy = y0 + dy
        xx = x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        idx = np.where(valid, yy * w + xx, 0)
        corners.append((idx, valid))
    return ly, lx, corners


def _gather(xf, idx, valid):
    # xf: (C, H*W); idx/valid: (K, Ho, Wo) -> (C, K, Ho, Wo)
    v = xf[:, idx]
    return np.where(valid[None], v, 0)


def deform_im2col(x, offset, mask, k, stride, pad):
    n, c, h, w = x.shape
    ho, wo = offset.shape[2:]
    ly, lx, corners = _corners(offset, k, stride, pad, h, w)
    hy = 1 - ly
    hx = 1 - lx
    weights = (hy * hx, hy * lx, ly * hx, ly * lx)
    cols = np.empty((n, c, k * k, ho, wo), dtype=x.dtype)
    xf = x.reshape(n, c, h * w)
    for b in range(n):
        acc = np.zeros((c, k * k, ho, wo), dtype=x.dtype)
        for (idx, valid), wt in zip(corners, weights):
            acc += wt[b][None].astype(x.dtype) * _gather(xf[b], idx[b], valid[b])
        cols[b] = acc * mask[b][None]
    return cols


def deform_col2im(x, offset, mask, gcols, k, stride, pad):
    n, c, h, w = x.shape
    kk = k * k
    ho, wo = offset.shape[2:]
    ly, lx, corners = _corners(offset, k, stride, pad, h, w)
    hy = 1 - ly
    hx = 1 - lx
    weights = (hy * hx, hy * lx, ly * hx, ly * lx)
    # d(weight)/d(ly), d(weight)/d(lx) for the four corners
    dwy = (-hx, -lx, hx, lx)
    dwx = (-hy, hy, -ly, ly)
    gx = np.zeros((n, c, h * w), dtype=x.dtype)
    goff = np.zeros((n, kk, 2, ho, wo), dtype=x.dtype)
    gmask = np.zeros((n, kk, ho, wo), dtype=x.dtype)
    xf = x.reshape(n, c, h * w)
    chan_base = (np.arange(c) * (h * w)).reshape(c, 1, 1, 1)
    for b in range(n):
        g = gcols[b]
        m = mask[b][None]
        gm = g * m
        val = np.zeros((c, kk, ho, wo), dtype=x.dtype)
        gy = np.zeros((c, kk, ho, wo), dtype=x.dtype)
        gxx = np.zeros((c, kk, ho, wo), dtype=x.dtype)
        for (idx, valid), wt, wy, wx in zip(corners, weights, dwy, dwx):
            v = _gather(xf[b], idx[b], valid[b])
            val += wt[b][None] * v
            gy += wy[b][None] * v
            gxx += wx[b][None] * v
            contrib = np.where(valid[b][None], gm * wt[b][None], 0)
            flat = (chan_base + idx[b][None]).ravel()
            gx[b] += np.bincount(flat, weights=contrib.ravel(), minlength=c * h * w).reshape(c, h * w).astype(x.dtype)
        gmask[b] = np.sum(g * val, axis=0)
        goff[b, :, 0] = np.sum(gm * gy, axis=0)
        goff[b, :, 1] = np.sum(gm * gxx, axis=0)
    return gx.reshape(n, c, h, w), goff.reshape(n, 2 * kk, ho, wo), gmask
