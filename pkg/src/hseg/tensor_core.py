"""Dense 4-D tensors and the primitive differentiable ops.

A tensor here is a plain ``numpy.ndarray`` of shape (N, C, H, W). Model math
runs in float32; gradient checking shadows everything in float64.

Every forward op has a matching ``*_backward`` that takes whatever the forward
returned as cache plus the upstream gradient.
"""
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels

DTYPE = np.float32
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
ACTIVATIONS = ("relu", "h_swish", "sigmoid", "h_sigmoid", "identity")


def as_tensor(x, dtype=None):
    """Validate a 4-D array and return it as a contiguous float array."""
    arr = np.ascontiguousarray(x, dtype=dtype or getattr(x, "dtype", DTYPE))
    if arr.ndim != 4:
        raise ValueError(f"expected a 4-D (N, C, H, W) tensor, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(DTYPE)
    return arr


@dataclass
class ConvWeights:
    kernel: np.ndarray  # (out_ch, in_ch // groups, k, k)
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ValueError(f"kernel must be 4-D, got shape {self.kernel.shape}")
        if self.kernel.shape[2] != self.kernel.shape[3]:
            raise ValueError(f"only square kernels are supported, got {self.kernel.shape[2:]}")
        if self.stride < 1 or self.padding < 0 or self.groups < 1:
            raise ValueError(f"bad conv geometry stride={self.stride} padding={self.padding} groups={self.groups}")
        if self.kernel.shape[0] % self.groups:
            raise ValueError(f"groups={self.groups} does not divide out_ch={self.kernel.shape[0]}")
        if self.bias is not None and self.bias.shape != (self.kernel.shape[0],):
            raise ValueError(f"bias shape {self.bias.shape} does not match out_ch {self.kernel.shape[0]}")

    @property
    def out_ch(self):
        return self.kernel.shape[0]

    @property
    def in_ch(self):
        return self.kernel.shape[1] * self.groups

    @property
    def k(self):
        return self.kernel.shape[2]


def conv_output_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


# ---------------------------------------------------------------- convolution

def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x, w):
    """Cross-correlation with zero padding. Returns (out, cache)."""
    n, c, h, wd = x.shape
    if c != w.in_ch:
        raise ValueError(f"conv2d: input shape {x.shape} does not match kernel shape {w.kernel.shape} "
                         f"(groups={w.groups}, expects {w.in_ch} input channels)")
    ho = conv_output_size(h, w.k, w.stride, w.padding)
    wo = conv_output_size(wd, w.k, w.stride, w.padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: input shape {x.shape} too small for kernel shape {w.kernel.shape} "
                         f"with padding {w.padding}")
    kern = w.kernel.astype(x.dtype, copy=False)
    if w.groups == 1:
        out, cols = _dense_forward(x, kern, w.stride, w.padding, ho, wo)
    elif w.groups == c == w.out_ch:
        out = kernels.depthwise_forward(_pad(x, w.padding), kern[:, 0], w.stride, ho, wo)
        cols = None
    else:
        gi = c // w.groups
        go = w.out_ch // w.groups
        parts, cols = [], []
        for g in range(w.groups):
            o, cc = _dense_forward(x[:, g * gi:(g + 1) * gi], kern[g * go:(g + 1) * go], w.stride, w.padding, ho, wo)
            parts.append(o)
            cols.append(cc)
        out = np.concatenate(parts, axis=1)
    if w.bias is not None:
        out += w.bias.astype(x.dtype, copy=False)[None, :, None, None]
    return out, (x, w, cols)


def _dense_forward(x, kern, stride, pad, ho, wo):
    n, c = x.shape[:2]
    o, _, k, _ = kern.shape
    if k == 1 and stride == 1 and pad == 0:
        out = np.matmul(kern.reshape(o, c), x.reshape(n, c, -1))
        return out.reshape(n, o, ho, wo), None
    win = sliding_window_view(_pad(x, pad), (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    out = cols @ kern.reshape(o, -1).T
    return out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2).copy(), cols


def _dense_backward(x, kern, stride, pad, cols, g):
    n, c, h, wd = x.shape
    o, _, k, _ = kern.shape
    ho, wo = g.shape[2:]
    if cols is None:
        g2 = g.reshape(n, o, -1)
        x2 = x.reshape(n, c, -1)
        gw = np.einsum("nol,ncl->oc", g2, x2).reshape(kern.shape)
        gx = np.matmul(kern.reshape(o, c).T, g2).reshape(x.shape)
        return gx, gw
    g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
    gw = (g2.T @ cols).reshape(kern.shape)
    gcols = (g2 @ kern.reshape(o, -1)).reshape(n, ho, wo, c, k, k)
    gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        gxp = gxp[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(gxp), gw


def conv2d_backward(cache, g):
    """Returns (grad_x, grad_kernel, grad_bias or None)."""
    x, w, cols = cache
    kern = w.kernel.astype(x.dtype, copy=False)
    c = x.shape[1]
    if w.groups == 1:
        gx, gw = _dense_backward(x, kern, w.stride, w.padding, cols, g)
    elif w.groups == c == w.out_ch:
        gxp, gw0 = kernels.depthwise_backward(_pad(x, w.padding), kern[:, 0], np.ascontiguousarray(g), w.stride)
        p = w.padding
        gx = np.ascontiguousarray(gxp[:, :, p:gxp.shape[2] - p, p:gxp.shape[3] - p])
        gw = gw0[:, None]
    else:
        gi = c // w.groups
        go = w.out_ch // w.groups
        gxs, gws = [], []
        for grp in range(w.groups):
            a, b = _dense_backward(x[:, grp * gi:(grp + 1) * gi], kern[grp * go:(grp + 1) * go], w.stride,
                                   w.padding, cols[grp], g[:, grp * go:(grp + 1) * go])
            gxs.append(a)
            gws.append(b)
        gx = np.concatenate(gxs, axis=1)
        gw = np.concatenate(gws, axis=0)
    gb = g.sum(axis=(0, 2, 3)) if w.bias is not None else None
    return gx, gw, gb


# ----------------------------------------------------------- bilinear sampling

def bilinear_sample(fmap, y, x):
    """Sample a (C, H, W) map at fractional (row, col); zero outside the lattice."""
    fmap = np.asarray(fmap)
    _, h, w = fmap.shape
    y0 = int(np.floor(y))
    x0 = int(np.floor(x))
    ly = y - y0
    lx = x - x0
    out = np.zeros(fmap.shape[0], dtype=np.float64)
    for yy, xx, wt in ((y0, x0, (1 - ly) * (1 - lx)), (y0, x0 + 1, (1 - ly) * lx),
                       (y0 + 1, x0, ly * (1 - lx)), (y0 + 1, x0 + 1, ly * lx)):
        if 0 <= yy < h and 0 <= xx < w and wt != 0:
            out += wt * fmap[:, yy, xx]
    return out.astype(fmap.dtype) if np.issubdtype(fmap.dtype, np.floating) else out


@lru_cache(maxsize=64)
def _resize_matrix(src, dst, dtype):
    """Row-interpolation matrix for align_corners=False resizing, shape (dst, src)."""
    m = np.zeros((dst, src), dtype=np.float64)
    scale = src / dst
    for i in range(dst):
        s = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(s)), src - 1)
        i1 = min(i0 + 1, src - 1)
        t = s - i0
        m[i, i0] += 1 - t
        m[i, i1] += t
    m = m.astype(dtype)
    m.flags.writeable = False
    return m


def bilinear_upsample(x, out_h, out_w):
    """Bilinear resize to a size no smaller than the input (align_corners=False)."""
    n, c, h, w = x.shape
    if out_h < h or out_w < w:
        raise ValueError(f"bilinear_upsample cannot downscale {h}x{w} to {out_h}x{out_w}")
    if (out_h, out_w) == (h, w):
        return x.copy(), (x.shape,)
    mh = _resize_matrix(h, out_h, x.dtype.str)
    mw = _resize_matrix(w, out_w, x.dtype.str)
    out = np.matmul(np.matmul(mh, x), mw.T)
    return out, (x.shape,)


def bilinear_upsample_backward(cache, g):
    (shape,) = cache
    h, w = shape[2:]
    out_h, out_w = g.shape[2:]
    if (out_h, out_w) == (h, w):
        return g.copy()
    mh = _resize_matrix(h, out_h, g.dtype.str)
    mw = _resize_matrix(w, out_w, g.dtype.str)
    return np.matmul(np.matmul(mh.T, g), mw)


# ---------------------------------------------------------- batch normalization

@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, channels, dtype=DTYPE):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm(x, gamma, beta, state, train):
    """Per-channel normalization. In train mode, running stats are updated in place.

    Running variance tracks the unbiased batch variance; normalization itself
    uses the biased one.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm: gamma/beta shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        count = x.size // c
        unbiased = var * count / max(count - 1, 1)
        m = state.momentum
        state.running_mean[...] = (1 - m) * state.running_mean + m * mean
        state.running_var[...] = (1 - m) * state.running_var + m * unbiased
    else:
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
    inv = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.astype(x.dtype)[None, :, None, None] + beta.astype(x.dtype)[None, :, None, None]
    return out, (xhat, inv, gamma, train)


def batchnorm_backward(cache, g):
    """Returns (grad_x, grad_gamma, grad_beta)."""
    xhat, inv, gamma, train = cache
    gbeta = g.sum(axis=(0, 2, 3))
    ggamma = (g * xhat).sum(axis=(0, 2, 3))
    gxhat = g * gamma.astype(g.dtype)[None, :, None, None]
    if not train:
        return gxhat * inv[None, :, None, None], ggamma, gbeta
    m = g.size // g.shape[1]
    gx = (inv[None, :, None, None] / m) * (
        m * gxhat
        - gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    )
    return gx, ggamma, gbeta


# ------------------------------------------------------------------ activations

def h_sigmoid(t):
    return np.clip((t + 3) / 6, 0, 1)


def sigmoid(t):
    # split by sign so exp never overflows
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1 / (1 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1 + e)
    return out


def activation(x, kind):
    if kind == "relu":
        return np.maximum(x, 0), (x, kind, None)
    if kind == "h_swish":
        return x * h_sigmoid(x), (x, kind, None)
    if kind == "h_sigmoid":
        return h_sigmoid(x), (x, kind, None)
    if kind == "sigmoid":
        s = sigmoid(x)
        return s, (x, kind, s)
    if kind == "identity":
        return x, (x, kind, None)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_backward(cache, g):
    x, kind, s = cache
    if kind == "relu":
        return g * (x > 0)
    if kind == "h_swish":
        # derivative of t*clip((t+3)/6): 0 below -3, (2t+3)/6 inside, 1 above 3
        d = np.where(x <= -3, 0, np.where(x >= 3, 1, (2 * x + 3) / 6)).astype(g.dtype)
        return g * d
    if kind == "h_sigmoid":
        return g * ((x > -3) & (x < 3)) / 6
    if kind == "sigmoid":
        return g * s * (1 - s)
    return g


# --------------------------------------------------------------------- concat

def concat_channels(a, b):
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels: shapes {a.shape} and {b.shape} disagree outside the channel axis")
    return np.concatenate([a, b], axis=1), a.shape[1]


def concat_channels_backward(split, g):
    return g[:, :split], g[:, split:]


# ------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    op_name: str
    max_rel_err: float
    errors: dict = field(default_factory=dict)
    tol: float = 1e-4
    passed: bool = False

    def __post_init__(self):
        self.passed = bool(self.max_rel_err < self.tol)


def grad_check(op_name, forward, backward, arrays, tol=1e-4, seed=0, dtype=np.float64,
               h=1e-4, max_coords=None, rel_floor=1e-6):
    """Compare analytic gradients against central finite differences.

    ``forward(arrays) -> ndarray`` evaluates the op on a dict of named arrays.
    ``backward(grad_out) -> dict`` returns gradients for the names to check,
    from the state left by the most recent ``forward`` call. The scalar probe
    is ``sum(R * forward(arrays))`` for a fixed random R.

    Analytic gradients are taken in ``dtype``; finite differences always run
    on float64 copies. The error for one tensor is the max absolute deviation
    divided by the larger of the two gradients' max magnitudes. That
    denominator never drops below ``rel_floor`` times the largest analytic
    gradient across all checked tensors: a gradient that is zero by
    construction (a bias feeding a batch-stat BatchNorm) would otherwise be
    scored as rounding noise over rounding noise.
    ``max_coords`` limits how many coordinates per tensor are probed.
    """
    rng = np.random.default_rng(seed)
    work = {k: np.array(v, dtype=dtype) for k, v in arrays.items()}
    out = forward(work)
    probe = rng.standard_normal(out.shape)
    analytic = backward(probe.astype(dtype))
    analytic = {k: np.asarray(v, dtype=np.float64) for k, v in analytic.items()}

    shadow = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}

    def loss():
        return float(np.sum(probe * forward(shadow)))

    floor = rel_floor * max((np.max(np.abs(g), initial=0.0) for g in analytic.values()), default=0.0)
    errors = {}
    for name, ga in analytic.items():
        target = shadow[name]
        flat = target.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        num = np.empty(idx.size)
        for j, i in enumerate(idx):
            keep = flat[i]
            flat[i] = keep + h
            lp = loss()
            flat[i] = keep - h
            lm = loss()
            flat[i] = keep
            num[j] = (lp - lm) / (2 * h)
        ana = ga.reshape(-1)[idx]
        scale = max(np.max(np.abs(ana), initial=0.0), np.max(np.abs(num), initial=0.0), floor)
        diff = np.max(np.abs(ana - num), initial=0.0)
        if scale == 0:
            errors[name] = 0.0 if diff == 0 else float("inf")
        else:
            errors[name] = float(diff / scale)
    max_err = max(errors.values(), default=0.0)
    return GradCheckReport(op_name, max_err, errors, tol)
