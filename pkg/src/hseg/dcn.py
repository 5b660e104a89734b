"""Modulated deformable convolution.

Each output location p sums ``w_i * x(p + p_i + dp_i(p)) * m_i(p)`` over the
k*k kernel taps. The offsets dp and the modulation m come from a separate
k*k convolution on the same input (the branch); one deformation field is
shared by all input and output channels. Passing m = 1 gives the unmodulated
variant.

Offsets are laid out as (dy, dx) pairs per tap along the channel axis, taps
in row-major kernel order.
"""
import numpy as np

from . import kernels
from . import tensor_core as tc
from .nn import Conv2d, Module


def dcn_branch(branch, x):
    """Run the branch conv; returns (offsets, modulation, cache).

    The first 2K output channels are the raw offsets and the last K are
    squashed through a sigmoid into [0, 1].
    """
    raw, conv_cache = tc.conv2d(x, branch)
    if raw.shape[2:] != x.shape[2:]:
        raise ValueError(f"dcn branch must keep spatial size {x.shape[2:]}, produced {raw.shape[2:]}")
    kk = branch.out_ch // 3
    if branch.out_ch != 3 * kk:
        raise ValueError(f"dcn branch must produce 3*K channels, got {branch.out_ch}")
    offsets = np.ascontiguousarray(raw[:, :2 * kk])
    modulation, act_cache = tc.activation(np.ascontiguousarray(raw[:, 2 * kk:]), "sigmoid")
    return offsets, modulation, (conv_cache, act_cache)


def dcn_branch_backward(cache, g_offsets, g_modulation):
    conv_cache, act_cache = cache
    g_raw = np.concatenate([g_offsets, tc.activation_backward(act_cache, g_modulation)], axis=1)
    return tc.conv2d_backward(conv_cache, g_raw)


def dcn_forward(main, x, offsets, modulation):
    """Deformable conv of ``x`` with ConvWeights ``main``. Returns (out, cache)."""
    n, c, h, w = x.shape
    if main.groups != 1:
        raise ValueError("deformable convolution supports groups=1 only")
    if c != main.in_ch:
        raise ValueError(f"dcn: input shape {x.shape} does not match kernel shape {main.kernel.shape}")
    k = main.k
    kk = k * k
    ho = tc.conv_output_size(h, k, main.stride, main.padding)
    wo = tc.conv_output_size(w, k, main.stride, main.padding)
    if offsets.shape != (n, 2 * kk, ho, wo) or modulation.shape != (n, kk, ho, wo):
        raise ValueError(f"dcn: offsets {offsets.shape} / modulation {modulation.shape} do not match "
                         f"expected {(n, 2 * kk, ho, wo)} / {(n, kk, ho, wo)}")
    x = np.ascontiguousarray(x)
    offsets = np.ascontiguousarray(offsets, dtype=x.dtype)
    modulation = np.ascontiguousarray(modulation, dtype=x.dtype)
    cols = kernels.deform_im2col(x, offsets, modulation, k, main.stride, main.padding)
    wmat = main.kernel.astype(x.dtype, copy=False).reshape(main.out_ch, c * kk)
    out = np.matmul(wmat, cols.reshape(n, c * kk, ho * wo)).reshape(n, main.out_ch, ho, wo)
    if main.bias is not None:
        out += main.bias.astype(x.dtype, copy=False)[None, :, None, None]
    return out, (main, x, offsets, modulation, cols)


def dcn_backward(cache, g):
    """Returns grads for (x, kernel, bias, offsets, modulation)."""
    main, x, offsets, modulation, cols = cache
    n, c = x.shape[:2]
    k = main.k
    kk = k * k
    ho, wo = g.shape[2:]
    g2 = np.ascontiguousarray(g, dtype=x.dtype).reshape(n, main.out_ch, ho * wo)
    c2 = cols.reshape(n, c * kk, ho * wo)
    gw = np.einsum("nol,nkl->ok", g2, c2).reshape(main.kernel.shape)
    wmat = main.kernel.astype(x.dtype, copy=False).reshape(main.out_ch, c * kk)
    gcols = np.matmul(wmat.T, g2).reshape(n, c, kk, ho, wo)
    gx, goff, gmod = kernels.deform_col2im(x, offsets, modulation, np.ascontiguousarray(gcols), k,
                                           main.stride, main.padding)
    gb = g.sum(axis=(0, 2, 3)) if main.bias is not None else None
    return gx, gw, gb, goff, gmod


class DcnLayer(Module):
    """Branch conv plus deformable main conv. No normalization or activation follows."""

    def __init__(self, in_ch, out_ch, k=3, stride=1, rng=None):
        super().__init__()
        self.k = k
        self.kk = k * k
        self.main = self.add("main", Conv2d(in_ch, out_ch, k, stride=stride, bias=True, rng=rng))
        self.branch = self.add("branch", Conv2d(in_ch, 3 * self.kk, k, stride=stride, bias=True, rng=rng))
        # zero branch: training starts at plain convolution with modulation 0.5
        self.branch.params["weight"][...] = 0

    def forward(self, x):
        offsets, modulation, bcache = dcn_branch(self.branch.weights, x)
        out, fcache = dcn_forward(self.main.weights, x, offsets, modulation)
        self._cache = (bcache, fcache)
        return out

    def backward(self, g):
        bcache, fcache = self._cache
        gx, gw, gb, goff, gmod = dcn_backward(fcache, g)
        self.main._accumulate("weight", gw)
        self.main._accumulate("bias", gb)
        gxb, gwb, gbb = dcn_branch_backward(bcache, goff, gmod)
        self.branch._accumulate("weight", gwb)
        self.branch._accumulate("bias", gbb)
        return gx + gxb
