"""Mixed depthwise convolution, squeeze-excite, and the MNBlock bottleneck."""
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .nn import Activation, BatchNorm2d, Conv2d, Linear, Module, Sequential, conv_bn_act


def split_channels(c, kernel_sizes):
    """Near-equal channel partition; the remainder goes one each to the first groups."""
    g = len(kernel_sizes)
    if g == 0:
        raise ValueError("kernel_sizes must be non-empty")
    if c < g:
        raise ValueError(f"cannot split {c} channels into {g} groups")
    base, rem = divmod(c, g)
    return [base + (1 if i < rem else 0) for i in range(g)]


class MixConv(Module):
    """Depthwise conv whose channel groups each use their own kernel size."""

    def __init__(self, channels, kernel_sizes, stride=1, rng=None):
        super().__init__()
        for k in kernel_sizes:
            if k % 2 == 0:
                raise ValueError(f"kernel sizes must be odd, got {kernel_sizes}")
        self.channels = channels
        self.kernel_sizes = list(kernel_sizes)
        self.stride = stride
        self.splits = split_channels(channels, self.kernel_sizes)
        self.convs = [
            self.add(f"g{i}", Conv2d(c, c, k, stride=stride, padding=k // 2, groups=c, bias=False, rng=rng))
            for i, (c, k) in enumerate(zip(self.splits, self.kernel_sizes))
        ]

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ValueError(f"mixconv expects {self.channels} channels, got input shape {x.shape}")
        if len(self.convs) == 1:
            return self.convs[0].forward(x)
        bounds = np.cumsum([0] + self.splits)
        outs = [conv.forward(np.ascontiguousarray(x[:, a:b]))
                for conv, a, b in zip(self.convs, bounds[:-1], bounds[1:])]
        return np.concatenate(outs, axis=1)

    def backward(self, g):
        if len(self.convs) == 1:
            return self.convs[0].backward(g)
        bounds = np.cumsum([0] + self.splits)
        return np.concatenate([conv.backward(np.ascontiguousarray(g[:, a:b]))
                               for conv, a, b in zip(self.convs, bounds[:-1], bounds[1:])], axis=1)


def se_width(channels, se_ratio):
    if not 0 < se_ratio <= 1:
        raise ValueError(f"se_ratio must be in (0, 1], got {se_ratio}")
    return max(1, math.ceil(channels * se_ratio))


class SqueezeExcite(Module):
    """Global pool -> linear -> relu -> linear -> h_sigmoid gate, multiplied onto x.

    The squeeze width is ``ceil(reduce_base * se_ratio)``; ``reduce_base``
    defaults to the gated channel count.
    """

    def __init__(self, channels, se_ratio, reduce_base=None, rng=None):
        super().__init__()
        self.channels = channels
        self.squeezed = se_width(reduce_base or channels, se_ratio)
        self.fc1 = self.add("fc1", Linear(channels, self.squeezed, rng=rng))
        self.fc2 = self.add("fc2", Linear(self.squeezed, channels, rng=rng))

    def forward(self, x):
        pooled = x.mean(axis=(2, 3))
        s = self.fc1.forward(pooled)
        r, rc = tc.activation(s, "relu")
        z = self.fc2.forward(r)
        gate, gc = tc.activation(z, "h_sigmoid")
        self._cache = (x, gate, rc, gc)
        return x * gate[:, :, None, None]

    def backward(self, g):
        x, gate, rc, gc = self._cache
        g_gate = np.einsum("nchw,nchw->nc", g, x)
        gz = tc.activation_backward(gc, g_gate)
        gr = self.fc2.backward(gz)
        gs = tc.activation_backward(rc, gr)
        gpooled = self.fc1.backward(gs)
        hw = x.shape[2] * x.shape[3]
        return g * gate[:, :, None, None] + (gpooled / hw)[:, :, None, None]


@dataclass
class MnBlockSpec:
    in_ch: int
    out_ch: int
    stride: int = 1
    t: float = 6
    kernel_sizes: list = field(default_factory=lambda: [3])
    se_ratio: float | None = None
    # groups for the 1x1 expand/project convs
    pw_groups: int = 1
    # channel count the SE squeeze width is taken from; None = expanded width
    se_base: int | None = None

    @property
    def expanded(self):
        return int(round(self.in_ch * self.t))

    @property
    def residual(self):
        return self.stride == 1 and self.in_ch == self.out_ch


class MNBlock(Module):
    """Inverted bottleneck with a MixConv depthwise stage.

    1x1 expand + BN + h_swish -> MixConv + BN + h_swish -> optional SE ->
    1x1 project + BN, plus the identity when stride is 1 and widths match.
    """

    def __init__(self, spec, rng=None):
        super().__init__()
        self.spec = spec
        e = spec.expanded
        self.expand = self.add("expand", conv_bn_act(spec.in_ch, e, 1, groups=spec.pw_groups, rng=rng))
        self.mix = self.add("mix", Sequential(
            conv=MixConv(e, spec.kernel_sizes, spec.stride, rng=rng),
            bn=BatchNorm2d(e),
            act=Activation("h_swish"),
        ))
        self.se = (self.add("se", SqueezeExcite(e, spec.se_ratio, spec.se_base, rng=rng))
                   if spec.se_ratio else None)
        self.project = self.add("project", conv_bn_act(e, spec.out_ch, 1, groups=spec.pw_groups, act=None, rng=rng))

    def inner(self, x):
        h = self.mix.forward(self.expand.forward(x))
        if self.se is not None:
            h = self.se.forward(h)
        return self.project.forward(h)

    def forward(self, x):
        if x.shape[1] != self.spec.in_ch:
            raise ValueError(f"MNBlock expects {self.spec.in_ch} channels, got input shape {x.shape}")
        out = self.inner(x)
        return out + x if self.spec.residual else out

    def backward(self, g):
        gh = self.project.backward(g)
        if self.se is not None:
            gh = self.se.backward(gh)
        gx = self.expand.backward(self.mix.backward(gh))
        return gx + g if self.spec.residual else gx
