"""Minimal layer framework: named parameters, cached forward state, hand-written backward."""
import numpy as np

from . import tensor_core as tc


class Module:
    """Base layer.

    Parameters live in ``self.params`` and are updated in place by the
    optimizer, so references held elsewhere stay valid. ``backward`` adds into
    ``self.grads`` and returns the gradient with respect to the layer input.
    """

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}
        self.children = {}
        self.training = True
        self._cache = None

    def add(self, name, module):
        self.children[name] = module
        return module

    def named_modules(self, prefix=""):
        yield prefix, self
        for name, child in self.children.items():
            yield from child.named_modules(f"{prefix}{name}.")

    def named_parameters(self):
        for prefix, mod in self.named_modules():
            for name, arr in mod.params.items():
                yield prefix + name, arr

    def named_grads(self):
        for prefix, mod in self.named_modules():
            for name in mod.params:
                yield prefix + name, mod.grads.get(name)

    def named_buffers(self):
        for prefix, mod in self.named_modules():
            for name, arr in mod.buffers.items():
                yield prefix + name, arr

    def state_dict(self):
        """Parameters and buffers, keyed by dotted name."""
        return {**dict(self.named_parameters()), **dict(self.named_buffers())}

    def load_state(self, state):
        own = self.state_dict()
        for name, arr in own.items():
            if name not in state:
                raise KeyError(f"missing tensor {name!r}")
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ValueError(f"tensor {name!r}: shape {src.shape} does not match expected {arr.shape}")
        for name, arr in own.items():
            arr[...] = state[name]

    def zero_grad(self):
        for _, mod in self.named_modules():
            mod.grads = {k: np.zeros_like(v) for k, v in mod.params.items()}

    def clear_cache(self):
        for _, mod in self.named_modules():
            mod._cache = None

    def train(self, mode=True):
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self):
        return self.train(False)

    def astype(self, dtype):
        """Convert parameters and buffers in place (e.g. float64 for grad checks)."""
        for _, mod in self.named_modules():
            mod.params = {k: v.astype(dtype) for k, v in mod.params.items()}
            mod.buffers = {k: v.astype(dtype) for k, v in mod.buffers.items()}
            mod.grads = {}
            mod._on_astype()
        return self

    def _on_astype(self):
        pass

    def _accumulate(self, name, g):
        if g is None:
            return
        if name in self.grads:
            self.grads[name] += g
        else:
            self.grads[name] = np.array(g, dtype=self.params[name].dtype)

    def __call__(self, x):
        return self.forward(x)


def he_normal(rng, shape, fan_in, dtype=tc.DTYPE):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, k, stride=1, padding=None, groups=1, bias=True, rng=None):
        super().__init__()
        if in_ch % groups or out_ch % groups:
            raise ValueError(f"groups={groups} must divide in_ch={in_ch} and out_ch={out_ch}")
        self.in_ch, self.out_ch, self.k = in_ch, out_ch, k
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.groups = groups
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = (in_ch // groups) * k * k
        self.params["weight"] = he_normal(rng, (out_ch, in_ch // groups, k, k), fan_in)
        if bias:
            self.params["bias"] = np.zeros(out_ch, dtype=tc.DTYPE)

    @property
    def weights(self):
        return tc.ConvWeights(self.params["weight"], self.params.get("bias"), self.stride, self.padding, self.groups)

    def forward(self, x):
        out, self._cache = tc.conv2d(x, self.weights)
        return out

    def backward(self, g):
        gx, gw, gb = tc.conv2d_backward(self._cache, g)
        self._accumulate("weight", gw)
        if "bias" in self.params:
            self._accumulate("bias", gb)
        return gx


class BatchNorm2d(Module):
    def __init__(self, channels):
        super().__init__()
        self.channels = channels
        self.params["gamma"] = np.ones(channels, dtype=tc.DTYPE)
        self.params["beta"] = np.zeros(channels, dtype=tc.DTYPE)
        self.buffers["running_mean"] = np.zeros(channels, dtype=tc.DTYPE)
        self.buffers["running_var"] = np.ones(channels, dtype=tc.DTYPE)

    @property
    def state(self):
        return tc.BatchNormState(self.buffers["running_mean"], self.buffers["running_var"])

    def forward(self, x):
        out, self._cache = tc.batchnorm(x, self.params["gamma"], self.params["beta"], self.state, self.training)
        return out

    def backward(self, g):
        gx, gg, gb = tc.batchnorm_backward(self._cache, g)
        self._accumulate("gamma", gg)
        self._accumulate("beta", gb)
        return gx


class Activation(Module):
    def __init__(self, kind):
        super().__init__()
        if kind not in tc.ACTIVATIONS:
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind

    def forward(self, x):
        out, self._cache = tc.activation(x, self.kind)
        return out

    def backward(self, g):
        return tc.activation_backward(self._cache, g)


class Sequential(Module):
    def __init__(self, **layers):
        super().__init__()
        for name, layer in layers.items():
            self.add(name, layer)

    def forward(self, x):
        for layer in self.children.values():
            x = layer.forward(x)
        return x

    def backward(self, g):
        for layer in reversed(list(self.children.values())):
            g = layer.backward(g)
        return g


def conv_bn_act(in_ch, out_ch, k, stride=1, groups=1, act="h_swish", rng=None):
    layers = {
        "conv": Conv2d(in_ch, out_ch, k, stride=stride, groups=groups, bias=False, rng=rng),
        "bn": BatchNorm2d(out_ch),
    }
    if act is not None:
        layers["act"] = Activation(act)
    return Sequential(**layers)


class Linear(Module):
    """Fully connected layer on (N, features) arrays."""

    def __init__(self, in_features, out_features, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = he_normal(rng, (out_features, in_features), in_features)
        self.params["bias"] = np.zeros(out_features, dtype=tc.DTYPE)

    def forward(self, x):
        self._cache = x
        return x @ self.params["weight"].astype(x.dtype, copy=False).T + self.params["bias"].astype(x.dtype)

    def backward(self, g):
        x = self._cache
        self._accumulate("weight", g.T @ x)
        self._accumulate("bias", g.sum(axis=0))
        return g @ self.params["weight"].astype(g.dtype, copy=False)
