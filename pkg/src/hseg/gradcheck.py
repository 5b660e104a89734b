"""Finite-difference gradient checks for every differentiable op and a tiny whole model."""
import numpy as np

from . import tensor_core as tc
from .dcn import DcnLayer, dcn_backward, dcn_forward
from .losses import combined_loss, mixed_loss
from .mixconv import MixConv, MNBlock, MnBlockSpec, SqueezeExcite
from .network import EncoderSpec, HybridNet
from .nn import BatchNorm2d, Conv2d

KINKS = {"relu": (0.0,), "h_swish": (-3.0, 3.0), "h_sigmoid": (-3.0, 3.0), "sigmoid": ()}


def _away_from(x, points, margin=0.05):
    for p in points:
        near = np.abs(x - p) < margin
        x = np.where(near, p + np.sign(x - p + 1e-12) * margin * 2, x)
    return x


def check_module(name, module, x, tol, seed, dtype=np.float64, max_coords=None):
    """Check grads of ``module.forward`` w.r.t. its input and every parameter."""
    mods = list(module.named_modules())
    arrays = {"x": x, **{f"p:{k}": v for k, v in module.named_parameters()}}

    def forward(a):
        for prefix, mod in mods:
            for k in mod.params:
                mod.params[k] = a[f"p:{prefix}{k}"]
        return module.forward(a["x"])

    def backward(g):
        module.zero_grad()
        gx = module.backward(g)
        return {"x": gx, **{f"p:{k}": v for k, v in module.named_grads()}}

    return tc.grad_check(name, forward, backward, arrays, tol=tol, seed=seed, dtype=dtype, max_coords=max_coords)


def _conv(seed, tol, dtype):
    rng = np.random.default_rng(seed)
    conv = Conv2d(2, 3, 3, stride=1 + seed % 2, rng=rng)
    conv.params["bias"][...] = rng.standard_normal(3)
    return check_module("conv2d", conv, rng.standard_normal((1, 2, 5, 5)), tol, seed, dtype)


def _batchnorm(train):
    def run(seed, tol, dtype):
        rng = np.random.default_rng(seed)
        bn = BatchNorm2d(3).astype(np.float64)
        bn.params["gamma"][...] = rng.uniform(0.5, 1.5, 3)
        bn.params["beta"][...] = rng.standard_normal(3)
        bn.buffers["running_mean"][...] = rng.standard_normal(3)
        bn.buffers["running_var"][...] = rng.uniform(0.5, 2, 3)
        bn.train(train)
        name = "batchnorm_batchstats" if train else "batchnorm_frozen"
        return check_module(name, bn, rng.standard_normal((2, 3, 4, 4)), tol, seed, dtype)
    return run


def _activation(kind):
    def run(seed, tol, dtype):
        rng = np.random.default_rng(seed)
        x = _away_from(rng.standard_normal((1, 2, 4, 4)) * 4, KINKS[kind])
        cache = {}

        def forward(a):
            out, cache["c"] = tc.activation(a["x"], kind)
            return out

        return tc.grad_check(f"activation_{kind}", forward,
                             lambda g: {"x": tc.activation_backward(cache["c"], g)}, {"x": x}, tol, seed, dtype)
    return run


def _upsample(seed, tol, dtype):
    rng = np.random.default_rng(seed)
    cache = {}

    def forward(a):
        out, cache["c"] = tc.bilinear_upsample(a["x"], 8, 10)
        return out

    return tc.grad_check("bilinear_upsample", forward,
                         lambda g: {"x": tc.bilinear_upsample_backward(cache["c"], g)},
                         {"x": rng.standard_normal((1, 2, 4, 5))}, tol, seed, dtype)


def _concat(seed, tol, dtype):
    rng = np.random.default_rng(seed)
    cache = {}

    def forward(a):
        out, cache["s"] = tc.concat_channels(a["a"], a["b"])
        return out

    def backward(g):
        ga, gb = tc.concat_channels_backward(cache["s"], g)
        return {"a": ga, "b": gb}

    return tc.grad_check("concat_channels", forward, backward,
                         {"a": rng.standard_normal((1, 2, 3, 3)), "b": rng.standard_normal((1, 3, 3, 3))},
                         tol, seed, dtype)


def random_offsets(rng, shape):
    """Offsets with fractional parts in (0.1, 0.4) or (0.6, 0.9): clear of lattice kinks."""
    frac = rng.uniform(0.1, 0.4, shape) * rng.choice([-1, 1], shape)
    return frac + rng.integers(-1, 2, shape)


def _dcn(seed, tol, dtype):
    rng = np.random.default_rng(seed)
    k = 3
    n, c, h, w, o = 1, 2, 6, 6, 3
    arrays = {
        "x": rng.standard_normal((n, c, h, w)),
        "kernel": rng.standard_normal((o, c, k, k)),
        "bias": rng.standard_normal(o),
        "offsets": random_offsets(rng, (n, 2 * k * k, h, w)),
        "modulation": rng.uniform(0.1, 0.9, (n, k * k, h, w)),
    }
    cache = {}

    def forward(a):
        wts = tc.ConvWeights(a["kernel"], a["bias"], 1, k // 2)
        out, cache["c"] = dcn_forward(wts, a["x"], a["offsets"], a["modulation"])
        return out

    def backward(g):
        gx, gw, gb, go, gm = dcn_backward(cache["c"], g)
        return {"x": gx, "kernel": gw, "bias": gb, "offsets": go, "modulation": gm}

    return tc.grad_check("dcn_forward", forward, backward, arrays, tol, seed, dtype)


def perturb_dcn_branch(layer, rng):
    """Move a DCN branch off its zero init so offsets sit clear of lattice points."""
    kk = layer.kk
    layer.branch.params["weight"][...] = rng.standard_normal(layer.branch.params["weight"].shape) * 1e-3
    bias = layer.branch.params["bias"]
    bias[:2 * kk] = rng.uniform(0.15, 0.35, 2 * kk) * rng.choice([-1, 1], 2 * kk)
    bias[2 * kk:] = rng.standard_normal(kk)


def _dcn_layer(seed, tol, dtype):
    rng = np.random.default_rng(seed)
    layer = DcnLayer(2, 3, 3, rng=rng)
    perturb_dcn_branch(layer, rng)
    layer.astype(np.float64)
    return check_module("dcn_layer", layer, rng.standard_normal((1, 2, 6, 6)), tol, seed, dtype)


def _mixconv(seed, tol, dtype):
    rng = np.random.default_rng(seed)
    mc = MixConv(5, [3, 5], stride=1 + seed % 2, rng=rng)
    return check_module("mixconv", mc, rng.standard_normal((1, 5, 7, 7)), tol, seed, dtype)


def _se(seed, tol, dtype):
    rng = np.random.default_rng(seed)
    se = SqueezeExcite(4, 0.5, rng=rng)
    for lin in (se.fc1, se.fc2):
        lin.params["bias"][...] = rng.standard_normal(lin.params["bias"].shape) * 0.5
    return check_module("se_block", se, rng.standard_normal((2, 4, 3, 3)), tol, seed, dtype)


def _mnblock(seed, tol, dtype):
    rng = np.random.default_rng(seed)
    spec = MnBlockSpec(4, 4, 1, 3, [3, 5], 0.5, pw_groups=2 if seed % 2 else 1)
    block = MNBlock(spec, rng=rng)
    return check_module("mnblock", block, rng.standard_normal((2, 4, 5, 5)), tol, seed, dtype)


def _combined(seed, tol, dtype):
    rng = np.random.default_rng(seed)
    y = (rng.random((1, 1, 4, 4)) < 0.4).astype(np.float64)
    cache = {}

    def forward(a):
        loss, cache["g"] = combined_loss(a["yhat"], y, 0.5)
        return np.array(loss)

    return tc.grad_check("combined_loss", forward, lambda g: {"yhat": g * cache["g"]},
                         {"yhat": rng.uniform(0.05, 0.95, y.shape)}, tol, seed, dtype)


def _mixed(seed, tol, dtype):
    rng = np.random.default_rng(seed)
    y = (rng.random((1, 1, 4, 4)) < 0.4).astype(np.float64)
    cache = {}

    def forward(a):
        loss, cache["g"] = mixed_loss([a[f"s{i}"] for i in range(4)], y, 0.5)
        return np.array(loss)

    return tc.grad_check("mixed_loss", forward, lambda g: {f"s{i}": g * cache["g"][i] for i in range(4)},
                         {f"s{i}": rng.uniform(0.05, 0.95, y.shape) for i in range(4)}, tol, seed, dtype)


def tiny_model(seed=0, divisor=8):
    """A width-reduced model with DCN branches moved off their zero init."""
    model = HybridNet(EncoderSpec().scaled(divisor), seed=seed)
    rng = np.random.default_rng(seed + 1000)
    for _, mod in model.named_modules():
        if isinstance(mod, DcnLayer):
            perturb_dcn_branch(mod, rng)
    return model


def _model(seed, tol, dtype, max_coords=2):
    model = tiny_model(seed).astype(np.float64)
    rng = np.random.default_rng(seed)
    x = rng.random((1, 3, 32, 32))

    def forward_logits(m, xx):
        return np.concatenate(m.forward(xx)["stage_logits"], axis=1)

    mods = list(model.named_modules())
    arrays = {"x": x, **{f"p:{k}": v for k, v in model.named_parameters()}}

    def forward(a):
        for prefix, mod in mods:
            for k in mod.params:
                mod.params[k] = a[f"p:{prefix}{k}"]
        return forward_logits(model, a["x"])

    def backward(g):
        model.zero_grad()
        gx = model.backward([g[:, i:i + 1] for i in range(g.shape[1])])
        return {"x": gx, **{f"p:{k}": v for k, v in model.named_grads()}}

    # h=1e-4 can straddle an h_swish or ReLU kink somewhere in the stack
    return tc.grad_check("whole_model_tiny", forward, backward, arrays, tol, seed, dtype, h=1e-5,
                         max_coords=max_coords)


OPS = {
    "conv2d": _conv,
    "batchnorm_frozen": _batchnorm(False),
    "batchnorm_batchstats": _batchnorm(True),
    "activation_relu": _activation("relu"),
    "activation_h_swish": _activation("h_swish"),
    "activation_sigmoid": _activation("sigmoid"),
    "activation_h_sigmoid": _activation("h_sigmoid"),
    "bilinear_upsample": _upsample,
    "concat_channels": _concat,
    "dcn_forward": _dcn,
    "dcn_layer": _dcn_layer,
    "mixconv": _mixconv,
    "se_block": _se,
    "mnblock": _mnblock,
    "combined_loss": _combined,
    "mixed_loss": _mixed,
}


def run_suite(tol=1e-4, seeds=range(5), dtype=np.float64, include_model=True, model_seeds=(0,)):
    """Every op on every seed, plus the tiny whole model. Returns a list of reports."""
    reports = []
    for name, fn in OPS.items():
        for s in seeds:
            r = fn(s, tol, dtype)
            r.op_name = f"{name}[seed={s}]"
            reports.append(r)
    if include_model:
        for s in model_seeds:
            r = _model(s, tol, dtype)
            r.op_name = f"whole_model_tiny[seed={s}]"
            reports.append(r)
    return reports
