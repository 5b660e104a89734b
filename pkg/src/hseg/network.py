"""Encoder/decoder assembly, cost accounting and checkpoint I/O."""
import io
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .dcn import DcnLayer
from .mixconv import MixConv, MNBlock, MnBlockSpec, SqueezeExcite
from .nn import Conv2d, Module, Sequential, conv_bn_act

OPS = ("Conv2D", "DCN", "MNBlock")
DOWNSAMPLE = 16


@dataclass(frozen=True)
class LayerSpec:
    op: str
    out_ch: int
    stride: int = 1
    kernel_sizes: tuple = (3,)
    t: float | None = None
    se_ratio: float | None = None


# The 15 encoder rows: stem conv, then three hybrid blocks each opening with a DCN.
TABLE1 = (
    LayerSpec("Conv2D", 16, 2, (3,)),
    LayerSpec("DCN", 16, 1, (3,)),
    LayerSpec("MNBlock", 24, 2, (3,), 6),
    LayerSpec("MNBlock", 24, 1, (3,), 3),
    LayerSpec("MNBlock", 40, 1, (3, 5, 7), 6, 0.5),
    LayerSpec("MNBlock", 40, 1, (3, 5), 6, 0.5),
    LayerSpec("DCN", 40, 1, (3,)),
    LayerSpec("MNBlock", 80, 2, (3, 5, 7), 6, 0.25),
    LayerSpec("MNBlock", 80, 1, (3, 5), 6, 0.25),
    LayerSpec("MNBlock", 80, 1, (3, 5), 6, 0.25),
    LayerSpec("MNBlock", 80, 1, (3, 5), 6, 0.25),
    LayerSpec("DCN", 80, 1, (3,)),
    LayerSpec("MNBlock", 80, 2, (3, 5, 7, 9), 6, 0.5),
    LayerSpec("MNBlock", 120, 1, (3, 5), 3, 0.5),
    LayerSpec("MNBlock", 120, 1, (3, 5), 3, 0.5),
)

DECODER_WIDTHS = (64, 40, 24, 16)


@dataclass(frozen=True)
class EncoderSpec:
    rows: tuple = TABLE1
    decoder_widths: tuple = DECODER_WIDTHS
    in_ch: int = 3
    width_divisor: int = 1

    def scaled(self, divisor):
        """Every channel width divided by ``divisor`` (rounded, at least 1)."""
        def sc(c):
            return max(1, int(round(c / divisor)))
        return replace(
            self,
            rows=tuple(replace(r, out_ch=sc(r.out_ch)) for r in self.rows),
            decoder_widths=tuple(sc(w) for w in self.decoder_widths),
            width_divisor=self.width_divisor * divisor,
        )

    def validate(self):
        if not self.rows or self.rows[0].op != "Conv2D":
            raise ValueError("row 0: encoder must start with a Conv2D stem")
        for i, r in enumerate(self.rows):
            if r.op not in OPS:
                raise ValueError(f"row {i}: unknown op {r.op!r}")
            if r.out_ch < 1:
                raise ValueError(f"row {i}: out_ch must be positive, got {r.out_ch}")
            if r.stride not in (1, 2):
                raise ValueError(f"row {i}: stride must be 1 or 2, got {r.stride}")
            if not r.kernel_sizes or any(k < 1 or k % 2 == 0 for k in r.kernel_sizes):
                raise ValueError(f"row {i}: kernel sizes must be odd and positive, got {r.kernel_sizes}")
            if r.op in ("Conv2D", "DCN") and len(r.kernel_sizes) != 1:
                raise ValueError(f"row {i}: {r.op} takes a single kernel size")
            if r.op == "DCN" and r.stride != 1:
                raise ValueError(f"row {i}: DCN rows must have stride 1")
            if r.op == "MNBlock" and (r.t is None or r.t <= 0):
                raise ValueError(f"row {i}: MNBlock needs a positive expansion t")
            if r.se_ratio is not None and not 0 < r.se_ratio <= 1:
                raise ValueError(f"row {i}: se ratio must be in (0, 1], got {r.se_ratio}")
        strides = sum(1 for r in self.rows if r.stride == 2)
        if strides != 4:
            raise ValueError(f"encoder must downsample exactly 4 times, found {strides} stride-2 rows")
        if sum(1 for r in self.rows if r.op == "DCN") != 3:
            raise ValueError("encoder must contain exactly three DCN rows (one per hybrid block)")
        if len(self.decoder_widths) != 4:
            raise ValueError(f"decoder needs 4 stage widths, got {len(self.decoder_widths)}")

    def groups(self):
        """Row index ranges: stem, then one range per hybrid block (each opens at a DCN)."""
        starts = [i for i, r in enumerate(self.rows) if r.op == "DCN"]
        bounds = [0] + starts + [len(self.rows)]
        return [range(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def mnblock_spec(row, in_ch):
    """MNBlock geometry for one encoder row.

    Follows the MixNet convention the row notation comes from: the SE squeeze
    width is taken from the block input width, and blocks mixing exactly two
    kernel sizes split their 1x1 expand/project convs into two groups (when
    every width involved is even).
    """
    spec = MnBlockSpec(in_ch, row.out_ch, row.stride, row.t, list(row.kernel_sizes), row.se_ratio,
                       se_base=in_ch)
    e = spec.expanded
    if len(row.kernel_sizes) == 2 and in_ch % 2 == 0 and e % 2 == 0 and row.out_ch % 2 == 0:
        spec.pw_groups = 2
    return spec


def _make_layer(row, in_ch, rng):
    if row.op == "Conv2D":
        return conv_bn_act(in_ch, row.out_ch, row.kernel_sizes[0], stride=row.stride, rng=rng)
    if row.op == "DCN":
        return DcnLayer(in_ch, row.out_ch, row.kernel_sizes[0], rng=rng)
    return MNBlock(mnblock_spec(row, in_ch), rng=rng)


class DecoderBlock(Module):
    """Contracting bottleneck: 1x1 to the stage width, depthwise 3x3, 1x1 projection."""

    def __init__(self, in_ch, width, rng=None):
        super().__init__()
        self.contract = self.add("contract", conv_bn_act(in_ch, width, 1, rng=rng))
        self.dw = self.add("dw", conv_bn_act(width, width, 3, groups=width, rng=rng))
        self.project = self.add("project", conv_bn_act(width, width, 1, act=None, rng=rng))

    def forward(self, x):
        return self.project.forward(self.dw.forward(self.contract.forward(x)))

    def backward(self, g):
        return self.contract.backward(self.dw.backward(self.project.backward(g)))


class HybridNet(Module):
    """Stem + three hybrid blocks, four-stage decoder with skip concatenation and per-stage heads.

    Decoder stage i upsamples by 2, concatenates the encoder tap of matching
    resolution (hybrid block 2, hybrid block 1, stem; the last stage has none),
    runs a DecoderBlock, and a 1x1 head emits a one-channel logit map that is
    bilinearly resized to the input size.
    """

    def __init__(self, spec=EncoderSpec(), seed=0):
        super().__init__()
        spec.validate()
        self.spec = spec
        rng = np.random.default_rng(seed)
        ch = spec.in_ch
        self.encoder = []
        for gi, rows in enumerate(spec.groups()):
            name = "stem" if gi == 0 else f"hcb{gi}"
            layers = {}
            for j, i in enumerate(rows):
                row = spec.rows[i]
                layers[f"l{j}"] = _make_layer(row, ch, rng)
                ch = row.out_ch
            self.encoder.append(self.add(name, Sequential(**layers)))
        tap_ch = [spec.rows[r[-1]].out_ch for r in spec.groups()]
        skips = tap_ch[:-1][::-1] + [0]
        self.decoder, self.heads = [], []
        for i, (width, skip) in enumerate(zip(spec.decoder_widths, skips)):
            self.decoder.append(self.add(f"dec{i + 1}", DecoderBlock(ch + skip, width, rng=rng)))
            self.heads.append(self.add(f"head{i + 1}", Conv2d(width, 1, 1, bias=True, rng=rng)))
            ch = width
        self.skip_channels = skips

    def encode(self, x):
        taps = []
        for block in self.encoder:
            x = block.forward(x)
            taps.append(x)
        return taps

    def forward(self, x):
        """Returns {"stage_logits": [4 x (N,1,H,W)], "prob": (N,1,H,W)}."""
        x = tc.as_tensor(x)
        n, c, h, w = x.shape
        if h % DOWNSAMPLE or w % DOWNSAMPLE:
            raise ValueError(f"input height and width must be multiples of {DOWNSAMPLE}, got {h}x{w}")
        if c != self.spec.in_ch:
            raise ValueError(f"model expects {self.spec.in_ch} input channels, got {c}")
        taps = self.encode(x)
        skips = taps[:-1][::-1] + [None]
        feat = taps[-1]
        logits, caches = [], []
        for block, head, skip in zip(self.decoder, self.heads, skips):
            up, ucache = tc.bilinear_upsample(feat, feat.shape[2] * 2, feat.shape[3] * 2)
            split = None
            if skip is not None:
                up, split = tc.concat_channels(up, skip)
            feat = block.forward(up)
            hl = head.forward(feat)
            full, fcache = tc.bilinear_upsample(hl, h, w)
            logits.append(full)
            caches.append((ucache, split, fcache, feat.shape, feat.dtype))
        prob, _ = tc.activation(logits[-1], "sigmoid")
        self._cache = caches
        return {"stage_logits": logits, "prob": prob}

    def backward(self, grad_logits):
        """Back-propagate gradients w.r.t. the four stage logit maps (None = zero)."""
        caches = self._cache
        n_enc = len(self.encoder)
        g_taps = [None] * n_enc
        g_feat = None
        for i in reversed(range(len(self.decoder))):
            ucache, split, fcache, fshape, fdtype = caches[i]
            g = grad_logits[i]
            g_head = None
            if g is not None:
                g_head = self.heads[i].backward(tc.bilinear_upsample_backward(fcache, g))
            if g_feat is not None:
                g_head = g_feat if g_head is None else g_head + g_feat
            if g_head is None:
                g_head = np.zeros(fshape, dtype=fdtype)
            g_up = self.decoder[i].backward(g_head)
            if split is not None:
                g_up, g_skip = tc.concat_channels_backward(split, g_up)
                g_taps[n_enc - 2 - i] = g_skip
            g_feat = tc.bilinear_upsample_backward(ucache, g_up)
        g = g_feat
        for j in reversed(range(n_enc)):
            if j < n_enc - 1 and g_taps[j] is not None:
                g = g + g_taps[j]
            g = self.encoder[j].backward(g)
        return g


def build_model(spec=EncoderSpec(), seed=0):
    return HybridNet(spec, seed)


# ----------------------------------------------------------------- accounting

def count_params(model):
    """Scalar parameter count: weights, biases and BN affine terms (no running stats)."""
    return int(sum(arr.size for _, arr in model.named_parameters()))


def _conv_macs(conv, shape):
    n, c, h, w = shape
    ho = tc.conv_output_size(h, conv.k, conv.stride, conv.padding)
    wo = tc.conv_output_size(w, conv.k, conv.stride, conv.padding)
    macs = n * ho * wo * conv.out_ch * (conv.in_ch // conv.groups) * conv.k * conv.k
    return (n, conv.out_ch, ho, wo), macs


def _trace(mod, shape, prefix, rows):
    """Append (name, kind, macs) rows for ``mod`` applied to ``shape``; return the output shape."""
    if isinstance(mod, Conv2d):
        out, macs = _conv_macs(mod, shape)
        rows.append((prefix + "conv", "conv", macs))
        return out
    if isinstance(mod, DcnLayer):
        _, bm = _conv_macs(mod.branch, shape)
        out, mm = _conv_macs(mod.main, shape)
        n, c = shape[:2]
        samples = n * out[2] * out[3] * mod.kk * c
        rows.append((prefix + "branch", "conv", bm))
        rows.append((prefix + "main", "conv", mm))
        rows.append((prefix + "sampling", "dcn_sampling", 4 * samples))
        return out
    if isinstance(mod, SqueezeExcite):
        n, c = shape[:2]
        rows.append((prefix + "fc", "linear", n * 2 * c * mod.squeezed))
        return shape
    if isinstance(mod, MixConv):
        n, _, h, w = shape
        out = shape
        for i, (conv, cg) in enumerate(zip(mod.convs, mod.splits)):
            out = _trace(conv, (n, cg, h, w), f"{prefix}g{i}.", rows)
        return (n, mod.channels) + out[2:]
    if isinstance(mod, MNBlock):
        for name, child in mod.children.items():
            shape = _trace(child, shape, f"{prefix}{name}.", rows)
        return shape
    if isinstance(mod, (Sequential, DecoderBlock)):
        for name, child in mod.children.items():
            shape = _trace(child, shape, f"{prefix}{name}.", rows)
        return shape
    # BN / activations: elementwise, not counted
    return shape


def mac_table(model, input_shape):
    """Per-layer (name, kind, macs) rows for one forward pass at ``input_shape`` (N, C, H, W) or (C, H, W)."""
    if len(input_shape) == 3:
        input_shape = (1,) + tuple(input_shape)
    n, c, h, w = input_shape
    if h % DOWNSAMPLE or w % DOWNSAMPLE:
        raise ValueError(f"input height and width must be multiples of {DOWNSAMPLE}, got {h}x{w}")
    rows = []
    shape = tuple(input_shape)
    taps = []
    for name, block in zip(["stem"] + [f"hcb{i}" for i in range(1, len(model.encoder))], model.encoder):
        shape = _trace(block, shape, f"{name}.", rows)
        taps.append(shape)
    for i, (block, head, skip) in enumerate(zip(model.decoder, model.heads, model.skip_channels)):
        shape = (shape[0], shape[1] + skip, shape[2] * 2, shape[3] * 2)
        shape = _trace(block, shape, f"dec{i + 1}.", rows)
        _trace(head, shape, f"head{i + 1}.", rows)
    return rows


def count_macs(model, input_shape):
    return int(sum(m for _, _, m in mac_table(model, input_shape)))


def module_macs(module, input_shape):
    """MACs of a single layer or block applied to an (N, C, H, W) input."""
    rows = []
    _trace(module, tuple(input_shape), "", rows)
    return int(sum(m for _, _, m in rows))


# ----------------------------------------------------------------- checkpoints

MAGIC = b"HSEG"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _meta(model):
    s = model.spec
    return np.array([s.width_divisor, *s.decoder_widths], dtype=np.float32)


def checkpoint_bytes(model):
    tensors = {"meta.arch": _meta(model), **model.state_dict()}
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(model, path):
    data = checkpoint_bytes(model)
    Path(path).write_bytes(data)
    return len(data)


def read_tensors(path):
    """Parse a checkpoint file into an ordered {name: float32 array} dict."""
    data = Path(path).read_bytes()
    pos = 0

    def take(nbytes, what):
        nonlocal pos
        if pos + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated while reading {what}")
        chunk = data[pos:pos + nbytes]
        pos += nbytes
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    tensors = {}
    for i in range(count):
        (nlen,) = struct.unpack("<H", take(2, f"name length of tensor {i}"))
        name = take(nlen, f"name of tensor {i}").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, f"rank of {name}"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"extents of {name}"))
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(4 * size, f"payload of {name}"), dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float32)
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes after {count} tensors")
    return tensors


def load_checkpoint(path, spec=None):
    """Rebuild a model from a checkpoint. Fails without returning a partial model."""
    tensors = read_tensors(path)
    meta = tensors.pop("meta.arch", None)
    if spec is None:
        spec = EncoderSpec()
        if meta is not None:
            div = int(meta[0])
            spec = spec.scaled(div) if div != 1 else spec
            spec = replace(spec, decoder_widths=tuple(int(v) for v in meta[1:]))
    model = HybridNet(spec, seed=0)
    own = model.state_dict()
    for name, arr in own.items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        if tensors[name].shape != arr.shape:
            raise CheckpointError(f"{path}: tensor {name!r} has shape {tensors[name].shape}, "
                                  f"model expects {arr.shape}")
    extra = [k for k in tensors if k not in own]
    if extra:
        raise CheckpointError(f"{path}: unexpected tensor {extra[0]!r}")
    model.load_state(tensors)
    return model
