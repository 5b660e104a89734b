"""Brute-force reference implementations used as test oracles."""
import math

import numpy as np


def naive_conv2d(x, kernel, bias=None, stride=1, pad=0, groups=1):
    """Direct quadruple loop, float64. Oracle for conv2d."""
    n, c, h, w = x.shape
    o, ci, k, _ = kernel.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    go = o // groups
    for b in range(n):
        for oc in range(o):
            g = oc // go
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for cc in range(ci):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[b, g * ci + cc, i * stride + di, j * stride + dj] * kernel[oc, cc, di, dj]
                    out[b, oc, i, j] = acc + (0.0 if bias is None else bias[oc])
    return out


def shift_zero(x, dy, dx):
    """out[..., i, j] = x[..., i + dy, j + dx], zero outside."""
    out = np.zeros_like(x)
    h, w = x.shape[-2:]
    ys = slice(max(0, -dy), min(h, h - dy))
    xs = slice(max(0, -dx), min(w, w - dx))
    yd = slice(max(0, dy), min(h, h + dy))
    xd = slice(max(0, dx), min(w, w + dx))
    out[..., ys, xs] = x[..., yd, xd]
    return out


def shifted_padded(x, pad, dy, dx):
    """The zero-padded input seen through an integer translation (dy, dx).

    Row r of the result is row r - pad + dy of ``x``, zero where that falls
    outside. A pad-0 convolution over it equals a deformable conv whose every
    offset is (dy, dx).
    """
    n, c, h, w = x.shape
    big = max(abs(dy), abs(dx)) + pad
    xp = np.pad(x, ((0, 0), (0, 0), (big, big), (big, big)))
    r0 = big - pad + dy
    c0 = big - pad + dx
    return xp[:, :, r0:r0 + h + 2 * pad, c0:c0 + w + 2 * pad]


def naive_auc(scores, labels):
    """O(n^2) pairwise count; ties count one half."""
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (len(pos) * len(neg))


def naive_confusion(prob, gt, threshold=0.5):
    tp = tn = fp = fn = 0
    for p, g in zip(np.ravel(prob), np.ravel(gt)):
        pred = p >= threshold
        if pred and g:
            tp += 1
        elif pred:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, tn, fp, fn


def scalar_combined_loss(yhat, y, w, clamp=1e-7, eps=1e-7):
    """Per-pixel loop over the BCE + overlap formula, float64."""
    bce = 0.0
    ratio = 0.0
    flat_p, flat_y = np.ravel(yhat).tolist(), np.ravel(y).tolist()
    for p, t in zip(flat_p, flat_y):
        pc = min(max(p, clamp), 1 - clamp)
        bce -= t * math.log(pc) + (1 - t) * math.log(1 - pc)
        ratio += t * p / (t + p - t * p + eps)
    n = len(flat_p)
    return w * bce / n + (1 - w) * (1 - ratio / n)


def scalar_adamw(p, g, steps, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        p = p - lr * mh / (math.sqrt(vh) + eps) - lr * wd * p
    return p


# Encoder rows written out by hand: (op, out_ch, stride, kernel sizes, t, se ratio).
ENCODER_ROWS = [
    ("Conv2D", 16, 2, [3], None, None),
    ("DCN", 16, 1, [3], None, None),
    ("MNBlock", 24, 2, [3], 6, None),
    ("MNBlock", 24, 1, [3], 3, None),
    ("MNBlock", 40, 1, [3, 5, 7], 6, 0.5),
    ("MNBlock", 40, 1, [3, 5], 6, 0.5),
    ("DCN", 40, 1, [3], None, None),
    ("MNBlock", 80, 2, [3, 5, 7], 6, 0.25),
    ("MNBlock", 80, 1, [3, 5], 6, 0.25),
    ("MNBlock", 80, 1, [3, 5], 6, 0.25),
    ("MNBlock", 80, 1, [3, 5], 6, 0.25),
    ("DCN", 80, 1, [3], None, None),
    ("MNBlock", 80, 2, [3, 5, 7, 9], 6, 0.5),
    ("MNBlock", 120, 1, [3, 5], 3, 0.5),
    ("MNBlock", 120, 1, [3, 5], 3, 0.5),
]


def encoder_param_sheet(rows=ENCODER_ROWS, in_ch=3):
    """Closed-form parameter count per encoder row, returned as a list of ints.

    Conv2D: k*k*cin*cout weights + BN (2*cout), no bias.
    DCN: main k*k*cin*cout + cout, branch k*k*cin*3k^2 + 3k^2.
    MNBlock: 1x1 expand + BN, depthwise k_i^2 per channel group + BN,
    SE (two linears with bias, squeeze ceil(cin*r)), 1x1 project + BN. The
    two pointwise convs use 2 groups when the block mixes two kernel sizes
    and every width is even.
    """
    sheet = []
    cin = in_ch
    for op, cout, _stride, ks, t, se in rows:
        if op == "Conv2D":
            k = ks[0]
            n = k * k * cin * cout + 2 * cout
        elif op == "DCN":
            k = ks[0]
            n = k * k * cin * cout + cout + k * k * cin * 3 * k * k + 3 * k * k
        else:
            e = int(round(cin * t))
            g = 2 if len(ks) == 2 and cin % 2 == 0 and e % 2 == 0 and cout % 2 == 0 else 1
            n = cin * e // g + 2 * e
            base, rem = divmod(e, len(ks))
            n += sum((base + (i < rem)) * k * k for i, k in enumerate(ks)) + 2 * e
            if se:
                s = math.ceil(cin * se)
                n += e * s + s + s * e + e
            n += e * cout // g + 2 * cout
        sheet.append(n)
        cin = cout
    return sheet
