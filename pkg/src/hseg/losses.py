"""Combined BCE + overlap loss and the multi-scale mixed loss.

Per pixel the overlap term is the soft Jaccard ratio ``y*p / (y + p - y*p)``,
even though this family of losses is usually called "Dice". All arithmetic
is float64; returned gradients match the input dtype.
"""
import numpy as np

CLAMP = 1e-7
OVERLAP_EPS = 1e-7
N_STAGES = 4


def combined_loss(yhat, y, w=0.5):
    """w * BCE + (1 - w) * (1 - mean overlap ratio). Returns (loss, dloss/dyhat)."""
    yhat = np.asarray(yhat)
    y = np.asarray(y)
    if yhat.shape != y.shape:
        raise ValueError(f"prediction shape {yhat.shape} does not match target shape {y.shape}")
    if not 0 <= w <= 1:
        raise ValueError(f"loss weight w must be in [0, 1], got {w}")
    p = yhat.astype(np.float64)
    t = y.astype(np.float64)
    n = p.size
    pc = np.clip(p, CLAMP, 1 - CLAMP)
    bce = -np.mean(t * np.log(pc) + (1 - t) * np.log(1 - pc))
    denom = t + p - t * p + OVERLAP_EPS
    ratio = t * p / denom
    overlap = 1 - np.mean(ratio)
    loss = w * bce + (1 - w) * overlap

    inside = (p >= CLAMP) & (p <= 1 - CLAMP)
    g_bce = np.where(inside, -(t / pc - (1 - t) / (1 - pc)), 0.0) / n
    g_overlap = -(t * (t + OVERLAP_EPS) / denom ** 2) / n
    grad = w * g_bce + (1 - w) * g_overlap
    return float(loss), grad.astype(yhat.dtype if np.issubdtype(yhat.dtype, np.floating) else np.float64)


def mixed_loss(stage_probs, gt, w=0.5):
    """(1 + 1/n) * sum of combined losses over the n = 4 decoder stages.

    Stage maps must already be at ground-truth resolution. Returns
    (loss, [grad per stage]).
    """
    stage_probs = list(stage_probs)
    if len(stage_probs) != N_STAGES:
        raise ValueError(f"mixed loss needs exactly {N_STAGES} stage outputs, got {len(stage_probs)}")
    scale = 1 + 1 / N_STAGES
    total = 0.0
    grads = []
    for p in stage_probs:
        loss, g = combined_loss(p, gt, w)
        total += loss
        grads.append(scale * g)
    return scale * total, grads
