"""Slow, obviously-correct reference computations.

Every function here is written independently of the vectorized code it
checks: explicit loops over pixels, entries or records, using Python
floats or ``mpmath`` for extra precision.
"""
import math

import mpmath
import numpy as np


def _as_np(x):
    return x.detach().cpu().double().numpy() if hasattr(x, "detach") else np.asarray(x, float)


def masked_recon_loss(pred_rgb, pred_event, target_rgb, target_event, plans):
    pred_rgb, pred_event = _as_np(pred_rgb), _as_np(pred_event)
    target_rgb, target_event = _as_np(target_rgb), _as_np(target_event)
    total, count = [], 0
    for b, plan in enumerate(plans):
        for pred, target, vis in (
            (pred_rgb, target_rgb, plan.rgb_visible),
            (pred_event, target_event, plan.event_visible),
        ):
            vis = {int(i) for i in vis}
            for i in range(plan.num_patches):
                if i in vis:
                    continue
                for j in range(pred.shape[-1]):
                    total.append((pred[b, i, j] - target[b, i, j]) ** 2)
                    count += 1
    return math.fsum(total) / count


def fusion_loss(pred_re, pred_rev, target_rgb, plans):
    pred_re, pred_rev, target = _as_np(pred_re), _as_np(pred_rev), _as_np(target_rgb)
    total, count = [], 0
    for b, plan in enumerate(plans):
        vis = {int(i) for i in plan.rgb_visible}
        for pred in (pred_re, pred_rev):
            for i in range(plan.num_patches):
                if i in vis:
                    continue
                for j in range(target.shape[-1]):
                    total.append((target[b, i, j] - pred[b, i, j]) ** 2)
                    count += 1
    return math.fsum(total) / count


def logits(a, b, scale):
    a, b = _as_np(a), _as_np(b)
    n = a.shape[0]
    out = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            out[i, j] = scale * math.fsum(a[i, k] * b[j, k] for k in range(a.shape[1]))
    return out


def info_nce(logit_matrix):
    """``-(1/N) sum_i log(exp(M_ii) / sum_j exp(M_ij))`` in 50-digit arithmetic."""
    m = _as_np(logit_matrix)
    n = m.shape[0]
    with mpmath.workdps(50):
        acc = mpmath.mpf(0)
        for i in range(n):
            denom = mpmath.fsum(mpmath.exp(mpmath.mpf(float(m[i, j]))) for j in range(n))
            acc += mpmath.log(mpmath.exp(mpmath.mpf(float(m[i, i]))) / denom)
        return float(-acc / n)


def normalize_rows(x):
    x = _as_np(x)
    return np.array([row / math.sqrt(math.fsum(v * v for v in row)) for row in x])


def contrastive_total(rgb, event, voxel, scale):
    r, e, v = normalize_rows(rgb), normalize_rows(event), normalize_rows(voxel)
    return (
        info_nce(logits(r, e, scale))
        + info_nce(logits(e, r, scale))
        + info_nce(logits(r, v, scale))
        + info_nce(logits(v, r, scale))
    )


def scatter_decoder_slots(visible_tokens, visible_idx, num_patches, mask_token, pos_table):
    """Place tokens one slot at a time: slot 0 CLS, slot 1+p grid position p."""
    vt, mt, pt = _as_np(visible_tokens), _as_np(mask_token), _as_np(pos_table)
    out = np.empty((num_patches + 1, vt.shape[-1]))
    out[0] = vt[0] + pt[0]
    lookup = {int(p): k + 1 for k, p in enumerate(visible_idx)}
    for p in range(num_patches):
        src = vt[lookup[p]] if p in lookup else mt
        out[p + 1] = src + pt[p + 1]
    return out


def sort_and_slice_voxels(records, groups, events_per_voxel, attrs_per_event):
    """Python ``sorted`` on mean (t, y, x) keys, then contiguous slicing."""
    recs = _as_np(records)

    def key(i):
        ev = recs[i].reshape(events_per_voxel, attrs_per_event)
        return (ev[:, 2].mean(), ev[:, 1].mean(), ev[:, 0].mean(), i)

    order = sorted(range(len(recs)), key=key)
    per = len(recs) // groups
    return np.array([np.concatenate([recs[j] for j in order[g * per : (g + 1) * per]]) for g in range(groups)])


def event_pixels(frame0, frame1, threshold):
    """Per-pixel loop: ``{(x, y): polarity}`` for pixels whose change fires."""
    out = {}
    h, w = frame0.shape[:2]
    for y in range(h):
        for x in range(w):
            d = float(np.mean(frame1[y, x])) - float(np.mean(frame0[y, x]))
            if abs(d) >= threshold - 1e-9:
                out[(x, y)] = 1 if d > 0 else 0
    return out


def dense_matmul(W, x, b):
    """Entry-by-entry ``W @ x + b``."""
    W, x, b = _as_np(W), _as_np(x), _as_np(b)
    return np.array([math.fsum(W[i, k] * x[k] for k in range(len(x))) + b[i] for i in range(len(b))])


def attention_weights(x, qkv_weight, qkv_bias, heads):
    """Softmax attention matrix per head from explicit per-row loops."""
    x, W, bias = _as_np(x), _as_np(qkv_weight), _as_np(qkv_bias)
    n, d = x.shape
    hd = d // heads
    qkv = x @ W.T + bias
    q, k = qkv[:, :d], qkv[:, d : 2 * d]
    out = np.empty((heads, n, n))
    for h in range(heads):
        for i in range(n):
            s = [float(q[i, h * hd : (h + 1) * hd] @ k[j, h * hd : (h + 1) * hd]) / math.sqrt(hd) for j in range(n)]
            mx = max(s)
            e = [math.exp(v - mx) for v in s]
            z = math.fsum(e)
            out[h, i] = [v / z for v in e]
    return out
