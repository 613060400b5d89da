"""Slow, obviously-correct reference implementations used only by the tests."""

from __future__ import annotations

import math

import numpy as np


def conv2d_naive(x, w, b=None, stride=1, pad=0, groups=1):
    n, cin, h, wd = x.shape
    cout, cpg, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    og = cout // groups
    out = np.zeros((n, cout, ho, wo))
    for bn in range(n):
        for co in range(cout):
            g = co // og
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else b[co]
                    for ci in range(cpg):
                        for u in range(kh):
                            for v in range(kw):
                                y = i * stride + u - pad
                                xx = j * stride + v - pad
                                if 0 <= y < h and 0 <= xx < wd:
                                    acc += x[bn, g * cpg + ci, y, xx] * w[co, ci, u, v]
                    out[bn, co, i, j] = acc
    return out


def conv_transpose2d_naive(x, w, stride=1):
    n, cin, h, wd = x.shape
    _, cout, kh, kw = w.shape
    out = np.zeros((n, cout, (h - 1) * stride + kh, (wd - 1) * stride + kw))
    for bn in range(n):
        for ci in range(cin):
            for i in range(h):
                for j in range(wd):
                    for co in range(cout):
                        for u in range(kh):
                            for v in range(kw):
                                out[bn, co, i * stride + u, j * stride + v] += x[bn, ci, i, j] * w[ci, co, u, v]
    return out


def dense_attention(q, k, v, heads, bias=None):
    """Per-query loop softmax attention over ``(T, d)`` tokens; ``bias`` is ``(heads, T, T)``."""
    t, d = q.shape
    dh = d // heads
    out = np.zeros((t, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(t):
            logits = np.array([q[i, sl] @ k[j, sl] / math.sqrt(dh) for j in range(t)])
            if bias is not None:
                logits = logits + bias[h, i]
            e = np.exp(logits - logits.max())
            p = e / e.sum()
            out[i, sl] = sum(p[j] * v[j, sl] for j in range(t))
    return out


def shifted_mask_bruteforce(h, w, m, s):
    """Masked (query, key) pairs per window of a map rolled by ``-s``.

    Two tokens may attend to each other iff neither or both were wrapped
    around the torus along each axis by the roll.
    """
    masks = []
    for wy in range(h // m):
        for wx in range(w // m):
            toks = [(wy * m + a, wx * m + b) for a in range(m) for b in range(m)]
            wrapped = [((i + s) >= h, (j + s) >= w) for i, j in toks]
            mm = np.zeros((m * m, m * m), dtype=bool)
            for p in range(m * m):
                for q in range(m * m):
                    mm[p, q] = wrapped[p] != wrapped[q]
            masks.append(mm)
    return np.stack(masks)


def combined_loss_loop(logits, mask, eps=1e-5):
    """0.5 * CE + 0.5 * soft Dice with explicit pixel loops."""
    n, k, h, w = logits.shape
    ce = 0.0
    inter = np.zeros(k)
    psum = np.zeros(k)
    gsum = np.zeros(k)
    for b in range(n):
        for i in range(h):
            for j in range(w):
                z = logits[b, :, i, j]
                mx = max(z)
                exps = [math.exp(v - mx) for v in z]
                tot = sum(exps)
                probs = [e / tot for e in exps]
                t = mask[b, i, j]
                ce -= math.log(probs[t])
                for c in range(k):
                    g = 1.0 if c == t else 0.0
                    inter[c] += probs[c] * g
                    psum[c] += probs[c]
                    gsum[c] += g
    ce /= n * h * w
    dice = 1.0 - sum((2 * inter[c] + eps) / (psum[c] + gsum[c] + eps) for c in range(k)) / k
    return 0.5 * ce + 0.5 * dice


def adamw_reference(p0, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar-loop AdamW over a sequence of gradient arrays."""
    p = np.array(p0, dtype=np.float64).ravel().tolist()
    m = [0.0] * len(p)
    v = [0.0] * len(p)
    for t, g in enumerate(grads, start=1):
        g = np.asarray(g, dtype=np.float64).ravel().tolist()
        for i in range(len(p)):
            p[i] = p[i] * (1 - lr * wd)
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            mhat = m[i] / (1 - b1**t)
            vhat = v[i] / (1 - b2**t)
            p[i] -= lr * mhat / (math.sqrt(vhat) + eps)
    return np.array(p).reshape(np.shape(p0))


def dice_bruteforce(pred, true, k):
    inter = cnt_p = cnt_g = 0
    for a, b in zip(np.ravel(pred), np.ravel(true)):
        cnt_p += a == k
        cnt_g += b == k
        inter += (a == k) and (b == k)
    if cnt_p + cnt_g == 0:
        return 1.0
    return 2.0 * inter / (cnt_p + cnt_g)


def boundary_bruteforce(mask):
    h, w = mask.shape
    pts = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            edge = False
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    y, x = i + di, j + dj
                    if not (0 <= y < h and 0 <= x < w) or not mask[y, x]:
                        edge = True
            if edge:
                pts.append((i, j))
    return pts


def hausdorff_bruteforce(pred, true, k, percentile):
    a = boundary_bruteforce(np.asarray(pred) == k)
    b = boundary_bruteforce(np.asarray(true) == k)
    if not a and not b:
        return 0.0
    if not a or not b:
        return math.hypot(*np.shape(pred))

    def directed(src, dst):
        return [min(math.sqrt((y - u) ** 2 + (x - v) ** 2) for u, v in dst) for y, x in src]

    d = np.array(directed(a, b) + directed(b, a))
    return float(np.percentile(d, percentile))


def cosine_lr(epoch, total, base, warmup):
    if epoch < warmup:
        return base * (epoch + 1) / warmup
    return base * 0.5 * (1 + math.cos(math.pi * (epoch - warmup) / (total - warmup)))
