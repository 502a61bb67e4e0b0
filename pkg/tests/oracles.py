"""Independent brute-force reference implementations (plain Python loops)."""

import math

import numpy as np


def matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def conv2d(x, w, b, stride=1, dilation=1, padding=0):
    c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((co, ho, wo))
    for o in range(co):
        for i in range(ho):
            for j in range(wo):
                s = 0.0 if b is None else b[o]
                for ch in range(c):
                    for u in range(kh):
                        for v in range(kw):
                            r = i * stride + u * dilation - padding
                            q = j * stride + v * dilation - padding
                            if 0 <= r < h and 0 <= q < wd:
                                s += x[ch, r, q] * w[o, ch, u, v]
                out[o, i, j] = s
    return out


def attention(q, k, v, wq, bq, wk, bk, wv, bv, wo, bo, heads):
    """Two-loop multi-head attention on (L, d) inputs with x @ W + b projections."""
    qp, kp, vp = q @ wq + bq, k @ wk + bk, v @ wv + bv
    d = q.shape[1]
    dh = d // heads
    out = np.zeros((q.shape[0], d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(q.shape[0]):
            scores = [sum(qp[i, sl][t] * kp[j, sl][t] for t in range(dh)) / math.sqrt(dh) for j in range(k.shape[0])]
            mx = max(scores)
            e = [math.exp(s - mx) for s in scores]
            z = sum(e)
            for j in range(k.shape[0]):
                out[i, sl] += (e[j] / z) * vp[j, sl]
    return out @ wo + bo


def seg_loss(logits, labels, ignore=255, smooth=1.0):
    """Per-pixel cross-entropy mean plus macro soft Dice over present classes."""
    n, k, h, w = logits.shape
    ce, count = 0.0, 0
    inter = [0.0] * k
    psum = [0.0] * k
    tsum = [0.0] * k
    pred_present = [False] * k
    for b in range(n):
        for i in range(h):
            for j in range(w):
                y = int(labels[b, i, j])
                if y == ignore:
                    continue
                z = [float(logits[b, c, i, j]) for c in range(k)]
                mx = max(z)
                lse = mx + math.log(sum(math.exp(v - mx) for v in z))
                ce += lse - z[y]
                count += 1
                pred_present[int(np.argmax(z))] = True
                for c in range(k):
                    p = math.exp(z[c] - lse)
                    psum[c] += p
                    if c == y:
                        inter[c] += p
                        tsum[c] += 1
    if count == 0:
        return 0.0
    present = [c for c in range(k) if tsum[c] > 0 or pred_present[c]]
    dice = sum(1 - (2 * inter[c] + smooth) / (psum[c] + tsum[c] + smooth) for c in present) / len(present)
    return ce / count + dice


def iou_sets(pred, label, k, ignore=255):
    """Per-class IoU from pixel-coordinate sets; None where the union is empty."""
    out = []
    for c in range(k):
        p = {(i, j) for (i, j), v in np.ndenumerate(pred) if v == c and label[i, j] != ignore}
        t = {(i, j) for (i, j), v in np.ndenumerate(label) if v == c}
        u = p | t
        out.append(None if not u else len(p & t) / len(u))
    return out


def confusion(pred, label, k, ignore=255):
    cm = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(label.ravel(), pred.ravel()):
        if t != ignore:
            cm[t, p] += 1
    return cm
