"""Slow, loop-based reference implementations used only by the tests.

None of these call the package's vectorized code paths.
"""

import math

import numpy as np


def neighborhood(x, yy, xx, k):
    h, w, c = x.shape
    r = k // 2
    row = []
    for dy in range(k):
        for dx in range(k):
            sy, sx = yy + dy - r, xx + dx - r
            for ch in range(c):
                row.append(x[sy, sx, ch] if 0 <= sy < h and 0 <= sx < w else 0.0)
    return np.array(row, dtype=np.float64)


def window_mean(x, k):
    h, w, c = x.shape
    r = k // 2
    out = np.zeros((h, w, c))
    for yy in range(h):
        for xx in range(w):
            for ch in range(c):
                total = 0.0
                for sy in range(yy - r, yy + r + 1):
                    for sx in range(xx - r, xx + r + 1):
                        if 0 <= sy < h and 0 <= sx < w:
                            total += float(x[sy, sx, ch])
                out[yy, xx, ch] = total / (k * k)
    return out


def matmul_loops(a, b):
    m, kk = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            out[i, j] = sum(float(a[i, t]) * float(b[t, j]) for t in range(kk))
    return out


def leaky(v, slope=0.2):
    return v if v > 0 else slope * v


def sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def dense(vec, w, b, act=None):
    out = []
    for j in range(w.shape[1]):
        s = float(b[j]) + sum(float(vec[i]) * float(w[i, j]) for i in range(len(vec)))
        out.append(act(s) if act else s)
    return np.array(out)


def kernel_oracle(c, params):
    hid = dense(c, params.trunk_w, params.trunk_b, leaky)
    w_cin = dense(hid, params.head_cin_w, params.head_cin_b, sig)
    w_s = dense(hid, params.head_s_w, params.head_s_b, sig)
    w_cout = dense(hid, params.head_cout_w, params.head_cout_b, sig)
    c_in, kk, c_out = params.W.shape
    ker = np.zeros((kk * c_in, c_out))
    for ch in range(c_in):
        for tap in range(kk):
            for o in range(c_out):
                ker[tap * c_in + ch, o] = w_cin[ch] * w_s[tap] * w_cout[o] * params.W[ch, tap, o]
    return ker


def bias_oracle(c, params):
    hid = dense(c, params.bias_w1, params.bias_b1, leaky)
    return dense(hid, params.bias_w2, params.bias_b2)


def canconv_oracle(x, index, params, training=False):
    """Per-pixel CANConv: each pixel recomputes its cluster's centroid, kernel and bias."""
    h, w, _ = x.shape
    k = params.k
    rows = {(yy, xx): neighborhood(x, yy, xx, k) for yy in range(h) for xx in range(w)}
    out = np.zeros((h, w, params.c_out))
    for yy in range(h):
        for xx in range(w):
            cid = index[yy, xx]
            members = [rows[(a, b)] for a in range(h) for b in range(w) if index[a, b] == cid]
            if training and len(members) < params.eta * h * w:
                members = list(rows.values())
            centroid = sum(members) / len(members)
            ker = kernel_oracle(centroid, params)
            bias = bias_oracle(centroid, params)
            p = rows[(yy, xx)]
            for o in range(params.c_out):
                out[yy, xx, o] = sum(p[t] * ker[t, o] for t in range(len(p))) + bias[o]
    return out


def conv_oracle(x, weights, bias, k, stride=1):
    """Zero-padded 'same' convolution with weights laid out ``(k*k*C_in, C_out)``."""
    h, w, _ = x.shape
    ho, wo = h // stride, w // stride
    out = np.zeros((ho, wo, weights.shape[1]))
    for yy in range(ho):
        for xx in range(wo):
            p = neighborhood(x, yy * stride, xx * stride, k)
            for o in range(weights.shape[1]):
                out[yy, xx, o] = bias[o] + sum(p[t] * weights[t, o] for t in range(len(p)))
    return out


def best_match_accuracy(labels, planted, k):
    """Fraction of points agreeing with ``planted`` under the best bijective relabeling."""
    from itertools import permutations
    best = 0
    for perm in permutations(range(k)):
        mapped = np.array([perm[v] for v in labels])
        best = max(best, int((mapped == planted).sum()))
    return best / len(planted)


def sam_loop(pred, gt):
    angles = []
    for p, g in zip(pred.reshape(-1, pred.shape[-1]), gt.reshape(-1, gt.shape[-1])):
        dot = sum(float(a) * float(b) for a, b in zip(p, g))
        npn = math.sqrt(sum(float(a) ** 2 for a in p))
        ngn = math.sqrt(sum(float(b) ** 2 for b in g))
        cosv = max(-1.0, min(1.0, dot / (npn * ngn)))
        angles.append(math.degrees(math.acos(cosv)))
    return sum(angles) / len(angles)


def ergas_loop(pred, gt, ratio=4):
    bands = gt.shape[-1]
    total = 0.0
    for b in range(bands):
        p = pred[..., b].ravel().astype(np.float64)
        g = gt[..., b].ravel().astype(np.float64)
        mse = sum((pi - gi) ** 2 for pi, gi in zip(p, g)) / len(g)
        mu = sum(g) / len(g)
        total += mse / mu ** 2
    return 100.0 / ratio * math.sqrt(total / bands)


def uiqi_loop(pred, gt, window):
    h, w, bands = gt.shape
    vals = []
    for b in range(bands):
        for y0 in range(h - window + 1):
            for x0 in range(w - window + 1):
                p = pred[y0:y0 + window, x0:x0 + window, b].ravel().astype(np.float64)
                g = gt[y0:y0 + window, x0:x0 + window, b].ravel().astype(np.float64)
                n = len(p)
                mp, mg = sum(p) / n, sum(g) / n
                vp = sum((a - mp) ** 2 for a in p) / n
                vg = sum((a - mg) ** 2 for a in g) / n
                cov = sum((a - mp) * (c - mg) for a, c in zip(p, g)) / n
                if vp + vg == 0:
                    continue
                lum = 1.0 if mp == 0 and mg == 0 else 2 * mp * mg / (mp ** 2 + mg ** 2)
                vals.append(2 * cov / (vp + vg) * lum)
    return sum(vals) / len(vals)
