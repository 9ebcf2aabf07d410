"""Slow loop-based reference implementations used as test oracles."""

import math

import numpy as np


def corr_oracle(fs, ft):
    d, h, w = fs.shape
    out = np.zeros((h, w, h, w))
    for y in range(h):
        for x in range(w):
            for v in range(h):
                for u in range(w):
                    out[y, x, v, u] = sum(fs[k, y, x] * ft[k, v, u] for k in range(d)) / math.sqrt(d)
    return out


def pool_oracle(m):
    h, w = m.shape
    out = np.zeros(((h + 1) // 2, (w + 1) // 2))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            out[i, j] = m[2 * i : 2 * i + 2, 2 * j : 2 * j + 2].mean()
    return out


def sample_oracle(m, x, y):
    h, w = m.shape
    x0, y0 = math.floor(x), math.floor(y)
    total = 0.0
    for xi, yi in ((x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)):
        if 0 <= xi < w and 0 <= yi < h:
            total += (1 - abs(x - xi)) * (1 - abs(y - yi)) * m[yi, xi]
    return total


def upsample_oracle(f):
    _, h, w = f.shape
    out = np.zeros((2, 8 * h, 8 * w))
    def src(i, n):
        s = max((i + 0.5) / 8 - 0.5, 0.0)
        i0 = min(int(math.floor(s)), n - 1)
        i1 = min(i0 + 1, n - 1)
        return i0, i1, s - i0
    for i in range(8 * h):
        y0, y1, wy = src(i, h)
        for j in range(8 * w):
            x0, x1, wx = src(j, w)
            out[:, i, j] = 8 * ((1 - wy) * ((1 - wx) * f[:, y0, x0] + wx * f[:, y0, x1])
                                + wy * ((1 - wx) * f[:, y1, x0] + wx * f[:, y1, x1]))
    return out


def metric_oracle(pred, gt, n_thresholds=(1, 2, 3)):
    """Per-pixel loops for EPE, homogeneous angular error and N-pixel error."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    h, w, _ = pred.shape
    epes, aes = [], []
    for y in range(h):
        for x in range(w):
            du = pred[y, x, 0] - gt[y, x, 0]
            dv = pred[y, x, 1] - gt[y, x, 1]
            epes.append(math.sqrt(du * du + dv * dv))
            a = (pred[y, x, 0], pred[y, x, 1], 1.0)
            b = (gt[y, x, 0], gt[y, x, 1], 1.0)
            dot = sum(i * j for i, j in zip(a, b))
            na = math.sqrt(sum(i * i for i in a))
            nb = math.sqrt(sum(i * i for i in b))
            aes.append(math.degrees(math.acos(max(-1.0, min(1.0, dot / (na * nb))))))
    npe = {n: 100.0 * sum(1 for e in epes if e > n) / len(epes) for n in n_thresholds}
    return sum(epes) / len(epes), sum(aes) / len(aes), npe
