"""Brute-force reference computations, written with explicit loops.

They deliberately share no code with the package.
"""

import math

import numpy as np


def l1(pred, gt):
    total, n = 0.0, 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        total += abs(float(p) - float(g))
        n += 1
    return total / n


def _tiles(img, patch):
    h, w = img.shape
    out = []
    for r in range(0, h - patch + 1, patch):
        for c in range(0, w - patch + 1, patch):
            out.append([float(img[r + i, c + j]) for i in range(patch) for j in range(patch)])
    return out


def pdl(pred, gt, directions, patch):
    pred = np.asarray(pred, dtype=np.float64).reshape((-1,) + np.shape(pred)[-2:])
    gt = np.asarray(gt, dtype=np.float64).reshape((-1,) + np.shape(gt)[-2:])
    per_image = []
    for a, b in zip(pred, gt):
        ta, tb = _tiles(a, patch), _tiles(b, patch)
        per_dir = []
        for u in directions:
            pa = sorted(sum(x * ui for x, ui in zip(t, u)) for t in ta)
            pb = sorted(sum(x * ui for x, ui in zip(t, u)) for t in tb)
            per_dir.append(sum(abs(x - y) for x, y in zip(pa, pb)) / len(pa))
        per_image.append(sum(per_dir) / len(per_dir))
    return sum(per_image) / len(per_image)


def psnr(a, b, data_range=1.0):
    a, b = np.ravel(a), np.ravel(b)
    se = sum((float(x) - float(y)) ** 2 for x, y in zip(a, b)) / len(a)
    return math.inf if se == 0 else 10 * math.log10(data_range**2 / se)


def ssim(a, b, window=8, k1=0.01, k2=0.03, data_range=1.0):
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    h, w = a.shape
    vals = []
    n = window * window
    for r in range(h - window + 1):
        for c in range(w - window + 1):
            xa = [float(a[r + i, c + j]) for i in range(window) for j in range(window)]
            xb = [float(b[r + i, c + j]) for i in range(window) for j in range(window)]
            ma, mb = sum(xa) / n, sum(xb) / n
            va = sum((x - ma) ** 2 for x in xa) / n
            vb = sum((x - mb) ** 2 for x in xb) / n
            cov = sum((x - ma) * (y - mb) for x, y in zip(xa, xb)) / n
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)


def catmull_rom_hermite(p0, p1, p2, p3, t):
    """Cubic Hermite segment between p1 and p2 with central-difference tangents."""
    m1, m2 = (p2 - p0) / 2.0, (p3 - p1) / 2.0
    t2, t3 = t * t, t * t * t
    return (2 * t3 - 3 * t2 + 1) * p1 + (t3 - 2 * t2 + t) * m1 + (-2 * t3 + 3 * t2) * p2 + (t3 - t2) * m2


def attention_window(x, wq, wk, wv, table, m, heads):
    """Per-head softmax(Q K^T / sqrt(d) + B) V for one window, loops over heads and offsets."""
    t, c = x.shape
    d = c // heads
    coords = [(i // m, i % m) for i in range(t)]
    outs = []
    for h in range(heads):
        q = x @ wq[:, h * d : (h + 1) * d]
        k = x @ wk[:, h * d : (h + 1) * d]
        v = x @ wv[:, h * d : (h + 1) * d]
        y = np.zeros((t, d))
        for i in range(t):
            logits = []
            for j in range(t):
                dy = coords[i][0] - coords[j][0] + m - 1
                dx = coords[i][1] - coords[j][1] + m - 1
                logits.append(float(q[i] @ k[j]) / math.sqrt(d) + table[dy * (2 * m - 1) + dx, h])
            mx = max(logits)
            e = [math.exp(l - mx) for l in logits]
            s = sum(e)
            for j in range(t):
                y[i] += e[j] / s * v[j]
        outs.append(y)
    return np.concatenate(outs, axis=1)


def central_difference(f, x, h=1e-5):
    return (f(x + h) - f(x - h)) / (2 * h)
