"""Independent scalar-loop reference implementations used by the tests.

Nothing here imports the code under test; each function re-derives its
result pixel by pixel from the defining formula.
"""

import math

import numpy as np

B = {"B1": 0, "B2": 1, "B3": 2, "B4": 3, "B10": 10, "B11": 11}


def clamp01(v):
    return 0.0 if v < 0.0 else 1.0 if v > 1.0 else v


def cloud_score_pixel(b1, b2, b3, b4, b10):
    return min(
        clamp01((b2 - 0.1) / (0.5 - 0.1)),
        clamp01((b1 - 0.1) / (0.3 - 0.1)),
        clamp01((b10 + b1 - 0.15) / (0.2 - 0.15)),
        clamp01((b4 + b3 + b2 - 0.2) / (0.8 - 0.2)),
    )


def cloud_pipeline_loops(cube, threshold=0.2, alpha=0.8):
    """(score, mask, ndsi, refined, weights) computed one pixel at a time."""
    _, h, w = cube.shape
    score = np.zeros((h, w))
    mask = np.zeros((h, w), dtype=np.uint8)
    snow = np.zeros((h, w))
    refined = np.zeros((h, w), dtype=np.uint8)
    weights = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            px = {k: float(cube[v, i, j]) for k, v in B.items()}
            score[i, j] = cloud_score_pixel(px["B1"], px["B2"], px["B3"], px["B4"], px["B10"])
            mask[i, j] = 1 if score[i, j] > threshold else 0
            den = px["B3"] + px["B11"]
            snow[i, j] = 0.0 if den == 0 else (px["B3"] - px["B11"]) / den
            refined[i, j] = mask[i, j] * (1 if snow[i, j] <= 0.6 else 0)
            weights[i, j] = alpha * refined[i, j] + (1 - alpha) * (1 - refined[i, j])
    return score, mask, snow, refined, weights


def conv2d_loops(x, weight, bias):
    """Same-padded stride-1 cross-correlation; x (C, H, W), weight (O, C, k, k)."""
    c, h, w = x.shape
    o, _, k, _ = weight.shape
    p = k // 2
    out = np.zeros((o, h, w))
    for oc in range(o):
        for i in range(h):
            for j in range(w):
                acc = float(bias[oc])
                for ic in range(c):
                    for di in range(k):
                        for dj in range(k):
                            y, z = i + di - p, j + dj - p
                            if 0 <= y < h and 0 <= z < w:
                                acc += float(weight[oc, ic, di, dj]) * float(x[ic, y, z])
                out[oc, i, j] = acc
    return out


def softmax_row(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def window_attention_loops(x, wqkv, bqkv, wproj, bproj, rel_table, window, heads):
    """Brute-force windowed multi-head attention on a (C, H, W) array.

    ``wqkv`` is (3C, C) acting on channel vectors, ``rel_table`` is
    ((2w-1)^2, heads) indexed by (dy + w - 1) * (2w - 1) + (dx + w - 1).
    Returns (output (C, H, W), list of per-window per-head weight matrices).
    """
    c, h, w = x.shape
    d = c // heads
    out = np.zeros((c, h, w))
    all_weights = []
    for wy in range(0, h, window):
        for wx in range(0, w, window):
            pos = [(wy + a, wx + b) for a in range(window) for b in range(window)]
            tokens = [x[:, i, j] for i, j in pos]
            qkv = [wqkv @ t + bqkv for t in tokens]
            merged = [np.zeros(c) for _ in pos]
            for hd in range(heads):
                q = [v[hd * d : (hd + 1) * d] for v in qkv]
                k = [v[c + hd * d : c + (hd + 1) * d] for v in qkv]
                val = [v[2 * c + hd * d : 2 * c + (hd + 1) * d] for v in qkv]
                mat = []
                for n, (yi, xi) in enumerate(pos):
                    logits = []
                    for m, (yj, xj) in enumerate(pos):
                        dy, dx = yi - yj, xi - xj
                        idx = (dy + window - 1) * (2 * window - 1) + (dx + window - 1)
                        logits.append(float(q[n] @ k[m]) / math.sqrt(d) + rel_table[idx, hd])
                    wts = softmax_row(logits)
                    mat.append(wts)
                    merged[n][hd * d : (hd + 1) * d] = sum(wt * val[m] for m, wt in enumerate(wts))
                all_weights.append(np.array(mat))
            for n, (i, j) in enumerate(pos):
                out[:, i, j] = wproj @ merged[n] + bproj
    return out, all_weights


def ssim_pixelwise(x, y, size=11, sigma=1.5, c1=1e-4, c2=9e-4):
    """Local SSIM per pixel and band on (C, H, W) arrays via explicit window sums."""
    c, h, w = x.shape
    r = size // 2
    g = np.exp(-((np.arange(size) - r) ** 2) / (2 * sigma**2))
    g /= g.sum()

    def sym(i, n):
        # symmetric reflection including the edge sample
        while i < 0 or i >= n:
            i = -i - 1 if i < 0 else 2 * n - i - 1
        return i

    out = np.zeros((c, h, w))
    for b in range(c):
        for i in range(h):
            for j in range(w):
                mx = my = sxx = syy = sxy = 0.0
                for a in range(size):
                    for bb in range(size):
                        wt = g[a] * g[bb]
                        u, v = sym(i + a - r, h), sym(j + bb - r, w)
                        xv, yv = x[b, u, v], y[b, u, v]
                        mx += wt * xv
                        my += wt * yv
                        sxx += wt * xv * xv
                        syy += wt * yv * yv
                        sxy += wt * xv * yv
                vx, vy, cxy = sxx - mx * mx, syy - my * my, sxy - mx * my
                out[b, i, j] = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return out.mean(axis=0)
