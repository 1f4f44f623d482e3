"""Independent reference computations used by several test modules.

Everything here is plain-Python loops over scalars or numpy broadcasting,
deliberately sharing no code with the package.
"""

import math

import numpy as np


def affinity_scalar(q, k, eps=1e-5):
    """softmax(rowwise-standardize(Q^T K)) with explicit loops. q, k: lists [N][D]."""
    n, d = len(q), len(q[0])
    s = [[sum(q[t][i] * k[t][j] for t in range(n)) for j in range(d)] for i in range(d)]
    out = []
    for row in s:
        mean = sum(row) / d
        var = sum((x - mean) ** 2 for x in row) / d
        z = [(x - mean) / math.sqrt(var + eps) for x in row]
        m = max(z)
        e = [math.exp(x - m) for x in z]
        tot = sum(e)
        out.append([x / tot for x in e])
    return out


def matmul(a, b):
    return [[sum(a[i][t] * b[t][j] for t in range(len(b))) for j in range(len(b[0]))] for i in range(len(a))]


def cross_attention_scalar(f_l, f_u, w_q, w_k, w_v):
    """f_l, f_u: [C][h][w] nested lists; returns [2C][h][w]."""
    c, h, w = len(f_l), len(f_l[0]), len(f_l[0][0])
    tok = lambda f: [[f[ch][r][col] for ch in range(c)] for r in range(h) for col in range(w)]
    q, k, v = matmul(tok(f_l), w_q), matmul(tok(f_u), w_k), matmul(tok(f_u), w_v)
    a = affinity_scalar(q, k)
    d = len(a)
    out_t = [[sum(a[i][j] * v[t][j] for j in range(d)) for i in range(d)] for t in range(h * w)]
    return [[[out_t[r * w + col][i] for col in range(w)] for r in range(h)] for i in range(d)]


def boundary_oracle(mask):
    h, w = mask.shape
    pts = []
    for r in range(h):
        for c in range(w):
            if not mask[r, c]:
                continue
            nbrs = [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)]
            if any(not (0 <= y < h and 0 <= x < w) or not mask[y, x] for y, x in nbrs):
                pts.append((r, c))
    return np.array(pts, dtype=np.float64).reshape(-1, 2)


def surface_oracle(pred, gt):
    """All-pairs O(n^2) ASD and HD95 on boundary pixel sets."""
    bp, bg = boundary_oracle(pred), boundary_oracle(gt)
    d = np.sqrt(((bp[:, None, :] - bg[None, :, :]) ** 2).sum(-1))
    d_pg, d_gp = d.min(1), d.min(0)
    asd = (d_pg.mean() + d_gp.mean()) / 2
    pooled = np.sort(np.concatenate([d_pg, d_gp]))
    # linear interpolation between order statistics
    pos = 0.95 * (len(pooled) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(pooled) - 1)
    hd95 = pooled[lo] + (pos - lo) * (pooled[hi] - pooled[lo])
    return asd, hd95


def overlap_oracle(pred, gt):
    inter = union = sp = sg = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        inter += p and g
        union += p or g
        sp += p
        sg += g
    dice = 1.0 if sp + sg == 0 else 2 * inter / (sp + sg)
    jac = 1.0 if union == 0 else inter / union
    return dice, jac


def central_differences(f, params, step=1e-5):
    """Numerical gradient of scalar ``f()`` w.r.t. each tensor in ``params`` (modified in place)."""
    import torch

    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = f().item()
                flat[i] = orig - step
                down = f().item()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * step)
            grads.append(g)
    return grads


def max_relative_error(analytic, numeric, floor=1e-12):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst
