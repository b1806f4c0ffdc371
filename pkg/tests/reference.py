"""Slow, loop-based reference implementations used as test oracles.

Nothing here calls into the package's numeric code; inputs are plain
bitmaps, lists and floats.
"""

import itertools
import math

import numpy as np

EPS = 1e-7


def clamp(p, hi=1 - EPS):
    return min(max(p, EPS), hi)


# -- masks ----------------------------------------------------------------

def rle_encode(bitmap):
    runs, cur, n = [], False, 0
    for v in np.asarray(bitmap, dtype=bool).ravel().tolist():
        if v == cur:
            n += 1
        else:
            runs.append(n)
            cur, n = v, 1
    runs.append(n)
    return tuple(runs)


def iou(a, b):
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    inter = int(np.count_nonzero(a & b))
    union = int(np.count_nonzero(a | b))
    return inter / union if union else 0.0


def severe_flags(bitmaps, threshold=1 / 3):
    h, w = bitmaps[0].shape
    flags = []
    for i, m in enumerate(bitmaps):
        shared = 0
        for r in range(h):
            for c in range(w):
                if m[r, c] and any(o[r, c] for j, o in enumerate(bitmaps) if j != i):
                    shared += 1
        flags.append(shared / m.sum() > threshold)
    return flags


# -- losses ---------------------------------------------------------------

def focal(p_t, alpha=0.25, gamma=2.0):
    p = min(max(p_t, EPS), 1.0)
    return -alpha * (1 - p) ** gamma * math.log(p)


def smooth_l1(t, v):
    s = 0.0
    for a, b in zip(t, v):
        d = abs(a - b)
        s += 0.5 * d * d if d < 1 else d - 0.5
    return s


def seg_ce(target, probs):
    s, n = 0.0, 0
    for y, p in zip(np.asarray(target).ravel().tolist(), np.asarray(probs).ravel().tolist()):
        p = clamp(p)
        s += math.log(p) if y else math.log(1 - p)
        n += 1
    return -s / n


def bce(y, p):
    s = 0.0
    for yi, pi in zip(y, p):
        pi = clamp(pi)
        s += yi * math.log(pi) + (1 - yi) * math.log(1 - pi)
    return -s / len(y)


def count_bce(k, e):
    return bce([1.0] * k + [0.0] * (len(e) - k), e)


def best_assignment(cost):
    """Exhaustive minimum over all injective row->column maps (rows <= cols)."""
    cost = np.asarray(cost, dtype=float)
    n_r, n_c = cost.shape
    if n_r > n_c:
        return best_assignment(cost.T)
    best = math.inf
    for cols in itertools.permutations(range(n_c), n_r):
        best = min(best, sum(cost[i, c] for i, c in enumerate(cols)))
    return best


def decomposition_loss(preds, gts):
    cost = [[1 - iou(p, g) for g in gts] for p in preds]
    total = best_assignment(cost)
    unmatched = len(gts) - min(len(preds), len(gts))
    return (total + unmatched) / len(gts)


def total_sl(c, a=1.0, b=1.0, g=1.0):
    cls, reg, seg, ocls, icount, iiou = c
    return cls + reg + seg + a * ocls + b * icount + g * iiou


def total_sassl(real, pseudo, synth, lam):
    return real + lam * (pseudo + synth)


# -- pseudo labels ----------------------------------------------------------

def threshold(grids, scores, theta_box=0.7, theta_p=0.5):
    out = []
    for grid, s in zip(grids, scores):
        if s < theta_box:
            continue
        h, w = grid.shape
        bm = np.zeros((h, w), dtype=bool)
        for r in range(h):
            for c in range(w):
                bm[r, c] = grid[r, c] >= theta_p
        if bm.any():
            out.append(bm)
    return out


# -- metrics --------------------------------------------------------------

def _iou_table(preds, gts):
    return [[iou(p, g) for g in gts] for p in preds]


def greedy_pairs(table, thr):
    cands = sorted(((-table[i][j], i, j) for i in range(len(table)) for j in range(len(table[i]))
                    if table[i][j] >= thr and table[i][j] > 0))
    up, ug, pairs = set(), set(), []
    for _, i, j in cands:
        if i not in up and j not in ug:
            up.add(i)
            ug.add(j)
            pairs.append((i, j))
    return pairs


def f1(preds, gts, thr=0.5):
    if not preds and not gts:
        return 1.0
    tp = len(greedy_pairs(_iou_table(preds, gts), thr)) if preds and gts else 0
    return 2 * tp / (len(preds) + len(gts))


def dice(preds, gts, thr=0.5):
    if not preds or not gts:
        return 1.0 if not preds and not gts else 0.0
    s = 0.0
    for i, j in greedy_pairs(_iou_table(preds, gts), thr):
        inter = int(np.logical_and(preds[i], gts[j]).sum())
        s += 2 * inter / (preds[i].sum() + gts[j].sum())
    return s / max(len(preds), len(gts))


def ap(preds, gts, scores, thr):
    """Interpolated AP: at every recall level take the best precision at or beyond it."""
    if not gts:
        return 1.0 if not preds else 0.0
    if not preds:
        return 0.0
    table = _iou_table(preds, gts)
    order = sorted(range(len(preds)), key=lambda i: -scores[i])
    taken, hits = set(), []
    for i in order:
        best_j, best_v = None, -1.0
        for j in range(len(gts)):
            if j not in taken and table[i][j] > best_v:
                best_j, best_v = j, table[i][j]
        ok = best_j is not None and best_v >= thr and best_v > 0
        if ok:
            taken.add(best_j)
        hits.append(ok)
    points = []
    tp = 0
    for k, hit in enumerate(hits, 1):
        tp += hit
        points.append((tp / len(gts), tp / k))
    area, prev_r = 0.0, 0.0
    for r, _ in points:
        if r > prev_r:
            area += (r - prev_r) * max(p for rr, p in points if rr >= r)
            prev_r = r
    return area


def mean_ap(preds, gts, scores):
    thrs = [0.5 + 0.05 * i for i in range(10)]
    return sum(ap(preds, gts, scores, t) for t in thrs) / len(thrs)


def aji_totals(preds, gts):
    """(C, U, S) of the one-use AJI matching: pooled intersection, pooled union
    plus unmatched area, and pooled |A| + |B| plus unmatched area."""
    table = _iou_table(preds, gts)
    best = [max((table[i][j] for i in range(len(preds))), default=0.0) for j in range(len(gts))]
    used = set()
    c = u = s = 0
    for j in sorted(range(len(gts)), key=lambda k: -best[k]):
        cand = [(table[i][j], -i) for i in range(len(preds)) if i not in used]
        v, neg_i = max(cand, default=(0.0, 0))
        if v > 0:
            i = -neg_i
            used.add(i)
            c += int(np.logical_and(preds[i], gts[j]).sum())
            u += int(np.logical_or(preds[i], gts[j]).sum())
            s += int(preds[i].sum()) + int(gts[j].sum())
        else:
            u += int(gts[j].sum())
            s += int(gts[j].sum())
    rest = sum(int(preds[i].sum()) for i in range(len(preds)) if i not in used)
    return c, u + rest, s + rest


def aji(preds, gts):
    if not preds and not gts:
        return 1.0
    c, u, _ = aji_totals(preds, gts)
    return c / u


# -- fidelity -------------------------------------------------------------

def mean_cov(x):
    x = [list(map(float, row)) for row in x]
    n, d = len(x), len(x[0])
    mu = [sum(r[k] for r in x) / n for k in range(d)]
    cov = [[sum((r[a] - mu[a]) * (r[b] - mu[b]) for r in x) / (n - 1) for b in range(d)] for a in range(d)]
    return np.array(mu), np.array(cov)


def fid_diagonal(mu_a, d_a, mu_b, d_b):
    return sum((x - y) ** 2 for x, y in zip(mu_a, mu_b)) + sum(
        (math.sqrt(x) - math.sqrt(y)) ** 2 for x, y in zip(d_a, d_b))


# -- layered masks --------------------------------------------------------

def max_clique(bitmaps):
    n = len(bitmaps)
    adj = [[i != j and bool(np.logical_and(bitmaps[i], bitmaps[j]).any()) for j in range(n)] for i in range(n)]
    best = 1 if n else 0
    for size in range(2, n + 1):
        if any(all(adj[a][b] for a, b in itertools.combinations(c, 2))
               for c in itertools.combinations(range(n), size)):
            best = size
    return best
