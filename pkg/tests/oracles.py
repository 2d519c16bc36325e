"""Independent brute-force references. Plain loops, no shared code with the package."""

from __future__ import annotations

import itertools
import math

import numpy as np


def dist(u, v) -> float:
    return math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(u, v)))


def silhouette_loop(points, labels) -> float:
    n = len(points)
    total = 0.0
    clusters = sorted(set(int(l) for l in labels))
    for i in range(n):
        own = int(labels[i])
        members = [j for j in range(n) if int(labels[j]) == own and j != i]
        if not members:
            continue  # singleton contributes 0
        a = sum(dist(points[i], points[j]) for j in members) / len(members)
        b = math.inf
        for c in clusters:
            if c == own:
                continue
            others = [j for j in range(n) if int(labels[j]) == c]
            b = min(b, sum(dist(points[i], points[j]) for j in others) / len(others))
        total += (b - a) / max(a, b)
    return total / n


def davies_bouldin_loop(points, labels) -> float:
    clusters = sorted(set(int(l) for l in labels))
    cents, spreads = [], []
    for c in clusters:
        idx = [j for j in range(len(points)) if int(labels[j]) == c]
        d = len(points[0])
        cen = [sum(float(points[j][k]) for j in idx) / len(idx) for k in range(d)]
        cents.append(cen)
        spreads.append(sum(dist(points[j], cen) for j in idx) / len(idx))
    total = 0.0
    for i in range(len(clusters)):
        total += max((spreads[i] + spreads[j]) / dist(cents[i], cents[j]) for j in range(len(clusters)) if j != i)
    return total / len(clusters)


def agreement_oracle(sil_scores, db_scores, candidates) -> int:
    """Hand execution of the agreement rule over a full score table."""
    n = len(candidates)
    sil_order = sorted(range(n), key=lambda j: -sil_scores[j])
    db_order = sorted(range(n), key=lambda j: db_scores[j])
    for i in range(n):
        if sil_order[i] in db_order[: i + 1]:
            return candidates[sil_order[i]]
    raise AssertionError("no agreement")


def mardia_loop(x):
    """b_{1,p} and b_{2,p} by explicit double sums with the MLE covariance."""
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    mean = [sum(x[i, k] for i in range(n)) / n for k in range(d)]
    xc = [[x[i, k] - mean[k] for k in range(d)] for i in range(n)]
    s = np.zeros((d, d))
    for i in range(n):
        for a in range(d):
            for b in range(d):
                s[a, b] += xc[i][a] * xc[i][b] / n
    sinv = np.linalg.inv(s)

    def g(i, j):
        return sum(xc[i][a] * sinv[a, b] * xc[j][b] for a in range(d) for b in range(d))

    gm = [[g(i, j) for j in range(n)] for i in range(n)]
    b1 = sum(gm[i][j] ** 3 for i in range(n) for j in range(n)) / n**2
    b2 = sum(gm[i][i] ** 2 for i in range(n)) / n
    return b1, b2


def ssim_loop(x, y, size=11, sigma=1.5, k1=0.01, k2=0.03, L=1.0) -> float:
    """SSIM from the per-window weighted-moment formula, visiting every valid window."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 2:
        x, y = x[:, :, None], y[:, :, None]
    r = (size - 1) / 2.0
    g = [math.exp(-((i - r) ** 2) / (2 * sigma * sigma)) for i in range(size)]
    w = np.array([[a * b for b in g] for a in g])
    w /= w.sum()
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    H, W, C = x.shape
    chans = []
    for c in range(C):
        vals = []
        for i in range(H - size + 1):
            for j in range(W - size + 1):
                px = x[i : i + size, j : j + size, c]
                py = y[i : i + size, j : j + size, c]
                mx = float((w * px).sum())
                my = float((w * py).sum())
                vx = float((w * (px - mx) ** 2).sum())
                vy = float((w * (py - my) ** 2).sum())
                cxy = float((w * (px - mx) * (py - my)).sum())
                vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
        chans.append(sum(vals) / len(vals))
    return sum(chans) / C


def emd_bruteforce(a, b) -> float:
    """Equal-size uniform measures: the optimum is a permutation, so try them all."""
    n = len(a)
    best = math.inf
    for perm in itertools.permutations(range(n)):
        best = min(best, sum(dist(a[i], b[perm[i]]) for i in range(n)) / n)
    return best


def cosine(u, v) -> float:
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(a * a for a in v))
    return sum(a * b for a, b in zip(u, v)) / (nu * nv)


# W and p from scipy.stats.shapiro on the vectors built by sw_vector(i), computed once and frozen.
SHAPIRO_REFERENCE = [
    (0, 0.9249720803005005, 0.47009327503999454),
    (1, 0.9862480947339598, 0.9375496493359854),
    (2, 0.8710435415349387, 0.18956562546632333),
    (3, 0.8809104236030993, 0.10685131025638095),
    (4, 0.9184901886524284, 0.09267485971507805),
    (5, 0.7925379296054698, 5.927055836765414e-07),
    (6, 0.9916467995270977, 0.6876840247160501),
    (7, 0.943836861398108, 3.61509293205735e-11),
    (8, 0.8202224938681654, 5.31528434799441e-32),
    (9, 0.9986153785453532, 0.03660231859745929),
]


def sw_vector(i):
    rng = np.random.default_rng(100 + i)
    n = [3, 4, 7, 11, 20, 50, 120, 400, 1000, 2500][i]
    kind = i % 3
    if kind == 0:
        return rng.standard_normal(n)
    if kind == 1:
        return rng.uniform(size=n)
    return rng.exponential(size=n)
