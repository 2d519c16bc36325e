"""Representative timestep selection over denoising trajectories.

Each timestep of a generation becomes one point (all layers pooled to a common
grid, flattened, concatenated and PCA-projected per image). K-means with a
silhouette / Davies-Bouldin agreement rule picks the cluster count, and the
timesteps nearest to the cluster centres are voted into a global list.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .feature_store import FeatureTrajectory

log = logging.getLogger(__name__)

POOL_GRID = 8
KMEANS_RESTARTS = 10


class DegenerateClusteringError(ValueError, ArithmeticError):
    """Cluster-validity scores are undefined for this input."""


@dataclass
class ProjectedTrajectory:
    points: np.ndarray  # T x d, row t is timestep t
    basis: np.ndarray  # d x D
    explained_variance: np.ndarray  # d

    @property
    def T(self) -> int:
        return self.points.shape[0]


@dataclass
class Clustering:
    labels: np.ndarray
    centroids: np.ndarray
    wcss: float


@dataclass
class SelectionReport:
    k: int
    per_image_k: list[int]
    timesteps: list[int]
    score_selected: float
    score_equal: float
    score_random: float
    diagnostics: dict = field(default_factory=dict, repr=False)

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "per_image_k": list(self.per_image_k),
            "timesteps": list(self.timesteps),
            "scores": {"selected": self.score_selected, "equal": self.score_equal, "random": self.score_random},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SelectionReport":
        scores = obj["scores"]
        return cls(
            k=int(obj["k"]),
            per_image_k=[int(v) for v in obj["per_image_k"]],
            timesteps=[int(v) for v in obj["timesteps"]],
            score_selected=float(scores["selected"]),
            score_equal=float(scores["equal"]),
            score_random=float(scores["random"]),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"


def _pool(data: np.ndarray, grid: int) -> np.ndarray:
    """Average-pool a C x h x w map to C x grid x grid (replicate when smaller)."""
    c, h, w = data.shape
    if h >= grid and w >= grid:
        if h % grid or w % grid:
            raise ValueError(f"feature map {h}x{w} does not tile a {grid}x{grid} grid")
        return data.reshape(c, grid, h // grid, grid, w // grid).mean(axis=(2, 4))
    if grid % h or grid % w:
        raise ValueError(f"feature map {h}x{w} does not divide a {grid}x{grid} grid")
    return np.repeat(np.repeat(data, grid // h, axis=1), grid // w, axis=2)


def timestep_vectors(trajectory: FeatureTrajectory, grid: int = POOL_GRID) -> np.ndarray:
    """T x D matrix, one row per timestep (layers pooled to ``grid`` and concatenated)."""
    rows = []
    for t in range(trajectory.T):
        parts = [_pool(trajectory[(l, t)].astype(np.float64), grid).ravel() for l in range(1, trajectory.L + 1)]
        rows.append(np.concatenate(parts))
    return np.stack(rows)


def pca_fit(x: np.ndarray, d: int) -> ProjectedTrajectory:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite values in PCA input")
    if d < 1:
        raise ValueError(f"PCA dimension must be positive, got {d}")
    centered = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    var = s**2 / max(x.shape[0] - 1, 1)
    tol = s.max(initial=0.0) * max(centered.shape) * np.finfo(float).eps
    rank = int(np.sum(s > tol))
    if d > rank:
        log.warning("PCA dimension %d exceeds data rank %d; using %d", d, rank, max(rank, 1))
        d = max(rank, 1)
    basis = vt[:d]
    return ProjectedTrajectory(points=centered @ basis.T, basis=basis, explained_variance=var[:d])


def pca_project(trajectory: FeatureTrajectory, d: int) -> ProjectedTrajectory:
    return pca_fit(timestep_vectors(trajectory), d)


# -- clustering --------------------------------------------------------------


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centroids = [points[rng.integers(n)]]
    closest = _sq_dists(points, np.array(centroids))[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centroids.append(points[idx])
        closest = np.minimum(closest, _sq_dists(points, points[idx][None])[:, 0])
    return np.array(centroids)


def _fill_empty(points, centroids, labels, d2) -> None:
    """Move each empty cluster's centroid to the point lying farthest from its own centroid."""
    k = len(centroids)
    counts = np.bincount(labels, minlength=k)
    empty = np.flatnonzero(counts == 0)
    if not len(empty):
        return
    own = d2[np.arange(len(points)), labels].copy()
    for j in empty:
        own[counts[labels] <= 1] = -1.0  # never strip a cluster of its last member
        far = int(own.argmax())
        counts[labels[far]] -= 1
        labels[far] = j
        counts[j] = 1
        centroids[j] = points[far]
        own[far] = -1.0


def kmeans_single(points: np.ndarray, k: int, seed: int, max_iter: int = 300, tol: float = 1e-7) -> Clustering:
    """Lloyd's iteration from a k-means++ start."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(points, k, rng)
    for _ in range(max_iter):
        d2 = _sq_dists(points, centroids)
        labels = d2.argmin(axis=1)
        new = centroids.copy()
        _fill_empty(points, new, labels, d2)
        for j in range(k):
            new[j] = points[labels == j].mean(axis=0)
        shift = np.sqrt(((new - centroids) ** 2).sum(axis=1)).max()
        centroids = new
        if shift < tol:
            break
    d2 = _sq_dists(points, centroids)
    labels = d2.argmin(axis=1)
    _fill_empty(points, centroids, labels, d2)
    for j in range(k):
        centroids[j] = points[labels == j].mean(axis=0)
    wcss = float(((points - centroids[labels]) ** 2).sum())
    return Clustering(labels=labels, centroids=centroids, wcss=wcss)


def kmeans(points: np.ndarray, k: int, seed: int = 0, n_init: int = KMEANS_RESTARTS) -> Clustering:
    """Best (lowest WCSS) of ``n_init`` seeded restarts; deterministic per seed."""
    seeds = np.random.SeedSequence(seed).generate_state(n_init)
    best = None
    for s in seeds:
        c = kmeans_single(points, k, int(s))
        if best is None or c.wcss < best.wcss:
            best = c
    return best


def _check_labels(points, labels):
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise ValueError("at least two non-empty clusters are required")
    return points, labels, uniq


def silhouette(points, labels) -> float:
    points, labels, uniq = _check_labels(points, labels)
    dist = np.sqrt(_sq_dists(points, points))
    n = len(points)
    sizes = {c: int(np.sum(labels == c)) for c in uniq}
    # mean distance from each point to each cluster
    member = np.stack([labels == c for c in uniq], axis=1).astype(np.float64)
    sums = dist @ member
    own = np.searchsorted(uniq, labels)
    own_size = np.array([sizes[c] for c in labels], dtype=np.float64)
    a = np.where(own_size > 1, sums[np.arange(n), own] / np.maximum(own_size - 1, 1), 0.0)
    other = sums / np.array([sizes[c] for c in uniq], dtype=np.float64)
    other[np.arange(n), own] = np.inf
    b = other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own_size > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


def davies_bouldin(points, labels) -> float:
    points, labels, uniq = _check_labels(points, labels)
    centroids = np.stack([points[labels == c].mean(axis=0) for c in uniq])
    sigma = np.array([np.sqrt(((points[labels == c] - centroids[i]) ** 2).sum(axis=1)).mean() for i, c in enumerate(uniq)])
    sep = np.sqrt(_sq_dists(centroids, centroids))
    k = len(uniq)
    off = ~np.eye(k, dtype=bool)
    if np.any(sep[off] == 0.0):
        raise DegenerateClusteringError("coincident centroids: Davies-Bouldin ratio is undefined")
    ratio = np.where(off, (sigma[:, None] + sigma[None, :]) / np.where(off, sep, 1.0), -np.inf)
    return float(ratio.max(axis=1).mean())


# -- choosing k --------------------------------------------------------------


def cluster_score_table(points, max_k: int, seed: int = 0) -> tuple[list[int], list[float], list[float]]:
    """Silhouette and DBI for k = 2..max_k+1 (capped at n - 1)."""
    points = np.asarray(points, dtype=np.float64)
    ks, ss, dbi = [], [], []
    for k in range(2, max_k + 2):
        if k >= len(points):
            break
        c = kmeans(points, k, seed)
        ks.append(k)
        ss.append(silhouette(points, c.labels))
        dbi.append(davies_bouldin(points, c.labels))
    return ks, ss, dbi


def agreement_rule(silhouette_scores: Sequence[float], db_scores: Sequence[float]) -> int:
    """Index of the first candidate that is both i-th best by SS and within the i best by DBI."""
    n = len(silhouette_scores)
    sil_indices = sorted(range(n), key=lambda j: silhouette_scores[j], reverse=True)
    db_indices = sorted(range(n), key=lambda j: db_scores[j])
    for i in range(n):
        if sil_indices[i] in db_indices[: i + 1]:
            return sil_indices[i]
    raise DegenerateClusteringError("silhouette and Davies-Bouldin rankings never agree")


def optimal_k(points, max_k: int | None = None, seed: int = 0, return_table: bool = False):
    points = np.asarray(points, dtype=np.float64)
    if max_k is None:
        max_k = len(points) // 2
    ks, ss, dbi = cluster_score_table(points, max_k, seed)
    if not ks:
        raise ValueError(f"too few points ({len(points)}) to compare cluster counts")
    k = ks[agreement_rule(ss, dbi)]
    if return_table:
        return k, {"k": ks, "silhouette": ss, "davies_bouldin": dbi}
    return k


def global_k(per_image_k: Sequence[int]) -> int:
    """Mode of the per-image counts; ties go to the member nearest the rounded mean (lower on equal distance)."""
    if len(per_image_k) == 0:
        raise ValueError("no per-image cluster counts")
    counts = Counter(int(k) for k in per_image_k)
    top = max(counts.values())
    tied = sorted(k for k, c in counts.items() if c == top)
    if len(tied) == 1:
        return tied[0]
    target = math.floor(sum(per_image_k) / len(per_image_k) + 0.5)
    return min(tied, key=lambda k: (abs(k - target), k))


# -- timestep selection --------------------------------------------------------


def representative_timesteps(proj: ProjectedTrajectory, k: int, seed: int = 0) -> list[int]:
    """Timesteps nearest to each k-means centroid of one image (deduplicated)."""
    c = kmeans(proj.points, k, seed)
    d2 = _sq_dists(proj.points, c.centroids)
    return sorted({int(d2[:, j].argmin()) for j in range(k)})


def select_timesteps(trajectories: Sequence[ProjectedTrajectory], k: int, seed: int = 0) -> list[int]:
    if len(trajectories) < 1:
        raise ValueError("need at least one trajectory")
    T = trajectories[0].T
    if not 1 <= k <= T:
        raise ValueError(f"k must be in [1, {T}], got {k}")
    votes = np.zeros(T, dtype=int)
    for proj in trajectories:
        for t in representative_timesteps(proj, k, seed):
            votes[t] += 1
    # most votes first; ties to the smaller timestep
    order = sorted(range(T), key=lambda t: (-votes[t], t))
    return sorted(order[:k])


def min_distance_score(trajectories: Sequence[ProjectedTrajectory], selected: Sequence[int]) -> float:
    if len(selected) == 0:
        raise ValueError("selected timesteps must be non-empty")
    sel = np.asarray(sorted(set(int(t) for t in selected)))
    total = 0.0
    for proj in trajectories:
        d = np.sqrt(_sq_dists(proj.points, proj.points[sel]))
        total += float(d.min(axis=1).sum())
    return total


def equal_interval_timesteps(T: int, k: int) -> list[int]:
    """Evenly spaced timesteps ``offset + i * stride`` between t=1 and t=T-1.

    The grid is centred in [1, T-1]; at T=50, k=13 it is t = 4i + 1.
    """
    if not 1 <= k <= T:
        raise ValueError(f"k must be in [1, {T}], got {k}")
    if k == T:
        return list(range(T))
    if k == 1:
        return [T // 2]
    stride = max(1, (T - 2) // (k - 1))
    offset = 1 + ((T - 2) - (k - 1) * stride) // 2
    return [offset + i * stride for i in range(k)]


def random_timesteps(T: int, k: int, rng: np.random.Generator) -> list[int]:
    return sorted(int(t) for t in rng.choice(T, size=k, replace=False))


def run_selection(
    trajectories: Sequence[FeatureTrajectory],
    pca_dim: int = 30,
    seed: int = 0,
    k: int | None = None,
    n_random: int = 10,
) -> SelectionReport:
    """Full analysis: project, choose k per image, vote timesteps, score against baselines."""
    if not trajectories:
        raise ValueError("need at least one trajectory")
    projected = [pca_project(tr, pca_dim) for tr in trajectories]
    T = projected[0].T
    per_image_k, tables = [], []
    for proj in projected:
        kk, table = optimal_k(proj.points, T // 2, seed, return_table=True)
        per_image_k.append(kk)
        tables.append(table)
    chosen = global_k(per_image_k) if k is None else k
    timesteps = select_timesteps(projected, chosen, seed)
    rng = np.random.default_rng(seed)
    random_scores = [min_distance_score(projected, random_timesteps(T, chosen, rng)) for _ in range(n_random)]
    return SelectionReport(
        k=chosen,
        per_image_k=per_image_k,
        timesteps=timesteps,
        score_selected=min_distance_score(projected, timesteps),
        score_equal=min_distance_score(projected, equal_interval_timesteps(T, chosen)),
        score_random=float(np.mean(random_scores)),
        diagnostics={"score_tables": tables, "random_scores": random_scores, "T": T},
    )
