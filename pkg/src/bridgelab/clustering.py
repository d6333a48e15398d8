"""Hidden-state separability: PCA reduction, k-means, and cluster quality.

Clustering runs both on the deterministic 2D PCA projection and on the
raw pooled states, so conclusions never rest on the projection alone.
k-means uses k-means++ seeding from an explicit stream, Lloyd iterations
to an assignment fixpoint, and arg-min ties broken toward the lower
cluster index.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .models import Model
from .tensor import ContractViolation, RngStream
from .training import pooled_features

_S_KMEANS = 31


def extract_hidden(model: Model, images: np.ndarray, batch: int = 256) -> np.ndarray:
    """Mean-pooled final hidden states, one row per image (eval mode)."""
    return pooled_features(model, images, batch=batch)


@dataclass
class Reduced2D:
    coords: np.ndarray
    explained: np.ndarray  # variance share of the two components
    rank_deficient: bool


def reduce2d(h: np.ndarray) -> Reduced2D:
    """Project onto the top-2 principal components of the centered rows.

    Deterministic sign convention: each component's largest-magnitude
    loading is positive. Rank-1 inputs get a zero second coordinate and a
    flag instead of an error.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.shape[0] < 3:
        raise ContractViolation("need at least 3 samples for a 2D reduction")
    centered = h - h.mean(axis=0)
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2].copy()
    total = float((svals ** 2).sum())
    rank_def = svals.size < 2 or svals[1] <= 1e-12 * max(svals[0], 1.0)
    if svals.size < 2:
        comps = np.vstack([comps, np.zeros_like(comps[0])])
        svals = np.array([svals[0], 0.0])
    for i in range(2):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    coords = centered @ comps.T
    if rank_def:
        coords[:, 1] = 0.0
    explained = (svals[:2] ** 2) / total if total > 0 else np.zeros(2)
    return Reduced2D(coords, explained, bool(rank_def))


@dataclass
class ClusterResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    inertia_history: list
    coords2d: np.ndarray | None = None
    silhouette: float | None = None
    ari: float | None = None
    quality_flags: dict = field(default_factory=dict)


def _kmeanspp_init(points: np.ndarray, k: int, rng: RngStream) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    first = int(rng.integers(0, n, ()))
    centroids[0] = points[first]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[j] = points[int(rng.integers(0, n, ()))]
            continue
        r = float(rng.uniform(())) * total
        idx = int(np.searchsorted(np.cumsum(d2), r))
        idx = min(idx, n - 1)
        centroids[j] = points[idx]
        d2 = np.minimum(d2, ((points - centroids[j]) ** 2).sum(axis=1))
    return centroids


def kmeans(points: np.ndarray, k: int, seed: int, max_iters: int = 100) -> ClusterResult:
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k > n:
        raise ContractViolation(f"k={k} exceeds {n} points")
    rng = RngStream(seed, _S_KMEANS)
    centroids = _kmeanspp_init(points, k, rng)
    assign = np.full(n, -1, dtype=np.int64)
    history = []
    for _ in range(max_iters):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(d2, axis=1)  # argmin takes the lowest index on ties
        history.append(float(d2[np.arange(n), new_assign].sum()))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = points[assign == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
            # empty cluster keeps its previous centroid (monotone inertia)
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    inertia = float(d2[np.arange(n), assign].sum())
    return ClusterResult(assign, centroids, inertia, history)


def silhouette_mean(points: np.ndarray, assign: np.ndarray) -> float | None:
    """Mean silhouette with Euclidean distances; None for a single cluster."""
    points = np.asarray(points, dtype=np.float64)
    labels = np.unique(assign)
    if labels.size < 2:
        return None
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    n = points.shape[0]
    scores = np.zeros(n)
    for i in range(n):
        own = assign == assign[i]
        n_own = own.sum()
        a = dist[i][own].sum() / (n_own - 1) if n_own > 1 else 0.0
        b = min(dist[i][assign == c].mean() for c in labels if c != assign[i])
        denom = max(a, b)
        scores[i] = 0.0 if (n_own == 1 or denom == 0) else (b - a) / denom
    return float(scores.mean())


def adjusted_rand_index(a: np.ndarray, b: np.ndarray) -> float:
    """ARI between two partitions; symmetric, label-permutation invariant."""
    a = np.asarray(a)
    b = np.asarray(b)
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ua.size, ub.size), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)

    def comb2(x):
        return x * (x - 1) // 2

    sum_cells = int(comb2(table).sum())
    sum_rows = int(comb2(table.sum(axis=1)).sum())
    sum_cols = int(comb2(table.sum(axis=0)).sum())
    total = comb2(a.size)
    expected = sum_rows * sum_cols / total if total else 0.0
    max_index = (sum_rows + sum_cols) / 2.0
    if max_index == expected:
        return 1.0 if sum_cells == max_index else 0.0
    return float((sum_cells - expected) / (max_index - expected))


def cluster_quality(result: ClusterResult, true_labels, points: np.ndarray) -> dict:
    """Fill silhouette and ARI against the true classes."""
    true_labels = np.asarray(true_labels)
    if true_labels.shape[0] != result.assignments.shape[0]:
        raise ContractViolation("label count does not match clustered points")
    sil = silhouette_mean(points, result.assignments)
    ari = adjusted_rand_index(result.assignments, true_labels)
    result.silhouette = sil
    result.ari = ari
    result.quality_flags["silhouette_defined"] = sil is not None
    return {"silhouette": sil, "ari": ari}


@dataclass
class EmbeddingProbe:
    ari_2d: float
    ari_raw: float
    silhouette_2d: float | None
    silhouette_raw: float | None
    explained: list
    rank_deficient: bool


def probe_embeddings(model: Model, images: np.ndarray, true_labels, k: int,
                     seed: int) -> EmbeddingProbe:
    """Cluster pooled hidden states in PCA-2D and in raw space; score both."""
    h = extract_hidden(model, images)
    red = reduce2d(h)
    r2 = kmeans(red.coords, k, seed)
    q2 = cluster_quality(r2, true_labels, red.coords)
    rraw = kmeans(h, k, seed)
    qraw = cluster_quality(rraw, true_labels, h.astype(np.float64))
    return EmbeddingProbe(q2["ari"], qraw["ari"], q2["silhouette"], qraw["silhouette"],
                          [float(e) for e in red.explained], red.rank_deficient)


def coords_csv(path: str, coords: np.ndarray, assignments: np.ndarray,
               true_labels) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x", "y", "cluster", "true_label"])
        for (cx, cy), c, t in zip(coords, assignments, np.asarray(true_labels)):
            w.writerow([f"{cx:.8g}", f"{cy:.8g}", int(c), int(t)])
