"""Action-frequency weighting: cluster actions, upweight rare clusters.

Weights follow the category-frequency rule w = N / n_cluster, computed from a
hand-rolled Lloyd's k-means so the details that affect reproducibility are
pinned down: initialization picks k distinct sample indices from the seeded
RNG, assignment ties break to the lowest cluster index, and iterations stop
on stable assignment or at a fixed cap.
"""

from __future__ import annotations

import numpy as np

from .mlp import ConfigError
from .weighting import WeightTable


class EmptyClusterError(RuntimeError):
    pass


def lloyd_kmeans(points: np.ndarray, k: int, seed: int, max_iter: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Returns (labels, centers). Raises EmptyClusterError if a cluster empties."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    n = pts.shape[0]
    if k < 2:
        raise ConfigError("k must be >= 2")
    if n < k:
        raise ConfigError(f"need at least k={k} points, got {n}")
    rng = np.random.default_rng(seed)
    centers = pts[rng.choice(n, size=k, replace=False)].copy()
    labels = np.full(n, -1, dtype=np.int64)
    for _ in range(max_iter):
        d2 = np.sum((pts[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(d2, axis=1)  # argmin takes the lowest index on ties
        sizes = np.bincount(new_labels, minlength=k)
        if np.any(sizes == 0):
            raise EmptyClusterError(f"cluster(s) {np.nonzero(sizes == 0)[0].tolist()} empty")
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            centers[j] = pts[labels == j].mean(axis=0)
    return labels, centers


def actfreq_weights(actions: np.ndarray, k: int, seed: int) -> tuple[WeightTable, np.ndarray]:
    """Cluster raw action vectors and weight each sample by N / (its cluster size).

    An empty cluster triggers one re-seeded retry before giving up; geometry
    with fewer than k distinct action values cannot support k clusters.
    """
    pts = np.asarray(actions, dtype=np.float64)
    n = pts.shape[0]
    try:
        labels, _ = lloyd_kmeans(pts, k, seed)
    except EmptyClusterError:
        try:
            labels, _ = lloyd_kmeans(pts, k, seed + 1)
        except EmptyClusterError as e:
            raise ConfigError(f"k-means produced an empty cluster even after re-seeding: {e}") from e
    sizes = np.bincount(labels, minlength=k)
    weights = n / sizes[labels].astype(np.float64)
    table = WeightTable(
        weights=weights,
        scheme={"kind": "actfreq", "k": k, "kmeans_seed": seed, "cluster_sizes": sizes.tolist()},
    )
    return table, labels
