"""Seeded k-means: k-means++ seeding followed by Lloyd iterations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from tubeot.errors import ConfigError, ShapeError


@dataclass(frozen=True)
class KMeansResult:
    labels: NDArray[np.int64]
    centers: NDArray[np.float64]
    #: Sum of squared distances from each point to its center.
    objective: float
    iterations: int
    #: Objective after every assignment step, non-increasing.
    history: list[float] = field(default_factory=list)


def _sq_distances(points: NDArray[np.float64], centers: NDArray[np.float64]) -> NDArray[np.float64]:
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def kmeans_plusplus(
    points: NDArray[np.float64], k: int, rng: np.random.Generator
) -> NDArray[np.float64]:
    """Pick ``k`` distinct points, each with probability proportional to squared distance."""
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _sq_distances(points, points[chosen]).min(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            index = int(rng.choice(n, p=closest / total))
        else:
            # Every point sits on a center already; fall back to any unused index.
            remaining = np.setdiff1d(np.arange(n), chosen)
            index = int(rng.choice(remaining))
        chosen.append(index)
        closest = np.minimum(closest, _sq_distances(points, points[[index]])[:, 0])
    return points[chosen].copy()


def kmeans_fit(points: ArrayLike, k: int, seed: int = 0, max_iters: int = 100) -> KMeansResult:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"k-means expects an [n, d] matrix, got shape {x.shape}")
    n = x.shape[0]
    if k < 1:
        raise ConfigError(f"k must be positive, got {k}")
    if n < k:
        raise ConfigError(f"cannot form {k} clusters from {n} points")
    if max_iters < 1:
        raise ConfigError(f"max_iters must be positive, got {max_iters}")

    rng = np.random.default_rng(seed)
    centers = kmeans_plusplus(x, k, rng)
    labels = np.full(n, -1, dtype=np.int64)
    history: list[float] = []
    iterations = 0
    for iterations in range(1, max_iters + 1):
        distances = _sq_distances(x, centers)
        new_labels = distances.argmin(axis=1)
        point_cost = distances[np.arange(n), new_labels]

        # Empty clusters take over the point farthest from its own center,
        # never the last member of another cluster.
        counts = np.bincount(new_labels, minlength=k)
        for cluster in range(k):
            if counts[cluster]:
                continue
            movable = np.where(counts[new_labels] > 1, point_cost, -np.inf)
            far = int(movable.argmax())
            counts[new_labels[far]] -= 1
            counts[cluster] = 1
            new_labels[far] = cluster
            point_cost[far] = 0.0
            centers[cluster] = x[far]

        history.append(float(point_cost.sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for cluster in range(k):
            centers[cluster] = x[labels == cluster].mean(axis=0)

    for cluster in range(k):
        centers[cluster] = x[labels == cluster].mean(axis=0)
    objective = float(_sq_distances(x, centers)[np.arange(n), labels].sum())
    return KMeansResult(
        labels=labels,
        centers=centers,
        objective=objective,
        iterations=iterations,
        history=history,
    )


def kmeans(points: ArrayLike, k: int, seed: int = 0, max_iters: int = 100) -> NDArray[np.int64]:
    """Cluster labels in ``0..k-1`` for each row of ``points``."""
    return kmeans_fit(points, k, seed, max_iters).labels
