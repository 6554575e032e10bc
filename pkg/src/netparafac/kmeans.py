"""Lloyd's k-means with k-means++ seeding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class LloydResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    n_iter: int
    history: list


def _sq_dist(x, c):
    d = (x * x).sum(1)[:, None] - 2 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_pp(x: np.ndarray, k: int, rng) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = _sq_dist(x, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, _sq_dist(x, x[idx][None])[:, 0])
    return np.array(centers)


def lloyd(x, k: int, seed=0, max_iter: int = 300, n_init: int = 1) -> LloydResult:
    """Cluster rows of ``x``; keeps the lowest-inertia of ``n_init`` runs.

    Iterates until the assignment stops changing or ``max_iter``. An empty
    cluster is re-seeded with the point farthest from its centroid.
    """
    x = np.asarray(x, dtype=float)
    n_distinct = len(np.unique(x, axis=0))
    if k < 1 or k > n_distinct:
        raise ValueError(f"k={k} must be between 1 and the {n_distinct} distinct points")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        c = kmeans_pp(x, k, rng)
        labels = None
        history = []
        it = 0
        for it in range(1, max_iter + 1):
            d = _sq_dist(x, c)
            new = d.argmin(1)
            history.append(float(d[np.arange(len(x)), new].sum()))
            if labels is not None and np.array_equal(new, labels):
                break
            labels = new
            for j in range(k):
                members = labels == j
                if members.any():
                    c[j] = x[members].mean(0)
                else:
                    far = d[np.arange(len(x)), labels].argmax()
                    c[j] = x[far]
                    labels[far] = j
        d = _sq_dist(x, c)
        labels = d.argmin(1)
        inertia = float(d[np.arange(len(x)), labels].sum())
        res = LloydResult(c, labels, inertia, it, history)
        if best is None or res.inertia < best.inertia:
            best = res
    return best
