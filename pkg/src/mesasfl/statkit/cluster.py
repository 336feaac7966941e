"""Average-linkage agglomerative clustering into exactly two groups."""
from __future__ import annotations

import numpy as np


def agglomerative_two_clusters(points) -> np.ndarray:
    """Binary labels from bottom-up average-linkage merging.

    ``points`` is a 1-D sequence of values or an (n, d) array; distances are
    Euclidean. Merging stops at two clusters. Among pairs at equal linkage
    the pair whose members have the smallest minimum indices (compared
    lexicographically) merges first. The cluster holding index 0 gets
    label 0.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least two points to form two clusters")
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=-1))

    # pairwise distance sums between active clusters; linkage = sum / (|A||B|)
    sums = dist.copy()
    sizes = np.ones(n)
    first = np.arange(n)  # min member index per cluster
    active = list(range(n))
    owner = np.arange(n)

    while len(active) > 2:
        best = None
        for pos, i in enumerate(active):
            for j in active[pos + 1:]:
                link = sums[i, j] / (sizes[i] * sizes[j])
                key = (link, min(first[i], first[j]), max(first[i], first[j]))
                if best is None or key < best[0]:
                    best = (key, i, j)
        _, i, j = best
        sums[i, :] += sums[j, :]
        sums[:, i] += sums[:, j]
        sizes[i] += sizes[j]
        first[i] = min(first[i], first[j])
        owner[owner == j] = i
        active.remove(j)

    return (owner != owner[0]).astype(np.int64)
