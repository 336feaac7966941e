"""Reference defenses: Krum family, robust aggregation, clipping, clustering, FLTrust."""
from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np

from .model import LayeredModel, TrainHyperparams, train_local
from .statkit import agglomerative_two_clusters, lower_median

KRUM_THRESHOLD = 0.7
M_KRUM_RATE = 0.3


def _stack(locals_: Mapping, global_model: LayeredModel):
    ids = sorted(locals_)
    if not ids:
        raise ValueError("no local models")
    for cid in ids:
        locals_[cid].check_schema(global_model)
    g = global_model.flatten()
    updates = np.vstack([locals_[cid].flatten() - g for cid in ids])
    return ids, updates, g


def krum_f(n: int, threshold: float = KRUM_THRESHOLD) -> int:
    """Tolerated byzantine count, reading ``threshold`` as the benign fraction."""
    return int(math.floor(n * (1.0 - threshold) + 1e-9))


def krum_scores(vectors: np.ndarray, f: int) -> np.ndarray:
    n = vectors.shape[0]
    k = n - f - 2
    if k < 1:
        raise ValueError(f"Krum needs n >= f + 3 (n={n}, f={f})")
    # correctly rounded sums, so scores do not depend on summation order
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            dist[i, j] = dist[j, i] = math.fsum((vectors[i] - vectors[j]) ** 2)
    scores = np.empty(n)
    for i in range(n):
        scores[i] = math.fsum(sorted(np.delete(dist[i], i).tolist())[:k])
    return scores


def krum_select(locals_: Mapping, m: int = 1, threshold: float = KRUM_THRESHOLD) -> set:
    """Keep the ``m`` models with the lowest Krum score (ties: lower id first)."""
    ids = sorted(locals_)
    n = len(ids)
    if n < 3:
        raise ValueError("Krum needs at least three models")
    if m < 1:
        raise ValueError("m must be >= 1")
    vectors = np.vstack([locals_[cid].flatten() for cid in ids])
    scores = krum_scores(vectors, krum_f(n, threshold))
    order = sorted(range(n), key=lambda i: (scores[i], i))
    return {ids[i] for i in order[:min(m, n)]}


def m_krum_count(n: int, rate: float = M_KRUM_RATE) -> int:
    return max(1, int(math.ceil(n * rate - 1e-9)))


def trimmed_mean(locals_: Mapping, global_model: LayeredModel, trim: float = 0.05) -> LayeredModel:
    """Coordinate-wise mean after dropping floor(trim*n) extremes per side."""
    ids, updates, g = _stack(locals_, global_model)
    n = len(ids)
    cut = int(math.floor(trim * n + 1e-9))
    if trim < 0 or n - 2 * cut < 1:
        raise ValueError(f"cannot trim {cut} per side from {n} updates")
    # ascending per-coordinate summation, the same arithmetic as fed_avg
    total = np.zeros_like(g)
    for row in np.sort(updates, axis=0)[cut:n - cut]:
        total += row
    agg = total / (n - 2 * cut)
    return global_model.unflatten(g + agg)


def coordinate_median(locals_: Mapping, global_model: LayeredModel) -> LayeredModel:
    """Coordinate-wise lower median of the updates."""
    ids, updates, g = _stack(locals_, global_model)
    med = np.sort(updates, axis=0)[(len(ids) - 1) // 2]
    return global_model.unflatten(g + med)


def clip_updates(locals_: Mapping, global_model: LayeredModel) -> dict:
    """Rescale every update longer than the median update norm down to it."""
    ids, updates, g = _stack(locals_, global_model)
    norms = np.linalg.norm(updates, axis=1)
    bound = lower_median(norms)
    out = {}
    for cid, u, nrm in zip(ids, updates, norms):
        if nrm > bound:
            u = u * (bound / nrm)
            out[cid] = global_model.unflatten(g + u)
        else:
            out[cid] = locals_[cid]
    return out


def clip_and_noise(locals_: Mapping, global_model: LayeredModel, sigma: float = 0.01,
                   seed: int = 0, eta: float = 1.0) -> LayeredModel:
    from .federation import fed_avg

    clipped = clip_updates(locals_, global_model)
    agg = fed_avg(global_model, [clipped[c] for c in sorted(clipped)], eta)
    if sigma == 0:
        return agg
    rng = np.random.default_rng(seed)
    return agg.unflatten(agg.flatten() + rng.normal(0.0, sigma, size=agg.flat_len))


def cosine_distance_matrix(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1)
    unit = vectors / norms[:, None]
    return 1.0 - np.clip(unit @ unit.T, -1.0, 1.0)


def _cluster_keep(ids: Sequence, vectors: np.ndarray) -> set:
    norms = np.linalg.norm(vectors, axis=1)
    usable = [i for i in range(len(ids)) if norms[i] > 0]
    keep = {ids[i] for i in range(len(ids)) if norms[i] == 0}
    if len(usable) < 2:
        return set(ids)
    rows = cosine_distance_matrix(vectors[usable])
    if np.allclose(rows, rows[0], atol=1e-12, rtol=0):
        return set(ids)
    labels = agglomerative_two_clusters(rows)
    sizes = np.bincount(labels, minlength=2)
    # size tie: keep the cluster holding the lowest id
    majority = 0 if sizes[0] >= sizes[1] else 1
    keep |= {ids[usable[i]] for i in np.flatnonzero(labels == majority)}
    return keep


def naive_cluster_filter(locals_: Mapping, global_model: LayeredModel) -> set:
    """Two-cluster the rows of the pairwise cosine-distance matrix; keep the larger cluster."""
    ids, updates, _ = _stack(locals_, global_model)
    if len(ids) < 2:
        raise ValueError("clustering needs at least two models")
    return _cluster_keep(ids, updates)


def output_layer_names(model: LayeredModel) -> list[str]:
    return model.names[-2:]


def last_layer_cosine_filter(locals_: Mapping, global_model: LayeredModel,
                             layers: Sequence[str] | None = None) -> set:
    """Naive clustering restricted to the output layer (weights and bias)."""
    ids, updates, _ = _stack(locals_, global_model)
    if len(ids) < 2:
        raise ValueError("clustering needs at least two models")
    layers = list(layers) if layers else output_layer_names(global_model)
    cols = np.concatenate([np.arange(global_model.layer_slice(n).start, global_model.layer_slice(n).stop)
                           for n in layers])
    return _cluster_keep(ids, updates[:, cols])


def fltrust(locals_: Mapping, global_model: LayeredModel, root_data, hp: TrainHyperparams):
    """FLTrust trust scores against a server update trained on ``root_data``.

    Returns ``(weights, rescaled, server_update_norm)`` where ``rescaled``
    maps id -> global + update rescaled to the server update's norm. Weights
    are ReLU cosine similarities normalized to sum to one (all zero when no
    update has positive trust). ``weights`` is None when the server update
    is zero and the defense abstains.
    """
    if root_data is None or len(root_data) == 0:
        raise ValueError("FLTrust needs a non-empty root dataset")
    ids, updates, g = _stack(locals_, global_model)
    server = train_local(global_model, root_data, hp).flatten() - g
    s_norm = float(np.linalg.norm(server))
    if s_norm == 0.0:
        return None, dict(locals_), 0.0
    trust = {}
    rescaled = {}
    for cid, u in zip(ids, updates):
        nrm = float(np.linalg.norm(u))
        if nrm == 0.0:
            trust[cid] = 0.0
            rescaled[cid] = locals_[cid]
            continue
        trust[cid] = max(0.0, float(u @ server) / (nrm * s_norm))
        rescaled[cid] = global_model.unflatten(g + u * (s_norm / nrm))
    total = sum(trust.values())
    weights = {cid: (t / total if total > 0 else 0.0) for cid, t in trust.items()}
    return weights, rescaled, s_norm
