"""Synthetic datasets, client partitioning and data poisoning."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

STRATEGIES = ("iid", "one_class", "two_class", "dirichlet", "normal", "random_gen")
POISON_KINDS = ("pixel_trigger", "clean_label", "label_flip", "random_flip")
TARGETED_KINDS = ("pixel_trigger", "clean_label", "label_flip")


def _ceil(x: float) -> int:
    # guards against 0.1 * 2560 = 256.00000000000003
    return int(math.ceil(x - 1e-9))


def _floor(x: float) -> int:
    return int(math.floor(x + 1e-9))


@dataclass(frozen=True, eq=False)
class ClientDataset:
    """Labeled feature vectors plus poisoning provenance."""

    features: np.ndarray
    labels: np.ndarray
    class_count: int
    poisoned_idx: frozenset = frozenset()
    origin_client: int | None = None
    with_replacement: bool = False

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64, copy=True)
        y = np.array(self.labels, dtype=np.int64, copy=True)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ValueError("features must be (n, d) with one label per row")
        if y.size and (y.min() < 0 or y.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        bad = [i for i in self.poisoned_idx if not 0 <= i < y.size]
        if bad:
            raise ValueError(f"poisoned indices out of range: {sorted(bad)[:5]}")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "poisoned_idx", frozenset(int(i) for i in self.poisoned_idx))

    def __len__(self) -> int:
        return int(self.labels.size)

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def label_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def subset(self, idx) -> "ClientDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return ClientDataset(self.features[idx], self.labels[idx], self.class_count,
                             origin_client=self.origin_client)

    def __eq__(self, other):
        if not isinstance(other, ClientDataset):
            return NotImplemented
        return (self.class_count == other.class_count
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels)
                and self.poisoned_idx == other.poisoned_idx
                and self.origin_client == other.origin_client
                and self.with_replacement == other.with_replacement)

    __hash__ = None  # type: ignore[assignment]


# ---------------------------------------------------------------------------
# synthetic data


def gen_synthetic(class_count: int, feature_dim: int, per_class: int, spread: float,
                  rng_seed: int) -> ClientDataset:
    """Gaussian blobs, one mean per class, exactly ``per_class`` samples each.

    Class means are standard-normal vectors; samples add isotropic noise with
    standard deviation ``spread``. Rows are ordered by class.
    """
    if class_count < 2:
        raise ValueError("class_count must be >= 2")
    if feature_dim < 1 or per_class < 1:
        raise ValueError("feature_dim and per_class must be positive")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    rng = np.random.default_rng(rng_seed)
    means = rng.standard_normal((class_count, feature_dim))
    noise = rng.standard_normal((class_count, per_class, feature_dim))
    x = (means[:, None, :] + spread * noise).reshape(-1, feature_dim)
    y = np.repeat(np.arange(class_count), per_class)
    return ClientDataset(x, y, class_count)


def stratified_split(data: ClientDataset, per_class: Sequence[int], rng_seed: int):
    """Carve disjoint class-balanced subsets off ``data``.

    Returns one dataset per entry of ``per_class`` followed by the remainder.
    """
    rng = np.random.default_rng(rng_seed)
    pieces: list[list[np.ndarray]] = [[] for _ in range(len(per_class) + 1)]
    for c in range(data.class_count):
        pool = rng.permutation(np.flatnonzero(data.labels == c))
        start = 0
        for j, take in enumerate(per_class):
            if start + take > pool.size:
                raise ValueError(f"class {c} has only {pool.size} samples")
            pieces[j].append(pool[start:start + take])
            start += take
        pieces[-1].append(pool[start:])
    return [data.subset(np.sort(np.concatenate(p))) for p in pieces]


# ---------------------------------------------------------------------------
# partitioning


@dataclass(frozen=True)
class PartitionSpec:
    strategy: str = "iid"
    gamma: float = 0.0
    concentration: float = 1.0
    samples_per_client: int | None = None
    rng_seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown partition strategy {self.strategy!r}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not self.concentration > 0:
            raise ValueError("concentration must be positive")
        if self.samples_per_client is not None and self.samples_per_client < 1:
            raise ValueError("samples_per_client must be positive")


def largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer counts proportional to ``weights`` summing to ``total``.

    floor(weight * total) per entry, leftovers to the largest fractional
    parts (ties broken by lower index).
    """
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    raw = w * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        frac = raw - counts
        order = np.lexsort((np.arange(w.size), -frac))
        counts[order[:short]] += 1
    return counts


def _even_counts(total: int, class_count: int, client: int) -> np.ndarray:
    counts = np.full(class_count, total // class_count, dtype=np.int64)
    for j in range(total % class_count):
        counts[(client + j) % class_count] += 1
    return counts


def _focus_counts(total: int, class_count: int, mains: Sequence[int], gamma: float,
                  client: int) -> np.ndarray:
    counts = _even_counts(total, class_count, client)
    moved = 0
    for c in range(class_count):
        if c in mains:
            continue
        take = _floor(gamma * counts[c])
        counts[c] -= take
        moved += take
    share, rest = divmod(moved, len(mains))
    for j, m in enumerate(mains):
        counts[m] += share + (1 if j < rest else 0)
    return counts


def random_gen_counts(rng: np.random.Generator, class_count: int, total: int) -> np.ndarray:
    """Label counts for one client under the coin-flip strategy.

    Per label a fair coin (``rng.integers(0, 2, class_count)``) decides
    presence, redrawn until at least one label is present; present labels get
    ``rng.random(k)`` weights, normalized and turned into counts by
    :func:`largest_remainder`.
    """
    while True:
        present = rng.integers(0, 2, size=class_count).astype(bool)
        if present.any():
            break
    draws = rng.random(int(present.sum()))
    weights = np.zeros(class_count)
    weights[present] = draws
    return largest_remainder(weights, total)


def partition_counts(spec: PartitionSpec, class_count: int, client_count: int,
                     samples_per_client: int, rng: np.random.Generator) -> np.ndarray:
    """(client_count, class_count) matrix of requested label counts."""
    rows = []
    for i in range(client_count):
        main = i % class_count
        if spec.strategy == "iid":
            rows.append(_even_counts(samples_per_client, class_count, i))
        elif spec.strategy == "one_class":
            rows.append(_focus_counts(samples_per_client, class_count, [main], spec.gamma, i))
        elif spec.strategy == "two_class":
            mains = [main, (main + 1) % class_count]
            rows.append(_focus_counts(samples_per_client, class_count, mains, spec.gamma, i))
        elif spec.strategy in ("dirichlet", "normal"):
            if spec.strategy == "dirichlet":
                freq = rng.dirichlet(np.full(class_count, spec.concentration))
            else:
                freq = np.abs(rng.standard_normal(class_count)) + 1e-12
            top = int(np.argmax(freq))
            freq[[top, main]] = freq[[main, top]]
            rows.append(largest_remainder(freq, samples_per_client))
        else:
            rows.append(random_gen_counts(rng, class_count, samples_per_client))
    return np.vstack(rows)


def partition(dataset: ClientDataset, spec: PartitionSpec, client_count: int) -> list[ClientDataset]:
    """Split ``dataset`` into ``client_count`` client datasets.

    Clients draw from per-class pools without replacement, in client order.
    A client whose request exceeds what is left of a pool draws the missing
    samples with replacement from the whole class and is marked
    ``with_replacement``.
    """
    if len(dataset) == 0:
        raise ValueError("cannot partition an empty dataset")
    if client_count < 1:
        raise ValueError("client_count must be >= 1")
    per_client = spec.samples_per_client or len(dataset) // client_count
    if per_client < 1:
        raise ValueError("dataset too small for the requested client count")
    rng = np.random.default_rng(spec.rng_seed)
    counts = partition_counts(spec, dataset.class_count, client_count, per_client, rng)
    pools = [rng.permutation(np.flatnonzero(dataset.labels == c)) for c in range(dataset.class_count)]
    cursor = [0] * dataset.class_count
    clients = []
    for i in range(client_count):
        idx = []
        refilled = False
        for c in range(dataset.class_count):
            need = int(counts[i, c])
            if need == 0:
                continue
            pool = pools[c]
            if pool.size == 0:
                raise ValueError(f"class {c} has no samples to draw from")
            take = pool[cursor[c]:cursor[c] + need]
            cursor[c] += take.size
            if take.size < need:
                refilled = True
                take = np.concatenate([take, rng.choice(pool, size=need - take.size, replace=True)])
            idx.append(take)
        idx = np.concatenate(idx) if idx else np.zeros(0, dtype=np.int64)
        sub = dataset.subset(idx)
        clients.append(replace(sub, origin_client=i, with_replacement=refilled))
    return clients


# ---------------------------------------------------------------------------
# poisoning


@dataclass(frozen=True)
class PoisonSpec:
    kind: str
    pdr: float = 0.1
    target_label: int = 0
    source_label: int | None = None
    trigger_width_fraction: float = 1.0 / 16.0
    trigger_value: float | str = "observed_max"

    def __post_init__(self):
        if self.kind not in POISON_KINDS:
            raise ValueError(f"unknown poison kind {self.kind!r}")
        if not 0.0 < self.pdr <= 1.0:
            raise ValueError("pdr must lie in (0, 1]")
        if self.kind == "label_flip":
            if self.source_label is None or self.source_label == self.target_label:
                raise ValueError("label_flip needs a source_label different from target_label")
        if not 0.0 < self.trigger_width_fraction <= 1.0:
            raise ValueError("trigger_width_fraction must lie in (0, 1]")
        if isinstance(self.trigger_value, str) and self.trigger_value != "observed_max":
            raise ValueError("trigger_value must be a number or 'observed_max'")

    @property
    def targeted(self) -> bool:
        return self.kind in TARGETED_KINDS

    def trigger_width(self, feature_dim: int) -> int:
        return max(1, _ceil(feature_dim * self.trigger_width_fraction))

    def resolve_trigger(self, data: ClientDataset) -> "PoisonSpec":
        """Pin an ``observed_max`` trigger value to the max feature of ``data``."""
        if isinstance(self.trigger_value, str):
            return replace(self, trigger_value=float(data.features.max()))
        return self


def apply_trigger(features: np.ndarray, spec: PoisonSpec, value: float) -> np.ndarray:
    out = np.array(features, dtype=np.float64, copy=True)
    out[:, :spec.trigger_width(out.shape[1])] = value
    return out


def _validate_labels(data: ClientDataset, spec: PoisonSpec) -> None:
    labels = [spec.target_label] + ([spec.source_label] if spec.source_label is not None else [])
    for lab in labels:
        if not 0 <= lab < data.class_count:
            raise ValueError(f"label {lab} outside [0, {data.class_count})")


def poison_dataset(data: ClientDataset, spec: PoisonSpec, rng_seed: int = 0) -> ClientDataset:
    """Apply one data-poisoning transform; ``poisoned_idx`` lists modified rows.

    ``pdr`` is the fraction of all samples for ``pixel_trigger`` and
    ``random_flip``, of target-label samples for ``clean_label`` and of
    source-label samples for ``label_flip``.
    """
    _validate_labels(data, spec)
    rng = np.random.default_rng(rng_seed)
    x = np.array(data.features, copy=True)
    y = np.array(data.labels, copy=True)
    n = y.size

    if spec.kind in ("pixel_trigger", "random_flip"):
        candidates = np.arange(n)
    elif spec.kind == "clean_label":
        candidates = np.flatnonzero(y == spec.target_label)
    else:
        candidates = np.flatnonzero(y == spec.source_label)
        if candidates.size == 0:
            warnings.warn(f"label_flip: no samples of source label {spec.source_label}; "
                          "dataset left clean", RuntimeWarning, stacklevel=2)

    count = min(candidates.size, _ceil(spec.pdr * candidates.size))
    chosen = np.sort(rng.choice(candidates, size=count, replace=False)) if count else candidates[:0]

    if spec.kind in ("pixel_trigger", "clean_label") and chosen.size:
        value = spec.resolve_trigger(data).trigger_value
        x[chosen] = apply_trigger(x[chosen], spec, value)
        if spec.kind == "pixel_trigger":
            y[chosen] = spec.target_label
    elif spec.kind == "label_flip":
        y[chosen] = spec.target_label
    elif spec.kind == "random_flip" and chosen.size:
        shift = rng.integers(1, data.class_count, size=chosen.size)
        y[chosen] = (y[chosen] + shift) % data.class_count

    return ClientDataset(x, y, data.class_count, poisoned_idx=frozenset(chosen.tolist()),
                         origin_client=data.origin_client, with_replacement=data.with_replacement)


def build_test_sets(base: ClientDataset, spec: PoisonSpec | None):
    """Return ``(clean_test, triggered_test)``.

    The triggered set holds every non-target sample with the trigger applied
    and label ``target_label``; for ``label_flip`` it holds the source-label
    samples relabeled to the target. Untargeted or absent specs give an empty
    triggered set.
    """
    clean = base
    empty = ClientDataset(np.zeros((0, base.feature_dim)), np.zeros(0, dtype=np.int64), base.class_count)
    if spec is None or not spec.targeted:
        return clean, empty
    _validate_labels(base, spec)
    if spec.kind == "label_flip":
        keep = np.flatnonzero(base.labels == spec.source_label)
        x = base.features[keep]
    else:
        keep = np.flatnonzero(base.labels != spec.target_label)
        value = spec.resolve_trigger(base).trigger_value
        x = apply_trigger(base.features[keep], spec, value)
    y = np.full(keep.size, spec.target_label, dtype=np.int64)
    return clean, ClientDataset(x, y, base.class_count)


# ---------------------------------------------------------------------------
# CSV dump / load


def dump_csv(clients: Sequence[ClientDataset], path: str | Path) -> None:
    """One row per sample: client_id, label, poisoned, f0..f{d-1}."""
    clients = list(clients)
    if not clients:
        raise ValueError("nothing to dump")
    dim = clients[0].feature_dim
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client_id", "label", "poisoned"] + [f"f{j}" for j in range(dim)])
        for pos, ds in enumerate(clients):
            cid = ds.origin_client if ds.origin_client is not None else pos
            for i in range(len(ds)):
                writer.writerow([cid, int(ds.labels[i]), int(i in ds.poisoned_idx)]
                                + [repr(float(v)) for v in ds.features[i]])


def load_csv(path: str | Path, class_count: int) -> list[ClientDataset]:
    rows: dict[int, list] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["client_id", "label", "poisoned"]:
            raise ValueError(f"{path}: unexpected header {header[:3]}")
        for row in reader:
            rows.setdefault(int(row[0]), []).append(row)
    out = []
    for cid in sorted(rows):
        block = rows[cid]
        x = np.array([[float(v) for v in r[3:]] for r in block])
        y = np.array([int(r[1]) for r in block])
        poisoned = frozenset(i for i, r in enumerate(block) if r[2] == "1")
        out.append(ClientDataset(x, y, class_count, poisoned_idx=poisoned, origin_client=cid))
    return out
