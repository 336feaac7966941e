"""MESAS: multi-metric significance scan with iterative pruning.

Six metrics are extracted for every client update, once for the whole model
and once per layer. Each (metric, scope) value list goes through a cascade of
two-sample tests on the distances above/below the median plus a 3-sigma
check on the raw values. Significant lists are split into two clusters; the
minority cluster is flagged. Flagged clients are pruned and the scan repeats
on the survivors until nothing fires.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .model import LayeredModel
from .statkit import (
    agglomerative_two_clusters,
    ks_test,
    levene_test,
    lower_median,
    median_split,
    t_test,
    three_sigma_outliers,
)

WHOLE = "WHOLE"
METRICS = ("cos", "eucl", "count", "var", "min_nz", "max_abs")

SIGNIFICANCE_PRESETS = {
    "iid": 1e-4,
    "intra": 1e-3,
    "inter": 3e-2,
}


@dataclass(frozen=True)
class MesasConfig:
    significance_level: float = 1e-4
    max_iterations: int | None = None  # None: number of clients
    min_population: int = 4

    def __post_init__(self):
        if not 0.0 < self.significance_level < 1.0:
            raise ValueError("significance_level must lie in (0, 1)")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.min_population < 2:
            raise ValueError("min_population must be >= 2")

    @classmethod
    def for_scenario(cls, scenario: str, **kw) -> "MesasConfig":
        """Level preset for ``iid``, ``intra`` (non-IID) or ``inter`` (non-IID)."""
        return cls(significance_level=SIGNIFICANCE_PRESETS[scenario], **kw)


# ---------------------------------------------------------------------------
# metric extraction


MetricSet = dict  # scope -> {metric: float | None}


def _scope_metrics(local: np.ndarray, glob: np.ndarray) -> dict:
    delta = local - glob
    abs_delta = np.abs(delta)
    nl = float(np.linalg.norm(local))
    ng = float(np.linalg.norm(glob))
    # 1 - cos as half the squared chord between unit vectors; no cancellation
    cos = None if nl == 0.0 or ng == 0.0 else 0.5 * float(np.sum((local / nl - glob / ng) ** 2))
    nonzero = abs_delta[abs_delta > 0]
    return {
        "cos": cos,
        "eucl": float(np.linalg.norm(delta)),
        "count": int(np.count_nonzero(delta > 0)),
        "var": float(np.var(local)),
        "min_nz": float(nonzero.min()) if nonzero.size else None,
        "max_abs": float(abs_delta.max()) if abs_delta.size else 0.0,
    }


def compute_metric_set(local: LayeredModel, global_model: LayeredModel) -> MetricSet:
    """Metrics of ``local`` against ``global_model`` for WHOLE and every layer.

    cos     1 - cosine similarity of the flattened local and global vectors
    eucl    L2 norm of the update
    count   number of parameters that increased
    var     population variance of the local parameters
    min_nz  smallest nonzero absolute parameter change (None if no change)
    max_abs largest absolute parameter change

    ``cos`` is None when either vector of a scope is all zeros.
    """
    local.check_schema(global_model)
    lf, gf = local.flatten(), global_model.flatten()
    out = {WHOLE: _scope_metrics(lf, gf)}
    for spec in local.schema:
        out[spec.name] = _scope_metrics(lf[spec.offset:spec.stop], gf[spec.offset:spec.stop])
    return out


# ---------------------------------------------------------------------------
# significance scan / clustering


@dataclass
class ScanResult:
    significant: bool
    fired: list  # (test name, p-value or tuple of flagged positions)
    performed: bool = True


def significance_scan(values: Sequence[float], cfg: MesasConfig) -> ScanResult:
    """Run t / Levene / KS on the median-split distances and 3-sigma on the raw values."""
    vals = np.asarray(values, dtype=np.float64)
    if vals.size < cfg.min_population:
        return ScanResult(False, [], performed=False)
    split = median_split(vals)
    fired = []
    for name, test in (("t", t_test), ("levene", levene_test), ("ks", ks_test)):
        res = test(split.l1, split.l2)
        if res.performed and res.p_value < cfg.significance_level:
            fired.append((name, res.p_value))
    outliers, done = three_sigma_outliers(vals)
    if done and outliers:
        fired.append(("3sigma", outliers))
    return ScanResult(bool(fired), fired)


def cluster_and_flag(values: Sequence[float], client_ids: Sequence) -> set:
    """Two-cluster the values and return the ids of the minority cluster.

    On a size tie the cluster whose centroid lies farther from the (lower)
    median of all values is flagged.
    """
    vals = np.asarray(values, dtype=np.float64)
    ids = list(client_ids)
    if vals.size != len(ids):
        raise ValueError("one id per value required")
    labels = agglomerative_two_clusters(vals)
    sizes = np.bincount(labels, minlength=2)
    if sizes[0] != sizes[1]:
        minority = int(np.argmin(sizes))
    else:
        med = lower_median(vals)
        far = [abs(vals[labels == k].mean() - med) for k in (0, 1)]
        minority = 1 if far[1] > far[0] else 0 if far[0] > far[1] else 1
    return {ids[i] for i in np.flatnonzero(labels == minority)}


# ---------------------------------------------------------------------------
# filter loop


@dataclass
class Firing:
    iteration: int
    metric: str
    scope: str
    tests: list  # [(name, p-value | flagged ids)]
    flagged: list

    def to_dict(self) -> dict:
        tests = []
        for name, detail in self.tests:
            if name == "3sigma":
                tests.append({"test": name, "outliers": list(detail)})
            else:
                tests.append({"test": name, "p_value": float(detail)})
        return {"iteration": self.iteration, "metric": self.metric, "scope": self.scope,
                "tests": tests, "flagged": list(self.flagged)}


@dataclass
class DetectionReport:
    iterations: list = field(default_factory=list)  # list[Firing]
    kept: list = field(default_factory=list)
    flagged: list = field(default_factory=list)
    passes: int = 0

    def to_dict(self) -> dict:
        return {"iterations": [f.to_dict() for f in self.iterations],
                "kept": list(self.kept), "flagged": list(self.flagged),
                "passes": self.passes}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def mesas_filter(locals_: Mapping, global_model: LayeredModel, cfg: MesasConfig | None = None,
                 metric_sets: Mapping | None = None) -> DetectionReport:
    """Iteratively prune local models until no test reports significance.

    ``locals_`` maps client id to local model. Precomputed ``metric_sets``
    (id -> :func:`compute_metric_set` result) may be passed to skip
    extraction.
    """
    cfg = cfg or MesasConfig()
    if not locals_:
        raise ValueError("mesas_filter needs at least one local model")
    ids = sorted(locals_)
    if metric_sets is None:
        metric_sets = {cid: compute_metric_set(locals_[cid], global_model) for cid in ids}
    scopes = [WHOLE] + global_model.names
    max_iter = cfg.max_iterations or len(ids)

    alive = list(ids)
    report = DetectionReport()
    flagged_all: set = set()
    for iteration in range(max_iter):
        if len(alive) < cfg.min_population:
            break
        round_flags: set = set()
        for scope in scopes:
            for metric in METRICS:
                pairs = [(cid, metric_sets[cid][scope][metric]) for cid in alive]
                pairs = [(cid, v) for cid, v in pairs if v is not None]
                if len(pairs) < cfg.min_population:
                    continue
                values = [v for _, v in pairs]
                scan = significance_scan(values, cfg)
                if not scan.significant:
                    continue
                present = [cid for cid, _ in pairs]
                hits = cluster_and_flag(values, present)
                tests = [(name, tuple(present[i] for i in d) if name == "3sigma" else d)
                         for name, d in scan.fired]
                report.iterations.append(Firing(iteration, metric, scope, tests, sorted(hits)))
                round_flags |= hits
        report.passes = iteration + 1
        if not round_flags:
            break
        flagged_all |= round_flags
        alive = [cid for cid in alive if cid not in round_flags]

    report.kept = list(alive)
    report.flagged = sorted(flagged_all)
    return report
