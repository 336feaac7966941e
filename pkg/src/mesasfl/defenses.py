"""Uniform dispatch from a DefenseSpec to a DefenseOutcome."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from . import baselines
from .mesas import DetectionReport, MesasConfig, mesas_filter
from .model import LayeredModel, TrainHyperparams

DEFENSE_KINDS = ("none", "mesas", "krum", "m_krum", "t_mean", "t_median", "clip", "clip_noise",
                 "naive_cluster", "fltrust", "last_layer_cosine")

DEFAULT_PARAMS = {
    "none": {},
    "mesas": {"significance_level": 1e-4, "max_iterations": None, "min_population": 4},
    "krum": {"threshold": baselines.KRUM_THRESHOLD},
    "m_krum": {"threshold": baselines.KRUM_THRESHOLD, "rate": baselines.M_KRUM_RATE},
    "t_mean": {"trim": 0.05},
    "t_median": {},
    "clip": {},
    "clip_noise": {"sigma": 0.01},
    "naive_cluster": {},
    "fltrust": {"root_size": 100},
    "last_layer_cosine": {"layers": None},
}


@dataclass(frozen=True)
class DefenseSpec:
    kind: str = "none"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise ValueError(f"unknown defense {self.kind!r}")
        unknown = set(self.params) - set(DEFAULT_PARAMS[self.kind])
        if unknown:
            raise ValueError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        merged = dict(DEFAULT_PARAMS[self.kind])
        merged.update(self.params)
        object.__setattr__(self, "params", merged)
        for key in ("rate", "trim"):
            if key in merged and not 0 <= merged[key] < 1:
                raise ValueError(f"{self.kind}.{key} must lie in [0, 1)")
        if "root_size" in merged and not (isinstance(merged["root_size"], int) and merged["root_size"] >= 1):
            raise ValueError("fltrust.root_size must be a positive integer")


@dataclass(frozen=True)
class DefenseContext:
    """Server-side resources some defenses need."""

    root_data: Any = None
    hp: TrainHyperparams | None = None
    seed: int = 0

    def with_seed(self, seed: int) -> "DefenseContext":
        return replace(self, seed=seed)


@dataclass
class DefenseOutcome:
    """keep: id set | weights: id -> weight | transformed: id -> model | aggregate: model."""

    kind: str
    keep: set | None = None
    weights: dict | None = None
    models: dict | None = None
    aggregate: LayeredModel | None = None
    report: DetectionReport | None = None
    note: str = ""

    def flagged(self, participants) -> set | None:
        """Ids this defense rejected, or None when it does not filter."""
        if self.kind == "keep":
            return set(participants) - set(self.keep)
        if self.kind == "weights":
            return {c for c in participants if self.weights.get(c, 0.0) <= 0.0}
        return None


def apply_defense(spec: DefenseSpec, locals_: dict, global_model: LayeredModel,
                  ctx: DefenseContext | None = None, eta: float = 1.0) -> DefenseOutcome:
    ctx = ctx or DefenseContext()
    p = spec.params
    kind = spec.kind
    if kind == "none":
        return DefenseOutcome("keep", keep=set(locals_))
    if kind == "mesas":
        cfg = MesasConfig(p["significance_level"], p["max_iterations"], p["min_population"])
        report = mesas_filter(locals_, global_model, cfg)
        return DefenseOutcome("keep", keep=set(report.kept), report=report)
    if kind == "krum":
        return DefenseOutcome("keep", keep=baselines.krum_select(locals_, 1, p["threshold"]))
    if kind == "m_krum":
        m = baselines.m_krum_count(len(locals_), p["rate"])
        return DefenseOutcome("keep", keep=baselines.krum_select(locals_, m, p["threshold"]))
    if kind == "t_mean":
        agg = baselines.trimmed_mean(locals_, global_model, p["trim"])
        return DefenseOutcome("aggregate", aggregate=_apply_eta(agg, global_model, eta))
    if kind == "t_median":
        agg = baselines.coordinate_median(locals_, global_model)
        return DefenseOutcome("aggregate", aggregate=_apply_eta(agg, global_model, eta))
    if kind == "clip":
        return DefenseOutcome("transformed", models=baselines.clip_updates(locals_, global_model))
    if kind == "clip_noise":
        agg = baselines.clip_and_noise(locals_, global_model, p["sigma"], ctx.seed, eta)
        return DefenseOutcome("aggregate", aggregate=agg)
    if kind == "naive_cluster":
        return DefenseOutcome("keep", keep=baselines.naive_cluster_filter(locals_, global_model))
    if kind == "last_layer_cosine":
        return DefenseOutcome("keep", keep=baselines.last_layer_cosine_filter(locals_, global_model, p["layers"]))
    if kind == "fltrust":
        if ctx.root_data is None or ctx.hp is None:
            raise ValueError("fltrust needs a root dataset and training hyperparameters")
        root = ctx.root_data
        if len(root) > p["root_size"]:
            rng = np.random.default_rng(ctx.seed)
            root = root.subset(np.sort(rng.choice(len(root), size=p["root_size"], replace=False)))
        weights, rescaled, _ = baselines.fltrust(locals_, global_model, root, ctx.hp.with_seed(ctx.seed))
        if weights is None:
            return DefenseOutcome("keep", keep=set(locals_), note="fltrust abstained: zero server update")
        return DefenseOutcome("weights", weights=weights, models=rescaled)
    raise ValueError(f"unknown defense {kind!r}")


def _apply_eta(agg: LayeredModel, global_model: LayeredModel, eta: float) -> LayeredModel:
    if eta == 1.0:
        return agg
    return global_model + eta * (agg - global_model)
