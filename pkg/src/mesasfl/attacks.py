"""Model poisoning and strong adaptive multi-objective training."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import ClientDataset, PoisonSpec
from .mesas import WHOLE, compute_metric_set
from .model import CompositeLoss, LayeredModel, SchemaError, TrainHyperparams, train_local

DIFFERENTIABLE = ("EUCL", "COS", "VAR")
POST_HOC = ("MIN", "MAX")
# COUNT goes through sign(), whose gradient is zero everywhere
OBJECTIVES = DIFFERENTIABLE + POST_HOC

_METRIC_KEY = {"EUCL": "eucl", "COS": "cos", "VAR": "var", "MIN": "min_nz", "MAX": "max_abs"}


@dataclass(frozen=True)
class AdaptiveSpec:
    """Objectives to adapt plus per-objective benign targets.

    ``targets`` may be left empty and filled from a :class:`BenignProbe`
    (see :meth:`with_probe_targets`).
    """

    alpha: float = 0.3
    objectives: tuple[str, ...] = ("EUCL", "COS")
    targets: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "objectives", tuple(o.upper() for o in self.objectives))
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")
        if not self.objectives:
            raise ValueError("at least one adaption objective is required")
        for obj in self.objectives:
            if obj == "COUNT":
                raise ValueError("COUNT cannot be adapted: sign() has zero gradient")
            if obj not in OBJECTIVES:
                raise ValueError(f"unknown objective {obj!r}")
        for key, val in self.targets.items():
            if not math.isfinite(val):
                raise ValueError(f"target for {key} must be finite")

    def with_probe_targets(self, probe: "BenignProbe") -> "AdaptiveSpec":
        targets = dict(probe.targets)
        targets.update(self.targets)
        return AdaptiveSpec(self.alpha, self.objectives, targets)


@dataclass(frozen=True)
class BenignProbe:
    """A benign model trained on the adversary's clean data, with its metrics."""

    benign_model: LayeredModel
    metrics: dict  # whole-model metric values keyed by objective name

    @property
    def targets(self) -> dict:
        return dict(self.metrics)


def make_probe(global_model: LayeredModel, clean_data: ClientDataset, hp: TrainHyperparams) -> BenignProbe:
    benign = train_local(global_model, clean_data, hp)
    whole = compute_metric_set(benign, global_model)[WHOLE]
    metrics = {obj: whole[key] for obj, key in _METRIC_KEY.items() if whole[key] is not None}
    return BenignProbe(benign, metrics)


@dataclass(frozen=True)
class AttackSpec:
    """What a captured client does.

    ``post`` is an ordered list of steps, each a dict with an ``op`` key:
    ``sign_flip``, ``noise`` (``sigma``), ``scale_to_benign_eucl``
    (``jitter``), ``fixate`` (``layers``) or ``clip_to_benign``.
    """

    data_poison: PoisonSpec | None = None
    adaptive: AdaptiveSpec | None = None
    post: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "post", tuple(dict(step) for step in self.post))
        for step in self.post:
            if step.get("op") not in POST_OPS:
                raise ValueError(f"unknown post-processing op {step.get('op')!r}")
        if self.adaptive is not None:
            bad = [o for o in self.adaptive.objectives if o not in DIFFERENTIABLE]
            if bad:
                raise ValueError(f"objectives {bad} are not trainable; use the clip_to_benign step")

    @property
    def needs_probe(self) -> bool:
        return self.adaptive is not None or any(
            s["op"] in ("scale_to_benign_eucl", "fixate", "clip_to_benign") for s in self.post)


POST_OPS = ("sign_flip", "noise", "scale_to_benign_eucl", "fixate", "clip_to_benign")


# ---------------------------------------------------------------------------
# post-hoc model poisoning


def sign_flip(model: LayeredModel) -> LayeredModel:
    return -model


def noise_model(model: LayeredModel, sigma: float, seed: int) -> LayeredModel:
    """Add i.i.d. N(0, sigma^2) noise to every parameter."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return model
    rng = np.random.default_rng(seed)
    return model.unflatten(model.flatten() + rng.normal(0.0, sigma, size=model.flat_len))


def truncated_jitter(rng: np.random.Generator, bound: float) -> float:
    """Gaussian draw with std ``bound / 2``, rejected outside [-bound, bound]."""
    if bound <= 0:
        return 0.0
    while True:
        eps = rng.normal(0.0, bound / 2.0)
        if abs(eps) <= bound:
            return float(eps)


def scale_update_to_benign(local: LayeredModel, global_model: LayeredModel, target_eucl: float,
                           jitter_fraction: float = 0.03, seed: int = 0) -> LayeredModel:
    """Rescale the update radially so its L2 norm is target_eucl * (1 + eps)."""
    local.check_schema(global_model)
    if not target_eucl > 0:
        raise ValueError("target_eucl must be positive")
    update = local.flatten() - global_model.flatten()
    norm = float(np.linalg.norm(update))
    if norm == 0.0:
        raise ValueError("cannot rescale a zero update")
    eps = truncated_jitter(np.random.default_rng(seed), jitter_fraction)
    target = target_eucl * (1.0 + eps)
    return global_model.unflatten(global_model.flatten() + update * (target / norm))


def fixate_layers(trained: LayeredModel, donor: LayeredModel, layer_names: Sequence[str]) -> LayeredModel:
    """Copy the named layers verbatim from ``donor`` into ``trained``."""
    trained.check_schema(donor)
    unknown = [n for n in layer_names if n not in trained.names]
    if unknown:
        raise SchemaError(f"unknown layers {unknown}")
    return trained.replace_layers({n: donor.layer(n) for n in layer_names})


def clip_outliers_to_benign(model: LayeredModel, global_model: LayeredModel,
                            benign_min: float, benign_max: float) -> LayeredModel:
    """Clamp every nonzero parameter change into [benign_min, benign_max] in magnitude."""
    model.check_schema(global_model)
    if not 0 < benign_min <= benign_max:
        raise ValueError("need 0 < benign_min <= benign_max")
    g = global_model.flatten()
    delta = model.flatten() - g
    mag = np.abs(delta)
    clipped = np.where(mag > benign_max, benign_max, mag)
    clipped = np.where((mag > 0) & (clipped < benign_min), benign_min, clipped)
    return model.unflatten(g + np.sign(delta) * clipped)


# ---------------------------------------------------------------------------
# adaptive training


def scale_to_max(losses: Sequence[float]) -> np.ndarray:
    """lambda_i = max_j L_j / L_i; a zero loss keeps lambda = 1."""
    arr = np.asarray(losses, dtype=np.float64)
    top = arr.max()
    safe = np.where(arr > 0, arr, 1.0)
    return np.where(arr > 0, top / safe, 1.0)


def metric_value_and_grad(objective: str, params: np.ndarray, glob: np.ndarray):
    """Whole-model metric and its gradient w.r.t. the local parameters."""
    if objective == "EUCL":
        delta = params - glob
        norm = float(np.linalg.norm(delta))
        return norm, (delta / norm if norm > 0 else np.zeros_like(params))
    if objective == "COS":
        npn = float(np.linalg.norm(params))
        ng = float(np.linalg.norm(glob))
        if npn == 0 or ng == 0:
            return 0.0, np.zeros_like(params)
        dot = float(params @ glob)
        grad = -(glob / (npn * ng) - dot * params / (npn ** 3 * ng))
        return 0.5 * float(np.sum((params / npn - glob / ng) ** 2)), grad
    if objective == "VAR":
        centered = params - params.mean()
        return float(np.mean(centered ** 2)), 2.0 * centered / params.size
    raise ValueError(f"objective {objective!r} has no gradient")


class AdaptionLoss:
    """alpha * task + (1 - alpha) * sum_i lambda_i * |m_i - target_i|.

    lambda is fixed from the first mini-batch by scaling every loss, task
    included, to the largest one; the task term itself stays unscaled.
    """

    def __init__(self, spec: AdaptiveSpec, global_model: LayeredModel):
        missing = [o for o in spec.objectives if o not in spec.targets]
        if missing:
            raise ValueError(f"no benign target for {missing}")
        self.spec = spec
        self.glob = global_model.flatten()
        self.lambdas: np.ndarray | None = None
        self.initial_losses: np.ndarray | None = None

    def __call__(self, params, task_loss, task_grad):
        alpha = self.spec.alpha
        if alpha == 1.0:
            return task_loss, task_grad
        terms = []
        grads = []
        for obj in self.spec.objectives:
            value, grad = metric_value_and_grad(obj, params, self.glob)
            gap = value - self.spec.targets[obj]
            terms.append(abs(gap))
            grads.append(np.sign(gap) * grad)
        if self.lambdas is None:
            self.initial_losses = np.array([task_loss] + terms)
            self.lambdas = scale_to_max(self.initial_losses)[1:]
        adapt = float(np.dot(self.lambdas, terms))
        adapt_grad = sum(lam * g for lam, g in zip(self.lambdas, grads))
        return (alpha * task_loss + (1 - alpha) * adapt,
                alpha * task_grad + (1 - alpha) * adapt_grad)


def adaptive_train(init: LayeredModel, poisoned_data: ClientDataset, hp: TrainHyperparams,
                   spec: AdaptiveSpec, probe: BenignProbe | None = None,
                   global_model: LayeredModel | None = None) -> LayeredModel:
    """Local training with the scaled adaption objectives mixed into the loss."""
    bad = [o for o in spec.objectives if o not in DIFFERENTIABLE]
    if bad:
        raise ValueError(f"objectives {bad} are not differentiable")
    global_model = global_model if global_model is not None else init
    if probe is not None:
        spec = spec.with_probe_targets(probe)
    if spec.alpha == 1.0:
        return train_local(init, poisoned_data, hp)
    return train_local(init, poisoned_data, hp, extra_loss=AdaptionLoss(spec, global_model))


# ---------------------------------------------------------------------------
# pipeline


def apply_post_steps(local: LayeredModel, global_model: LayeredModel, steps: Sequence[dict],
                     probe: BenignProbe | None, seed: int) -> LayeredModel:
    rng = np.random.default_rng(seed)
    for step in steps:
        op = step["op"]
        sub_seed = int(rng.integers(2 ** 63 - 1))
        if op == "sign_flip":
            local = sign_flip(local)
        elif op == "noise":
            local = noise_model(local, float(step.get("sigma", 0.01)), sub_seed)
        elif op == "scale_to_benign_eucl":
            local = scale_update_to_benign(local, global_model, probe.metrics["EUCL"],
                                           float(step.get("jitter", 0.03)), sub_seed)
        elif op == "fixate":
            local = fixate_layers(local, probe.benign_model, step.get("layers") or global_model.names[-2:])
        elif op == "clip_to_benign":
            local = clip_outliers_to_benign(local, global_model, probe.metrics["MIN"], probe.metrics["MAX"])
        else:
            raise ValueError(f"unknown op {op!r}")
    return local
