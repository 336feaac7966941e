"""FL rounds: client training, defense, equal-weight FedAVG."""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attacks import AttackSpec, adaptive_train, apply_post_steps, make_probe
from .data import ClientDataset
from .defenses import DefenseContext, DefenseOutcome, DefenseSpec, apply_defense
from .model import LayeredModel, SchemaError, TrainHyperparams, train_local


def derive_seed(*parts: int) -> int:
    """Stable 63-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(2, np.uint64)[0] >> 1)


# purpose tags for derive_seed
_TRAIN, _PROBE, _POST, _SELECT, _DEFENSE = range(5)


def fed_avg(global_model: LayeredModel, locals_: Sequence[LayeredModel], eta: float = 1.0) -> LayeredModel:
    """global + eta * mean(local_i - global)."""
    locals_ = list(locals_)
    if not locals_:
        raise ValueError("fed_avg needs at least one local model")
    g = global_model.flatten()
    for m in locals_:
        global_model.check_schema(m)
    # summing each coordinate in ascending order makes the result independent
    # of the order clients arrive in, bit for bit
    updates = np.sort(np.vstack([m.flatten() - g for m in locals_]), axis=0)
    total = np.zeros_like(g)
    for row in updates:
        total += row
    return global_model.unflatten(g + eta * (total / len(locals_)))


def weighted_aggregate(global_model: LayeredModel, models: dict, weights: dict,
                       eta: float = 1.0) -> LayeredModel:
    g = global_model.flatten()
    total = np.zeros_like(g)
    for cid in sorted(weights):
        if weights[cid] > 0:
            total += weights[cid] * (models[cid].flatten() - g)
    return global_model.unflatten(g + eta * total)


@dataclass(frozen=True)
class Client:
    id: int
    data: ClientDataset
    is_malicious: bool = False
    clean_data: ClientDataset | None = None  # unpoisoned copy for the adversary's probe


@dataclass
class FederationState:
    round: int
    global_model: LayeredModel
    clients: list
    selected_per_round: int
    global_lr: float = 1.0
    seed: int = 0

    def __post_init__(self):
        k, n = self.selected_per_round, len(self.clients)
        if not 1 <= k <= n:
            raise ValueError(f"selected_per_round must lie in [1, {n}]")
        ids = [c.id for c in self.clients]
        if len(set(ids)) != len(ids):
            raise ValueError("client ids must be unique")
        mal = sum(c.is_malicious for c in self.clients)
        if mal > max_malicious(n):
            raise ValueError(f"{mal} malicious of {n} clients breaks the benign majority")

    @property
    def total_clients(self) -> int:
        return len(self.clients)


def max_malicious(k: int) -> int:
    """Largest adversary count leaving k // 2 + 1 benign clients."""
    return max(0, k - (k // 2 + 1))


@dataclass
class RoundRecord:
    round: int
    participants: list
    malicious: list
    update_norms: dict
    outcome: DefenseOutcome | None
    aborted: bool = False
    defense_seconds: float = 0.0
    ma: float | None = None
    ba: float | None = None


def client_round(global_model: LayeredModel, client: Client, hp: TrainHyperparams,
                 attack: AttackSpec | None = None, *, seed: int = 0, round_idx: int = 0) -> LayeredModel:
    """Local model of one client for one round.

    Training is seeded by (seed, client id, round) only, so clients can run
    in any order or in parallel.
    """
    train_hp = hp.with_seed(derive_seed(seed, client.id, round_idx, _TRAIN))
    if attack is None or not client.is_malicious:
        return train_local(global_model, client.data, train_hp)
    probe = None
    if attack.needs_probe:
        clean = client.clean_data if client.clean_data is not None else client.data
        probe = make_probe(global_model, clean, hp.with_seed(derive_seed(seed, client.id, round_idx, _PROBE)))
    if attack.adaptive is not None:
        local = adaptive_train(global_model, client.data, train_hp, attack.adaptive, probe, global_model)
    else:
        local = train_local(global_model, client.data, train_hp)
    return apply_post_steps(local, global_model, attack.post, probe,
                            derive_seed(seed, client.id, round_idx, _POST))


def select_clients(state: FederationState) -> list:
    ids = [c.id for c in state.clients]
    k = state.selected_per_round
    if k == len(ids):
        return list(ids)
    rng = np.random.default_rng(derive_seed(state.seed, state.round, _SELECT))
    return sorted(rng.choice(ids, size=k, replace=False).tolist())


def run_round(state: FederationState, defense: DefenseSpec | None, hp: TrainHyperparams,
              attack: AttackSpec | None = None, *, threads: int = 1,
              context: DefenseContext | None = None) -> tuple[FederationState, RoundRecord]:
    """One FL round; returns the advanced state and its record.

    If the defense leaves nobody to aggregate the round is aborted and the
    global model carried over unchanged.
    """
    chosen = select_clients(state)
    by_id = {c.id: c for c in state.clients}
    g = state.global_model

    def work(cid):
        return client_round(g, by_id[cid], hp, attack, seed=state.seed, round_idx=state.round)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            models = list(pool.map(work, chosen))
    else:
        models = [work(cid) for cid in chosen]
    locals_ = dict(zip(chosen, models))
    norms = {cid: float(np.linalg.norm(m.flatten() - g.flatten())) for cid, m in locals_.items()}

    spec = defense or DefenseSpec("none")
    ctx = context or DefenseContext()
    ctx = ctx.with_seed(derive_seed(state.seed, state.round, _DEFENSE))
    started = time.perf_counter()
    outcome = apply_defense(spec, locals_, g, ctx, eta=state.global_lr)
    elapsed = time.perf_counter() - started

    new_global = aggregate_outcome(outcome, locals_, g, state.global_lr)
    aborted = new_global is None
    if aborted:
        new_global = g
    record = RoundRecord(state.round, list(chosen),
                         [cid for cid in chosen if by_id[cid].is_malicious],
                         norms, outcome, aborted, elapsed)
    new_state = FederationState(state.round + 1, new_global, state.clients,
                                state.selected_per_round, state.global_lr, state.seed)
    return new_state, record


def aggregate_outcome(outcome: DefenseOutcome, locals_: dict, global_model: LayeredModel,
                      eta: float) -> LayeredModel | None:
    """Turn a defense verdict into the next global model (None = nothing to aggregate)."""
    if outcome.kind == "aggregate":
        return outcome.aggregate
    if outcome.kind == "keep":
        kept = sorted(outcome.keep)
        if not kept:
            return None
        return fed_avg(global_model, [locals_[c] for c in kept], eta)
    if outcome.kind == "weights":
        if not any(w > 0 for w in outcome.weights.values()):
            return None
        return weighted_aggregate(global_model, outcome.models or locals_, outcome.weights, eta)
    if outcome.kind == "transformed":
        return fed_avg(global_model, [outcome.models[c] for c in sorted(outcome.models)], eta)
    raise SchemaError(f"unknown outcome kind {outcome.kind!r}")
