"""Declarative experiment runner: config -> scenario -> rounds -> reports."""
from __future__ import annotations

import copy
import csv
import io
import json
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import jsonschema
import numpy as np

from .attacks import AdaptiveSpec, AttackSpec
from .data import ClientDataset, PartitionSpec, PoisonSpec, build_test_sets, gen_synthetic, partition, poison_dataset, stratified_split
from .defenses import DefenseContext, DefenseSpec
from .federation import Client, FederationState, derive_seed, max_malicious, run_round
from .mesas import SIGNIFICANCE_PRESETS
from .model import LayeredModel, MlpArchitecture, TrainHyperparams, predict

BA_EFFECTIVE = 0.6
CSV_HEADER = ("round", "ma", "ba", "flagged_count", "fp", "fn", "defense_ms")

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "client_count": 20,
    "selected": None,
    "pmr": 0.45,
    "rounds": 3,
    "warmup_benign_rounds": 10,
    "global_lr": 1.0,
    "alpha": 0.3,
    "report_dir": None,
    "model": {"hidden_dims": [256]},
    "train": {"learning_rate": 0.01, "momentum": 0.9, "weight_decay": 0.005, "batch_size": 64, "epochs": 10},
    "data": {
        "class_count": 10,
        "feature_dim": 128,
        "per_class": 640,
        "spread": 1.5,
        "test_per_class": 100,
        "root_per_class": 10,
        "partition": {"strategy": "iid", "gamma": 0.0, "concentration": 1.0, "samples_per_client": None},
    },
    "attack": None,
    "defense": {"kind": "mesas", "params": {}},
}

# seed purposes, disjoint from the ones federation uses
_DATA, _SPLIT, _PART, _MAL, _POISON, _INIT = range(100, 106)


class ConfigError(ValueError):
    """Invalid experiment config; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
        self.message = message


def load_schema() -> dict:
    return json.loads(resources.files("mesasfl").joinpath("config_schema.json").read_text())


def _merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, Mapping) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` strings; values parse as JSON, else stay strings."""
    out = copy.deepcopy(raw)
    for item in overrides or ():
        key, sep, text = item.partition("=")
        if not sep or not key:
            raise ConfigError(item, "override must look like key=value")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                node[part] = {}
            node = node[part]
        node[parts[-1]] = value
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    client_count: int
    selected: int
    pmr: float
    rounds: int
    warmup_benign_rounds: int
    global_lr: float
    alpha: float
    model: dict
    train: dict
    data: dict
    attack: dict | None
    defense: dict
    report_dir: str | None = None

    @classmethod
    def from_dict(cls, raw: Mapping) -> "ExperimentConfig":
        """Validate ``raw`` (defaults filled in) and build a config.

        Raises :class:`ConfigError` naming the first offending field.
        """
        merged = _merge(DEFAULT_CONFIG, raw)
        validator = jsonschema.Draft202012Validator(load_schema())
        errors = sorted(validator.iter_errors(merged), key=lambda e: list(e.absolute_path))
        if errors:
            err = errors[0]
            path = ".".join(str(p) for p in err.absolute_path) or "<root>"
            raise ConfigError(path, err.message)
        if merged["selected"] is None:
            merged["selected"] = merged["client_count"]
        cfg = cls(**merged)
        cfg._check()
        return cfg

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "client_count": self.client_count, "selected": self.selected,
            "pmr": self.pmr, "rounds": self.rounds, "warmup_benign_rounds": self.warmup_benign_rounds,
            "global_lr": self.global_lr, "alpha": self.alpha, "model": copy.deepcopy(self.model),
            "train": copy.deepcopy(self.train), "data": copy.deepcopy(self.data),
            "attack": copy.deepcopy(self.attack), "defense": copy.deepcopy(self.defense),
            "report_dir": self.report_dir,
        }

    # semantic checks the schema cannot express
    def _check(self) -> None:
        if self.selected > self.client_count:
            raise ConfigError("selected", f"{self.selected} exceeds client_count {self.client_count}")
        k = self.selected
        mal_round = math.ceil(self.pmr * k - 1e-9)
        if mal_round > max_malicious(k):
            raise ConfigError("pmr", f"ceil({self.pmr}*{k}) = {mal_round} malicious clients leave no "
                                     f"benign majority of {k // 2 + 1}")
        if self.malicious_count > max_malicious(self.client_count):
            raise ConfigError("pmr", "malicious clients outnumber the benign majority")
        classes = self.data["class_count"]
        poison = (self.attack or {}).get("data_poison")
        if poison:
            for key in ("target_label", "source_label"):
                lab = poison.get(key)
                if lab is not None and lab >= classes:
                    raise ConfigError(f"attack.data_poison.{key}", f"label {lab} >= class_count {classes}")
            try:
                self.poison_spec()
            except ValueError as exc:
                raise ConfigError("attack.data_poison", str(exc)) from None
        try:
            self.attack_spec()
        except ValueError as exc:
            raise ConfigError("attack", str(exc)) from None
        try:
            self.defense_spec()
        except ValueError as exc:
            raise ConfigError("defense.params", str(exc)) from None
        if self.defense["kind"] == "fltrust" and self.data["root_per_class"] < 1:
            raise ConfigError("data.root_per_class", "fltrust needs a root dataset")
        try:
            PartitionSpec(**self.partition_kwargs())
        except ValueError as exc:
            raise ConfigError("data.partition", str(exc)) from None

    @property
    def malicious_count(self) -> int:
        if not self.attack:
            return 0
        return math.ceil(self.pmr * self.client_count - 1e-9)

    def partition_kwargs(self) -> dict:
        return dict(self.data["partition"])

    def poison_spec(self) -> PoisonSpec | None:
        raw = (self.attack or {}).get("data_poison")
        return PoisonSpec(**raw) if raw else None

    def attack_spec(self) -> AttackSpec | None:
        if not self.attack:
            return None
        adaptive = self.attack.get("adaptive")
        spec = None
        if adaptive:
            spec = AdaptiveSpec(alpha=adaptive.get("alpha", self.alpha),
                                objectives=tuple(adaptive.get("objectives", ("EUCL", "COS"))),
                                targets=dict(adaptive.get("targets", {})))
        return AttackSpec(self.poison_spec(), spec, tuple(self.attack.get("post", ())))

    def defense_spec(self) -> DefenseSpec:
        params = dict(self.defense.get("params") or {})
        level = params.get("significance_level")
        if self.defense["kind"] == "mesas" and isinstance(level, str):
            if level not in SIGNIFICANCE_PRESETS:
                raise ValueError(f"unknown significance preset {level!r}")
            params["significance_level"] = SIGNIFICANCE_PRESETS[level]
        return DefenseSpec(self.defense["kind"], params)

    def hyperparams(self) -> TrainHyperparams:
        return TrainHyperparams(**self.train)

    def architecture(self) -> MlpArchitecture:
        return MlpArchitecture(self.data["feature_dim"], tuple(self.model["hidden_dims"]), self.data["class_count"])


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model: LayeredModel, clean_test: ClientDataset, triggered_test: ClientDataset | None = None):
    """Return ``(ma, ba)``; ``ba`` is None without a triggered set.

    Triggered samples already carry the target label, so BA is plain
    accuracy on them.
    """
    if clean_test is None or len(clean_test) == 0:
        raise ValueError("clean test set is empty")
    ma = float(np.mean(predict(model, clean_test.features) == clean_test.labels))
    if triggered_test is None or len(triggered_test) == 0:
        return ma, None
    ba = float(np.mean(predict(model, triggered_test.features) == triggered_test.labels))
    return ma, ba


def confusion(flagged, truth: Mapping) -> dict:
    flagged = set(flagged)
    unknown = flagged - set(truth)
    if unknown:
        raise ValueError(f"flagged ids not in the round: {sorted(unknown)}")
    tp = sum(1 for c, mal in truth.items() if mal and c in flagged)
    fp = sum(1 for c, mal in truth.items() if not mal and c in flagged)
    fn = sum(1 for c, mal in truth.items() if mal and c not in flagged)
    tn = sum(1 for c, mal in truth.items() if not mal and c not in flagged)
    return {"tp": tp, "fp": fp, "tn": tn, "fn": fn}


def rates(counts: Mapping) -> tuple:
    tp, fp, tn, fn = counts["tp"], counts["fp"], counts["tn"], counts["fn"]
    total = tp + fp + tn + fn
    acc = (tp + tn) / total if total else None
    fpr = fp / (fp + tn) if fp + tn else None
    fnr = fn / (fn + tp) if fn + tp else None
    return acc, fpr, fnr


def detection_metrics(report, truth: Mapping) -> tuple:
    """``(acc, fpr, fnr)`` with positive = flagged; degenerate ratios are None.

    ``report`` is a DetectionReport or an iterable of flagged ids.
    """
    flagged = report.flagged if hasattr(report, "flagged") else report
    return rates(confusion(flagged, truth))


# ---------------------------------------------------------------------------
# result


@dataclass
class ExperimentResult:
    config: dict
    code_version: str
    rounds: list
    final: dict
    timing: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"config": self.config, "code_version": self.code_version, "rounds": self.rounds,
                "final": self.final, "timing": self.timing}

    @classmethod
    def from_dict(cls, raw: Mapping) -> "ExperimentResult":
        return cls(raw["config"], raw["code_version"], list(raw["rounds"]), dict(raw["final"]),
                   dict(raw.get("timing", {})))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"

    def attack_rounds(self) -> list:
        return [r for r in self.rounds if r["phase"] == "attack"]


# ---------------------------------------------------------------------------
# scenario construction


@dataclass
class Scenario:
    benign_clients: list
    attack_clients: list
    malicious_ids: list
    clean_test: ClientDataset
    triggered_test: ClientDataset | None
    root: ClientDataset | None
    init_model: LayeredModel


def build_scenario(cfg: ExperimentConfig) -> Scenario:
    d = cfg.data
    test_n, root_n = d["test_per_class"], d["root_per_class"]
    full = gen_synthetic(d["class_count"], d["feature_dim"], d["per_class"] + test_n + root_n,
                         d["spread"], derive_seed(cfg.seed, _DATA))
    test, root, pool = stratified_split(full, [test_n, root_n], derive_seed(cfg.seed, _SPLIT))
    spec = PartitionSpec(**cfg.partition_kwargs(), rng_seed=derive_seed(cfg.seed, _PART))
    parts = partition(pool, spec, cfg.client_count)

    rng = np.random.default_rng(derive_seed(cfg.seed, _MAL))
    mal = sorted(rng.choice(cfg.client_count, size=cfg.malicious_count, replace=False).tolist())

    poison = cfg.poison_spec()
    if poison is not None:
        # one trigger value for every attacker and the test set
        poison = poison.resolve_trigger(pool)
    benign, attacked = [], []
    for cid, data in enumerate(parts):
        benign.append(Client(cid, data))
        if cid in mal:
            bad = poison_dataset(data, poison, derive_seed(cfg.seed, cid, _POISON)) if poison else data
            attacked.append(Client(cid, bad, True, clean_data=data))
        else:
            attacked.append(Client(cid, data))
    triggered = None
    if poison is not None and poison.targeted:
        _, triggered = build_test_sets(test, poison)
    init = cfg.architecture().init(derive_seed(cfg.seed, _INIT))
    return Scenario(benign, attacked, mal, test, triggered, root if root_n else None, init)


def run_experiment(cfg: ExperimentConfig | Mapping, threads: int = 1) -> ExperimentResult:
    """Warm-up rounds (no attack, no defense) followed by attacked, defended rounds."""
    if not isinstance(cfg, ExperimentConfig):
        cfg = ExperimentConfig.from_dict(cfg)
    started = time.monotonic()
    hp = cfg.hyperparams()
    sc = build_scenario(cfg)
    attack = cfg.attack_spec()
    defense = cfg.defense_spec()
    ctx = DefenseContext(root_data=sc.root, hp=hp)

    state = FederationState(0, sc.init_model, sc.benign_clients, cfg.selected, cfg.global_lr, cfg.seed)
    rounds, defense_ms = [], []
    total = {"tp": 0, "fp": 0, "tn": 0, "fn": 0}
    filtering = False
    for r in range(cfg.warmup_benign_rounds + cfg.rounds):
        warm = r < cfg.warmup_benign_rounds
        if not warm and state.clients is sc.benign_clients:
            state = FederationState(state.round, state.global_model, sc.attack_clients,
                                    cfg.selected, cfg.global_lr, cfg.seed)
        state, rec = run_round(state, None if warm else defense, hp, None if warm else attack,
                               threads=threads, context=ctx)
        ma, ba = evaluate(state.global_model, sc.clean_test, sc.triggered_test)
        entry = {"round": rec.round, "phase": "warmup" if warm else "attack",
                 "participants": rec.participants, "malicious": rec.malicious,
                 "aborted": rec.aborted, "ma": ma, "ba": ba, "flagged": None,
                 "tp": None, "fp": None, "tn": None, "fn": None, "detection": None,
                 "note": rec.outcome.note if rec.outcome else ""}
        if not warm:
            flagged = rec.outcome.flagged(rec.participants)
            if flagged is not None:
                filtering = True
                truth = {c: c in rec.malicious for c in rec.participants}
                counts = confusion(flagged, truth)
                entry.update(counts, flagged=sorted(flagged))
                for key in total:
                    total[key] += counts[key]
            if rec.outcome.report is not None:
                entry["detection"] = rec.outcome.report.to_dict()
        rounds.append(entry)
        defense_ms.append(rec.defense_seconds * 1000.0)

    final_ma, final_ba = (rounds[-1]["ma"], rounds[-1]["ba"]) if rounds else \
        evaluate(state.global_model, sc.clean_test, sc.triggered_test)
    acc, fpr, fnr = rates(total) if filtering else (None, None, None)
    attack_rounds = [e for e in rounds if e["phase"] == "attack" and e["flagged"] is not None]
    final = {
        "ma": final_ma, "ba": final_ba,
        "attack_effective": None if final_ba is None else final_ba > BA_EFFECTIVE,
        "acc": acc, "fpr": fpr, "fnr": fnr,
        **({k: v for k, v in total.items()} if filtering else {k: None for k in total}),
        "mean_flags_per_round": (float(np.mean([len(e["flagged"]) for e in attack_rounds]))
                                 if attack_rounds else None),
        "malicious_ids": sc.malicious_ids,
    }
    timing = {"defense_ms": defense_ms, "total_s": time.monotonic() - started}
    from . import __version__

    return ExperimentResult(cfg.to_dict(), __version__, rounds, final, timing)


# ---------------------------------------------------------------------------
# output


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def _cell(value) -> str:
    return "" if value is None else repr(value) if isinstance(value, float) else str(value)


def rounds_csv(result: ExperimentResult) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    ms = result.timing.get("defense_ms", [])
    for i, e in enumerate(result.rounds):
        count = None if e["flagged"] is None else len(e["flagged"])
        writer.writerow([e["round"], _cell(e["ma"]), _cell(e["ba"]), _cell(count), _cell(e["fp"]),
                         _cell(e["fn"]), _cell(ms[i] if i < len(ms) else None)])
    return buf.getvalue()


def emit_results(result: ExperimentResult, out_dir) -> dict:
    """Write result.json, rounds.csv and detection.json into ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = {"result": out / "result.json", "rounds": out / "rounds.csv",
                 "detection": out / "detection.json"}
        _atomic_write(paths["result"], result.to_json())
        _atomic_write(paths["rounds"], rounds_csv(result))
        detection = [{"round": e["round"], "phase": e["phase"], "flagged": e["flagged"],
                      "report": e["detection"]} for e in result.rounds]
        _atomic_write(paths["detection"], json.dumps(detection, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write results to {out}: {exc}") from exc
    return paths
