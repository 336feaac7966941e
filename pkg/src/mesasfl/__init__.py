"""Federated-learning poisoning simulator with the MESAS multi-metric defense."""
from .attacks import AdaptiveSpec, AttackSpec, BenignProbe, adaptive_train, make_probe
from .data import ClientDataset, PartitionSpec, PoisonSpec, gen_synthetic, partition, poison_dataset
from .defenses import DefenseContext, DefenseOutcome, DefenseSpec, apply_defense
from .federation import Client, FederationState, RoundRecord, client_round, fed_avg, run_round
from .mesas import DetectionReport, MesasConfig, compute_metric_set, mesas_filter
from .model import LayeredModel, MlpArchitecture, SchemaError, TrainHyperparams, train_local

__version__ = "0.1.0"

__all__ = [
    "AdaptiveSpec",
    "AttackSpec",
    "BenignProbe",
    "Client",
    "ClientDataset",
    "DefenseContext",
    "DefenseOutcome",
    "DefenseSpec",
    "DetectionReport",
    "FederationState",
    "LayeredModel",
    "MesasConfig",
    "MlpArchitecture",
    "PartitionSpec",
    "PoisonSpec",
    "RoundRecord",
    "SchemaError",
    "TrainHyperparams",
    "adaptive_train",
    "apply_defense",
    "client_round",
    "compute_metric_set",
    "fed_avg",
    "gen_synthetic",
    "make_probe",
    "mesas_filter",
    "partition",
    "poison_dataset",
    "run_round",
    "train_local",
]
