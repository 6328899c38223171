"""Consensus-embedding federated inference engine.

Devices with frozen, heterogeneous feature extractors cooperate at inference
time by mapping their private intermediate features into a 256-dimensional
shared embedding space (trained contrastively on unlabeled shared data),
predicting from exchanged embeddings with locally distilled output heads, and
combining per-device logits through configurable ensemble rules.
"""

from .data import (
    Dataset,
    SyntheticTaskConfig,
    holdout_shared,
    partition_dirichlet,
    partition_manual,
    read_container,
    read_features,
    synth_generate,
    write_container,
    write_features,
)
from .ensemble import EnsembleRule, apply, apply_batch, energy
from .federation import (
    CommMeter,
    FederationConfig,
    Message,
    MessageKind,
    TraceLog,
    federated_infer,
    train_ce,
    train_co_local,
)
from .losses import (
    ContrastiveConfig,
    DistillConfig,
    consensus_loss,
    cross_entropy,
    distill_loss,
    ntxent_term,
    pairwise_consensus_loss,
)
from .models import ArchitectureConfig, DeviceState, FileBackedHead, SyntheticHead, build_device
from .numerics import Rng, cosine_similarity, grad_check, log_sum_exp, softmax, spectral_norm
from .pipeline import PipelineConfig, build_system, evaluate_system, train_full

__version__ = "0.1.0"

__all__ = [
    "ArchitectureConfig", "CommMeter", "ContrastiveConfig", "Dataset",
    "DeviceState", "DistillConfig", "EnsembleRule", "FederationConfig",
    "FileBackedHead", "Message", "MessageKind", "PipelineConfig", "Rng",
    "SyntheticHead", "SyntheticTaskConfig", "TraceLog", "apply", "apply_batch",
    "build_device", "build_system", "consensus_loss", "cosine_similarity",
    "cross_entropy", "distill_loss", "energy", "evaluate_system",
    "federated_infer", "grad_check", "holdout_shared", "log_sum_exp",
    "ntxent_term", "pairwise_consensus_loss", "partition_dirichlet",
    "partition_manual", "read_container", "read_features", "softmax",
    "spectral_norm", "synth_generate", "train_ce", "train_co_local",
    "train_full", "write_container", "write_features",
]
