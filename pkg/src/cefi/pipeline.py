"""End-to-end orchestration of one cooperative-inference system: task setup,
partitioning, local tail pretraining, embedding alignment, cooperative-output
distillation, and batched evaluation.

The CLI drives these stages through on-disk artifacts; the evaluation and
acceptance harnesses call them in memory. Everything is deterministic in the
(config, seed) pair.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import (
    Dataset,
    SyntheticTaskConfig,
    holdout_shared,
    partition_dirichlet,
    partition_manual,
    synth_generate,
)
from .ensemble import EnsembleRule, apply_batch
from .federation import (
    CommMeter,
    FederationConfig,
    TraceLog,
    ce_epoch_bytes,
    inference_bytes,
    train_ce,
    train_co_local,
)
from .losses import ContrastiveConfig, DistillConfig
from .models import ArchitectureConfig, DeviceState, build_device
from .nn import OptimizerConfig, TrainLoopConfig, train_supervised
from .numerics import Rng

ALL_SCHEMES = ("mild", "moderate", "skewed", "disjoint", "dirichlet:0.1", "dirichlet:0.5")


@dataclass
class PipelineConfig:
    """Resolved hyperparameters for a full run."""

    task: SyntheticTaskConfig = field(default_factory=SyntheticTaskConfig)
    arch: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    tail_train: TrainLoopConfig = field(default_factory=TrainLoopConfig)
    scheme: str = "disjoint"
    share_fraction: float = 0.2
    seed: int = 0

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def canonical_grid_config(scheme: str, seed: int) -> PipelineConfig:
    """The desk-scale evaluation cell: 10-class Gaussian mixture, three
    synthetic heads, a 40-epoch alignment budget."""
    return PipelineConfig(
        task=SyntheticTaskConfig(seed=seed),
        federation=FederationConfig(seed=seed, ce_epochs=40),
        tail_train=TrainLoopConfig(batch_size=64, max_epochs=20, rng_seed=seed),
        scheme=scheme,
        seed=seed,
    )


def partition_for(cfg: PipelineConfig, local: Dataset) -> list[Dataset]:
    if cfg.scheme.startswith("dirichlet:"):
        alpha = float(cfg.scheme.split(":", 1)[1])
        return partition_dirichlet(local, alpha, cfg.federation.num_devices, seed=cfg.seed)
    return partition_manual(local, cfg.scheme, cfg.federation.num_devices, seed=cfg.seed)


@dataclass
class TrainedSystem:
    """A fully trained cooperative system plus the data it was built on."""

    cfg: PipelineConfig
    devices: list[DeviceState]
    parts: list[Dataset]
    shared: Dataset
    test: Dataset
    oracle_labels: dict[int, int]
    meter: CommMeter
    trace: TraceLog
    co_init: list[list[np.ndarray]]


def build_system(cfg: PipelineConfig,
                 heads: list | None = None,
                 datasets: tuple[Dataset, Dataset] | None = None) -> TrainedSystem:
    """Create devices and data splits (nothing trained yet).

    ``heads`` may supply :class:`FileBackedHead` instances for runs driven by
    exported feature files; otherwise seeded synthetic heads are built.
    ``datasets`` may supply an explicit (train, test) pair.
    """
    train, test = datasets if datasets is not None else synth_generate(cfg.task)
    local, shared = holdout_shared(train, cfg.share_fraction, seed=cfg.seed)
    parts = partition_for(cfg, local)
    rng = Rng(cfg.seed)
    devices = []
    for k in range(cfg.federation.num_devices):
        head = heads[k] if heads is not None else None
        d = build_device(k, cfg.task.input_dim, cfg.arch, rng, head=head)
        d.local_ids = parts[k].ids
        d.seen_labels = frozenset(int(c) for c in np.unique(parts[k].require_labels()))
        devices.append(d)
    co_init = [[p.value.copy() for p in d.co.params()] for d in devices]
    return TrainedSystem(cfg=cfg, devices=devices, parts=parts, shared=shared,
                         test=test, oracle_labels=train.label_of(),
                         meter=CommMeter(), trace=TraceLog(), co_init=co_init)


def pretrain_tails(system: TrainedSystem) -> None:
    """Supervised local training of each device's tail on its own partition."""
    cfg = system.cfg
    for k, d in enumerate(system.devices):
        part = system.parts[k]
        feats = d.head_features(part.x, part.ids)
        loop = TrainLoopConfig(
            batch_size=cfg.tail_train.batch_size,
            max_epochs=cfg.tail_train.max_epochs,
            early_stop_patience=cfg.tail_train.early_stop_patience,
            validation_fraction=cfg.tail_train.validation_fraction,
            rng_seed=cfg.seed * 1000003 + k,
        )
        d.tail.frozen = False
        train_supervised(d.tail, feats, part.require_labels(), loop, cfg.optimizer)
        d.tail.frozen = True


def run_train_ce(system: TrainedSystem):
    return train_ce(system.devices, system.shared, system.cfg.federation,
                    system.cfg.contrastive, system.cfg.optimizer,
                    meter=system.meter, trace=system.trace)


def run_train_co(system: TrainedSystem, keep_ids_per_device: list | None = None) -> None:
    for k, d in enumerate(system.devices):
        keep = None if keep_ids_per_device is None else keep_ids_per_device[k]
        train_co_local(d, system.shared, system.cfg.federation,
                       system.cfg.distill, system.cfg.optimizer, keep_ids=keep)


def reset_co(system: TrainedSystem) -> None:
    """Restore every cooperative head to its initial parameters (for
    retraining variants under identical starting conditions)."""
    for d, snap in zip(system.devices, system.co_init):
        for p, init in zip(d.co.params(), snap):
            p.value[...] = init


def train_full(cfg: PipelineConfig) -> TrainedSystem:
    system = build_system(cfg)
    pretrain_tails(system)
    run_train_ce(system)
    run_train_co(system)
    return system


# ---------------------------------------------------------------------------
# Batched evaluation
# ---------------------------------------------------------------------------

def solo_logits(system: TrainedSystem, dataset: Dataset) -> np.ndarray:
    """(K, N, C) logits of every device's own pretrained model on the set."""
    return np.stack([
        d.solo_predict(d.head_features(dataset.x, dataset.ids), mode="eval")
        for d in system.devices
    ]).astype(np.float64)


def cefi_logits(system: TrainedSystem, origin_idx: int, dataset: Dataset) -> np.ndarray:
    """(K, N, C) cooperative logits when ``origin_idx`` supplies embeddings.

    The origin embeds its own features (or the idealized override); every
    device, origin included, runs its cooperative head on that embedding.
    Matches the per-sample protocol exchange exactly.
    """
    origin = system.devices[origin_idx]
    if origin.embedding_override is not None:
        z = origin.embed_ids(dataset.ids, dataset.x)
    else:
        z = origin.embed(origin.head_features(dataset.x, dataset.ids), mode="eval")
    z32 = z.astype(np.float32)
    return np.stack([d.co_predict(z32, mode="eval") for d in system.devices]).astype(np.float64)


def accuracy_of(labels: np.ndarray, truth: np.ndarray) -> float:
    return float((labels == truth).mean())


@dataclass
class CellResult:
    """Evaluation of one (scheme, seed) cell."""

    scheme: str
    seed: int
    config_hash: str
    solo_acc: list[float]
    cefi_acc: dict[str, list[float]]          # rule -> per-origin accuracy
    input_sharing_acc: float
    oracle_acc: float
    edge_ensemble_acc: float | None
    inference_bytes_per_sample: int
    ce_bytes_per_epoch: int

    def mean_cefi(self, rule: str) -> float:
        return float(np.mean(self.cefi_acc[rule]))

    @property
    def mean_solo(self) -> float:
        return float(np.mean(self.solo_acc))


def evaluate_system(system: TrainedSystem, rules: list[EnsembleRule],
                    edge_accuracy: float | None = None) -> CellResult:
    """Accuracy of solo inference, every cooperative rule per origin device,
    the input-sharing reference, and the oracle bound."""
    test = system.test
    truth = test.require_labels()
    k = len(system.devices)

    solo = solo_logits(system, test)
    solo_acc = [accuracy_of(solo[i].argmax(axis=1), truth) for i in range(k)]
    input_sharing = accuracy_of(apply_batch(EnsembleRule("soft_vote"), solo), truth)

    per_rule: dict[str, list[float]] = {r.kind: [] for r in rules}
    oracle_accs = []
    for origin in range(k):
        logits = cefi_logits(system, origin, test)
        for r in rules:
            per_rule[r.kind].append(
                accuracy_of(apply_batch(r, logits, truth), truth))
        oracle_accs.append(
            accuracy_of(apply_batch(EnsembleRule("oracle"), logits, truth), truth))

    fed = system.cfg.federation
    return CellResult(
        scheme=system.cfg.scheme,
        seed=system.cfg.seed,
        config_hash=system.cfg.config_hash(),
        solo_acc=solo_acc,
        cefi_acc=per_rule,
        input_sharing_acc=input_sharing,
        oracle_acc=float(np.mean(oracle_accs)),
        edge_ensemble_acc=edge_accuracy,
        inference_bytes_per_sample=inference_bytes(k, system.cfg.arch.embed_dim,
                                                   system.cfg.arch.num_classes),
        ce_bytes_per_epoch=ce_epoch_bytes(k, len(system.shared), system.cfg.arch.embed_dim),
    )
