"""The cooperative protocol as deterministic message passing among devices:
embedding-alignment training rounds through a rotating aggregator, local
distillation of the cooperative output head, the inference exchange, and a
byte-exact communication meter.

Two execution modes are provided. The canonical single-threaded mode runs
every device in program order; the threaded mode gives each device a
long-lived worker thread fed through queues, with the round driver acting as
the aggregator's compute location. Rounds are barrier-synchronized and each
device's arithmetic is identical in both modes, so parameters come out
bit-identical — asserted, not assumed, in the test suite.

Only embeddings and embedding-level gradients ever cross the simulated wire;
raw inputs and head/tail parameters have no message kind that could carry
them.
"""

from __future__ import annotations

import math
import queue
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable

import numpy as np

from .data import Dataset
from .errors import InvalidConfig, RoundAborted
from .losses import ContrastiveConfig, DistillConfig, consensus_loss, distill_loss
from .models import DeviceState
from .nn import Adam, OptimizerConfig, zero_grads
from .numerics import Rng


class MessageKind(Enum):
    EMBED_UP = "EmbedUp"
    GRAD_DOWN = "GradDown"
    EMBED_SHARE = "EmbedShare"
    LOGITS_RETURN = "LogitsReturn"


@dataclass(frozen=True)
class Message:
    """An immutable payload in flight between two devices."""

    kind: MessageKind
    sender: int
    receiver: int
    payload: np.ndarray

    def __post_init__(self):
        if self.payload.dtype != np.float32:
            raise InvalidConfig("message payloads are float32 on the wire")
        self.payload.setflags(write=False)

    @property
    def byte_size(self) -> int:
        return int(self.payload.size) * 4


class CommMeter:
    """Byte counters per protocol phase, plus a per-epoch breakdown.

    Cooperative-output training is local by design, so its counter can only
    ever read zero; it exists to make that claim checkable.
    """

    PHASES = ("ce_training", "co_training", "inference")

    def __init__(self):
        self.bytes = {phase: 0 for phase in self.PHASES}
        self.per_epoch: list[int] = []

    def add(self, phase: str, nbytes: int) -> None:
        if phase not in self.bytes:
            raise InvalidConfig(f"unknown comm phase {phase!r}")
        self.bytes[phase] += int(nbytes)

    def close_epoch(self, nbytes: int) -> None:
        self.per_epoch.append(int(nbytes))


class TraceLog:
    """Round-trace records ``(round, kind, sender, receiver, bytes)``.

    Records are kept in canonical sorted order when written so the file is
    identical no matter which execution mode produced it.
    """

    FIELDS = ("round", "kind", "sender", "receiver", "bytes")

    def __init__(self):
        self.records: list[tuple[int, str, int, int, int]] = []
        self._lock = threading.Lock()

    def add(self, round_idx: int, msg: Message) -> None:
        with self._lock:
            self.records.append(
                (round_idx, msg.kind.value, msg.sender, msg.receiver, msg.byte_size))

    def write(self, path) -> None:
        out = sorted(self.records)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(self.FIELDS) + "\n")
            for rec in out:
                fh.write(",".join(str(v) for v in rec) + "\n")


@dataclass
class FederationConfig:
    num_devices: int = 3
    aggregator_policy: str = "fixed"      # fixed | round_robin
    aggregator_id: int = 0
    ce_epochs: int = 100
    ce_batch: int = 512
    ce_patience: int = 10                 # epochs of sub-threshold improvement
    ce_min_improve: float = 1e-4
    co_epochs: int = 20
    co_batch: int = 64
    seed: int = 0
    threaded: bool = False

    def __post_init__(self):
        if self.num_devices < 2:
            raise InvalidConfig(f"need at least 2 devices, got {self.num_devices}")
        if self.aggregator_policy not in ("fixed", "round_robin"):
            raise InvalidConfig(f"unknown aggregator policy {self.aggregator_policy!r}")


@dataclass
class CeTrainHistory:
    epoch_loss: list[float] = field(default_factory=list)
    epochs_run: int = 0
    bytes_per_epoch: list[int] = field(default_factory=list)


FaultHook = Callable[[int, int, str], Iterable[int]]


class _DeviceWorker(threading.Thread):
    """One long-lived thread per device; receives work items via a queue."""

    def __init__(self, device: DeviceState):
        super().__init__(daemon=True)
        self.device = device
        self.inbox: queue.Queue = queue.Queue()
        self.outbox: queue.Queue = queue.Queue()

    def run(self):
        while True:
            item = self.inbox.get()
            if item[0] == "stop":
                return
            if item[0] == "embed":
                _, feats = item
                self.outbox.put(self.device.ce.forward(feats, "train"))
            elif item[0] == "update":
                _, grad, opt, progress = item
                _apply_ce_update(self.device, grad, opt, progress)
                self.outbox.put(True)


def _apply_ce_update(device: DeviceState, grad32: np.ndarray, opt: Adam, progress: float) -> None:
    zero_grads(device.ce)
    device.ce.backward(grad32)
    opt.step(progress)


def train_ce(
    devices: list[DeviceState],
    shared: Dataset,
    cfg: FederationConfig,
    contrastive_cfg: ContrastiveConfig = ContrastiveConfig(),
    optim_cfg: OptimizerConfig = OptimizerConfig(),
    meter: CommMeter | None = None,
    trace: TraceLog | None = None,
    fault_hook: FaultHook | None = None,
) -> CeTrainHistory:
    """Align the devices' embedding layers on the shared unlabeled pool.

    Every epoch all devices iterate the shared data in the same seeded
    shuffle so embeddings line up by sample. Per round, non-aggregator
    devices send their embeddings up, the aggregator computes the alignment
    loss and returns each device's embedding-level gradient, and every device
    (aggregator included) applies its own local update. Heads and tails are
    never touched.

    Training stops early once the epoch loss has failed to improve by
    ``cfg.ce_min_improve`` for ``cfg.ce_patience`` consecutive epochs.

    Raises:
        RoundAborted: a device dropped mid-round; no partial updates applied.
    """
    k = len(devices)
    if k != cfg.num_devices:
        raise InvalidConfig(f"config says {cfg.num_devices} devices, got {k}")
    meter = meter if meter is not None else CommMeter()
    trace = trace if trace is not None else TraceLog()
    rng = Rng(cfg.seed).child("ce-train")

    feats = [d.head_features(shared.x, shared.ids) for d in devices]
    for d in devices:
        d.tail.frozen = True
    opts = [Adam(d.ce, optim_cfg) for d in devices]

    n = len(shared)
    steps_per_epoch = math.ceil(n / cfg.ce_batch)
    total_steps = cfg.ce_epochs * steps_per_epoch

    workers: list[_DeviceWorker] | None = None
    if cfg.threaded:
        workers = [_DeviceWorker(d) for d in devices]
        for w in workers:
            w.start()

    history = CeTrainHistory()
    best = math.inf
    stall = 0
    step = 0
    round_idx = 0
    try:
        for epoch in range(cfg.ce_epochs):
            order = rng.child("order", epoch).permutation(n)
            losses = []
            epoch_bytes = 0
            for start in range(0, n, cfg.ce_batch):
                batch = order[start: start + cfg.ce_batch]
                agg = (cfg.aggregator_id if cfg.aggregator_policy == "fixed"
                       else round_idx % k)
                _check_faults(fault_hook, epoch, round_idx, "start")

                if workers is not None:
                    for w, f in zip(workers, feats):
                        w.inbox.put(("embed", f[batch]))
                    embeds = [w.outbox.get() for w in workers]
                else:
                    embeds = [d.ce.forward(f[batch], "train")
                              for d, f in zip(devices, feats)]

                for src in range(k):
                    if src == agg:
                        continue
                    msg = Message(MessageKind.EMBED_UP, src, agg, embeds[src])
                    meter.add("ce_training", msg.byte_size)
                    epoch_bytes += msg.byte_size
                    trace.add(round_idx, msg)

                loss, grads = consensus_loss(np.stack(embeds), contrastive_cfg)
                grads32 = grads.astype(np.float32)

                for dst in range(k):
                    if dst == agg:
                        continue
                    msg = Message(MessageKind.GRAD_DOWN, agg, dst, grads32[dst])
                    meter.add("ce_training", msg.byte_size)
                    epoch_bytes += msg.byte_size
                    trace.add(round_idx, msg)

                _check_faults(fault_hook, epoch, round_idx, "pre-update")

                step += 1
                progress = step / total_steps
                if workers is not None:
                    for i, w in enumerate(workers):
                        w.inbox.put(("update", grads32[i], opts[i], progress))
                    for w in workers:
                        w.outbox.get()
                else:
                    for i, d in enumerate(devices):
                        _apply_ce_update(d, grads32[i], opts[i], progress)

                losses.append(loss)
                round_idx += 1

            epoch_loss = float(np.mean(losses))
            history.epoch_loss.append(epoch_loss)
            history.bytes_per_epoch.append(epoch_bytes)
            history.epochs_run = epoch + 1
            meter.close_epoch(epoch_bytes)
            if epoch_loss < best - cfg.ce_min_improve:
                best = epoch_loss
                stall = 0
            else:
                stall += 1
                if stall >= cfg.ce_patience:
                    break
    finally:
        if workers is not None:
            for w in workers:
                w.inbox.put(("stop",))
            for w in workers:
                w.join()
    return history


def _check_faults(hook: FaultHook | None, epoch: int, round_idx: int, phase: str) -> None:
    if hook is None:
        return
    dropped = list(hook(epoch, round_idx, phase))
    if dropped:
        raise RoundAborted(
            f"device(s) {sorted(dropped)} dropped during round {round_idx} ({phase}); "
            "round discarded with no partial updates")


def train_co_local(
    device: DeviceState,
    shared: Dataset,
    cfg: FederationConfig,
    distill_cfg: DistillConfig = DistillConfig(),
    optim_cfg: OptimizerConfig = OptimizerConfig(),
    keep_ids: np.ndarray | None = None,
) -> list[float]:
    """Distill the device's own tail into its cooperative output head.

    Entirely local: embeddings of the shared pool (frozen embedding layer,
    eval mode) are the student inputs, the device's own tail logits are the
    teacher. Teacher logits are recomputed in eval mode each epoch; the tail
    and embedding layer are frozen so they never change. ``keep_ids``
    restricts training to a subset of the shared pool (analysis harness).

    Returns the per-epoch mean loss curve.
    """
    rng = Rng(cfg.seed).child("co-train", device.device_id)
    device.tail.frozen = True
    device.ce.frozen = True

    mask = np.arange(len(shared))
    if keep_ids is not None:
        keep = set(int(i) for i in keep_ids)
        mask = np.array([i for i, sid in enumerate(shared.ids) if int(sid) in keep],
                        dtype=np.int64)
        if len(mask) == 0:
            raise InvalidConfig("shared-pool filter removed every sample")
    ids = shared.ids[mask]
    feats = device.head_features(None if shared.x is None else shared.x[mask], ids)
    z = device.embed_ids(ids, None if shared.x is None else shared.x[mask]).astype(np.float32)

    opt = Adam(device.co, optim_cfg)
    n = len(ids)
    steps_per_epoch = math.ceil(n / cfg.co_batch)
    total_steps = cfg.co_epochs * steps_per_epoch
    curve = []
    step = 0
    for epoch in range(cfg.co_epochs):
        teacher = device.solo_predict(feats, mode="eval")
        order = rng.child("order", epoch).permutation(n)
        losses = []
        for start in range(0, n, cfg.co_batch):
            batch = order[start: start + cfg.co_batch]
            student = device.co.forward(z[batch], "train")
            loss, grad = distill_loss(student, teacher[batch], distill_cfg)
            zero_grads(device.co)
            device.co.backward(grad.astype(np.float32))
            step += 1
            opt.step(step / total_steps)
            losses.append(loss / len(batch))
        curve.append(float(np.mean(losses)))
    return curve


def federated_infer(
    origin: DeviceState,
    sample_x: np.ndarray | None,
    devices: list[DeviceState],
    rule,
    true_label: int | None = None,
    sample_id: int | None = None,
    meter: CommMeter | None = None,
    trace: TraceLog | None = None,
    sample_index: int = 0,
) -> tuple[int, np.ndarray, int]:
    """One cooperative prediction: the origin embeds its private input, shares
    the embedding, and collects every device's logits.

    Returns ``(label, per_device_logits, bytes_moved)`` where bytes cover the
    K-1 outbound embeddings and K-1 returned logits vectors; with a single
    device this degenerates to solo inference at zero bytes.
    """
    from .ensemble import apply  # local import to avoid a cycle

    x = None if sample_x is None else np.atleast_2d(sample_x)
    ids = None if sample_id is None else np.array([sample_id])
    if origin.embedding_override is not None and ids is not None:
        z = origin.embed_ids(ids)
    else:
        z = origin.embed(origin.head_features(x, ids), mode="eval")
    z32 = z.astype(np.float32)

    logits = np.zeros((len(devices), origin.num_classes))
    total = 0
    for pos, dev in enumerate(devices):
        if dev.device_id == origin.device_id:
            logits[pos] = dev.co_predict(z32, mode="eval")[0]
            continue
        share = Message(MessageKind.EMBED_SHARE, origin.device_id, dev.device_id, z32[0])
        out = dev.co_predict(z32, mode="eval")[0]
        ret = Message(MessageKind.LOGITS_RETURN, dev.device_id, origin.device_id,
                      out.astype(np.float32))
        logits[pos] = out
        total += share.byte_size + ret.byte_size
        if meter is not None:
            meter.add("inference", share.byte_size + ret.byte_size)
        if trace is not None:
            trace.add(sample_index, share)
            trace.add(sample_index, ret)
    label, _ = apply(rule, logits, true_label=true_label, sample_index=sample_index)
    return label, logits, total


def inference_bytes(num_devices: int, embed_dim: int, num_classes: int) -> int:
    """Closed-form per-sample inference traffic."""
    return (num_devices - 1) * (embed_dim + num_classes) * 4


def ce_epoch_bytes(num_devices: int, shared_size: int, embed_dim: int) -> int:
    """Closed-form alignment-training traffic for one epoch."""
    return 2 * (num_devices - 1) * shared_size * embed_dim * 4


def idealize_consensus(devices: list[DeviceState], datasets: Iterable[Dataset],
                       ) -> dict[int, np.ndarray]:
    """Replace every device's embedding with the across-device mean, per sample.

    Computes the mean eval-mode embedding of each sample in the given
    datasets and installs it as an override on every device, simulating a
    perfectly unified embedding space for both training and inference.

    Returns the id -> embedding table.
    """
    table: dict[int, np.ndarray] = {}
    for ds in datasets:
        stack = np.stack([
            d.embed(d.head_features(ds.x, ds.ids), mode="eval") for d in devices
        ])
        mean = stack.mean(axis=0).astype(np.float32)
        for i, sid in enumerate(ds.ids):
            table[int(sid)] = mean[i]
    for d in devices:
        d.embedding_override = table
    return table


def exclude_ood_for_co(device: DeviceState, shared: Dataset,
                       oracle_label_of: dict[int, int]) -> np.ndarray:
    """Shared-pool sample ids whose true label the device saw locally.

    Harness-only privilege: uses oracle labels the protocol itself never has.

    Raises:
        InvalidConfig: the filter would remove every sample.
    """
    seen = device.seen_labels
    kept = np.array([sid for sid in shared.ids if oracle_label_of[int(sid)] in seen],
                    dtype=np.int64)
    if len(kept) == 0:
        raise InvalidConfig(
            f"device {device.device_id} has no in-coverage shared samples")
    return kept
