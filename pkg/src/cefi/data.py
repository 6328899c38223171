"""Datasets, synthetic task generation, non-IID partitioners, the shared
unlabeled holdout, and the binary feature-file / checkpoint-container formats.

Feature file layout (little-endian throughout):

    magic   4 bytes  b"CEFI"
    version u16      1
    dtype   u8       0 = float32
    flags   u8       bit0: labels present, bit1: section container (below)
    rows    u64
    cols    u64
    data    rows*cols float32, row-major
    ids     rows u32
    labels  rows u32            (only when flags bit0 is set)

Checkpoint containers reuse the same header with flags bit1 set; instead of
one matrix they carry a JSON metadata blob and a table of named float32
sections:

    meta_len   u32,  meta utf-8 JSON bytes
    n_sections u64
    per section: name_len u16, name utf-8, rows u64, cols u64, data float32
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    FormatError,
    InvalidConfig,
    LabelUnavailable,
    PartitionFailed,
)
from .numerics import Rng

MAGIC = b"CEFI"
VERSION = 1
FLAG_LABELS = 0x01
FLAG_SECTIONS = 0x02

MANUAL_SCHEMES = ("mild", "moderate", "skewed", "disjoint")


@dataclass(frozen=True)
class Dataset:
    """An id-addressed sample collection.

    ``x`` holds raw input features (may be None for purely file-backed runs);
    ``labels`` is None for shared unlabeled data, and any attempt to train
    against them must go through :meth:`require_labels`.
    """

    ids: np.ndarray
    x: np.ndarray | None
    labels: np.ndarray | None
    num_classes: int

    def __post_init__(self):
        if len(np.unique(self.ids)) != len(self.ids):
            raise InvalidConfig("dataset ids must be unique")
        if self.labels is not None and len(self.labels):
            if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
                raise InvalidConfig("labels must lie in [0, num_classes)")

    def __len__(self):
        return len(self.ids)

    def require_labels(self) -> np.ndarray:
        if self.labels is None:
            raise LabelUnavailable("this dataset intentionally carries no labels")
        return self.labels

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(
            ids=self.ids[idx],
            x=None if self.x is None else self.x[idx],
            labels=None if self.labels is None else self.labels[idx],
            num_classes=self.num_classes,
        )

    def without_labels(self) -> "Dataset":
        return replace(self, labels=None)

    def label_of(self) -> dict[int, int]:
        """Oracle id -> label map; for harness use on labeled sets only."""
        return {int(i): int(l) for i, l in zip(self.ids, self.require_labels())}


@dataclass(frozen=True)
class SyntheticTaskConfig:
    num_classes: int = 10
    input_dim: int = 64
    class_separation: float = 4.0
    within_class_std: float = 1.0
    train_per_class: int = 500
    test_per_class: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2 or self.input_dim < 1:
            raise InvalidConfig("need num_classes >= 2 and input_dim >= 1")
        if self.class_separation <= 0 or self.within_class_std <= 0:
            raise InvalidConfig("separation and stddev must be positive")


def synth_generate(cfg: SyntheticTaskConfig) -> tuple[Dataset, Dataset]:
    """Gaussian-mixture classification task with exactly balanced labels.

    Class means are random directions scaled to ``class_separation``; samples
    add isotropic noise of ``within_class_std``. Returns (train, test) with
    globally unique ids and seeded, order-shuffled rows.
    """
    rng = Rng(cfg.seed).child("synth")
    means = rng.normal((cfg.num_classes, cfg.input_dim), dtype=np.float64)
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    means *= cfg.class_separation

    def draw(per_class: int, label_rng: Rng) -> tuple[np.ndarray, np.ndarray]:
        xs, ys = [], []
        for c in range(cfg.num_classes):
            noise = label_rng.child("class", c).normal((per_class, cfg.input_dim), dtype=np.float64)
            xs.append(means[c] + cfg.within_class_std * noise)
            ys.append(np.full(per_class, c, dtype=np.int64))
        x = np.concatenate(xs).astype(np.float32)
        y = np.concatenate(ys)
        order = label_rng.child("order").permutation(len(y))
        return x[order], y[order]

    x_tr, y_tr = draw(cfg.train_per_class, rng.child("train"))
    x_te, y_te = draw(cfg.test_per_class, rng.child("test"))
    n_tr = len(y_tr)
    train = Dataset(np.arange(n_tr, dtype=np.int64), x_tr, y_tr, cfg.num_classes)
    test = Dataset(np.arange(n_tr, n_tr + len(y_te), dtype=np.int64), x_te, y_te, cfg.num_classes)
    return train, test


def holdout_shared(dataset: Dataset, fraction: float = 0.2, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Split off an unlabeled shared pool.

    Returns ``(local_pool, shared)`` where the shared part has its labels
    removed. The split is a seeded permutation: last ``fraction`` of the
    shuffled order becomes shared.
    """
    if not (0.0 < fraction < 1.0):
        raise InvalidConfig(f"fraction must be in (0, 1), got {fraction}")
    n = len(dataset)
    n_shared = int(round(n * fraction))
    if n_shared < 1 or n_shared >= n:
        raise InvalidConfig(f"fraction {fraction} leaves an empty split for {n} samples")
    order = Rng(seed).child("holdout").permutation(n)
    local = dataset.subset(np.sort(order[: n - n_shared]))
    shared = dataset.subset(np.sort(order[n - n_shared:])).without_labels()
    return local, shared


def _largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation of ``total`` by proportions, remainders to the
    largest fractional parts (ties go to the lower index)."""
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        frac = raw - counts
        order = np.lexsort((np.arange(len(frac)), -frac))
        counts[order[:short]] += 1
    return counts


def _manual_proportions(scheme: str, num_classes: int) -> np.ndarray:
    """Per-class device shares for the canonical 3-device layouts."""
    k = 3
    p = np.zeros((num_classes, k))
    if scheme == "mild":
        # device d is missing label d (for the first K labels); everything
        # else is split evenly among its holders.
        for c in range(num_classes):
            holders = [d for d in range(k) if c >= k or d != c]
            p[c, holders] = 1.0 / len(holders)
    elif scheme == "moderate":
        for c in range(num_classes):
            holders = [c % k, (c + 1) % k]
            p[c, holders] = 0.5
    elif scheme == "skewed":
        for c in range(num_classes):
            if c < 6:
                p[c, 0] = 0.9
                p[c, (c % 2) + 1] = 0.1
            else:
                p[c, :] = 1.0 / k
    elif scheme == "disjoint":
        owner = {**{c: 0 for c in range(4)}, **{c: 1 for c in (4, 5, 6)},
                 **{c: 2 for c in (7, 8, 9)}}
        for c in range(num_classes):
            p[c, owner[c % 10]] = 1.0
    else:
        raise InvalidConfig(f"unknown manual scheme {scheme!r}")
    return p


def partition_manual(local_pool: Dataset, scheme: str, num_devices: int = 3,
                     seed: int = 0) -> list[Dataset]:
    """Split a labeled pool across 3 devices with controlled label overlap.

    Schemes: ``mild`` (each device misses one label), ``moderate`` (each label
    on two of three devices), ``skewed`` (labels 0-5 concentrated on device 0
    with thin slices elsewhere), ``disjoint`` (0-3 / 4-6 / 7-9). Within a
    class, samples are dealt to the assigned devices uniformly at random.
    """
    if scheme not in MANUAL_SCHEMES:
        raise InvalidConfig(f"scheme must be one of {MANUAL_SCHEMES}, got {scheme!r}")
    if num_devices != 3:
        raise InvalidConfig(
            f"manual schemes are defined for 3 devices (got {num_devices}); "
            "use the dirichlet partitioner for other device counts")
    labels = local_pool.require_labels()
    props = _manual_proportions(scheme, local_pool.num_classes)
    rng = Rng(seed).child("partition", scheme)
    device_rows: list[list[np.ndarray]] = [[] for _ in range(num_devices)]
    for c in range(local_pool.num_classes):
        rows = np.flatnonzero(labels == c)
        rows = rows[rng.child("class", c).permutation(len(rows))]
        counts = _largest_remainder(props[c], len(rows))
        at = 0
        for d in range(num_devices):
            if counts[d]:
                device_rows[d].append(rows[at: at + counts[d]])
            at += counts[d]
    out = []
    for d in range(num_devices):
        rows = np.sort(np.concatenate(device_rows[d])) if device_rows[d] else np.array([], dtype=np.int64)
        if len(rows) == 0:
            raise PartitionFailed(f"device {d} received no samples under scheme {scheme}")
        out.append(local_pool.subset(rows))
    return out


def partition_dirichlet(local_pool: Dataset, alpha: float, num_devices: int,
                        seed: int = 0, max_redraws: int = 100) -> list[Dataset]:
    """Per-class device proportions drawn from Dirichlet(alpha * 1_K).

    Samples are allocated by largest-remainder rounding. If any device ends
    up empty the whole draw is retried, up to ``max_redraws`` times.
    """
    if alpha <= 0:
        raise InvalidConfig(f"alpha must be > 0, got {alpha}")
    if num_devices < 2:
        raise InvalidConfig(f"need at least 2 devices, got {num_devices}")
    labels = local_pool.require_labels()
    base = Rng(seed).child("dirichlet")
    for attempt in range(max_redraws):
        rng = base.child("attempt", attempt)
        device_rows: list[list[np.ndarray]] = [[] for _ in range(num_devices)]
        for c in range(local_pool.num_classes):
            rows = np.flatnonzero(labels == c)
            rows = rows[rng.child("class", c).permutation(len(rows))]
            props = rng.child("draw", c).generator.dirichlet(np.full(num_devices, alpha))
            counts = _largest_remainder(props, len(rows))
            at = 0
            for d in range(num_devices):
                if counts[d]:
                    device_rows[d].append(rows[at: at + counts[d]])
                at += counts[d]
        if all(device_rows[d] for d in range(num_devices)):
            return [local_pool.subset(np.sort(np.concatenate(device_rows[d])))
                    for d in range(num_devices)]
    raise PartitionFailed(
        f"no Dirichlet draw left every device nonempty after {max_redraws} attempts")


# ---------------------------------------------------------------------------
# Binary formats
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sHBBQQ")


def write_features(path, features: np.ndarray, ids: np.ndarray,
                   labels: np.ndarray | None = None) -> None:
    """Write a feature matrix with ids (and optional labels) in the exchange
    format described in the module docstring. Round trips are bit-exact."""
    f = np.ascontiguousarray(features, dtype="<f4")
    if f.ndim != 2:
        raise InvalidConfig(f"features must be 2-D, got shape {f.shape}")
    rows, cols = f.shape
    ids_arr = np.ascontiguousarray(ids, dtype="<u4")
    if ids_arr.shape != (rows,):
        raise InvalidConfig(f"need {rows} ids, got shape {ids_arr.shape}")
    flags = 0
    blobs = [f.tobytes(), ids_arr.tobytes()]
    if labels is not None:
        lab = np.ascontiguousarray(labels, dtype="<u4")
        if lab.shape != (rows,):
            raise InvalidConfig(f"need {rows} labels, got shape {lab.shape}")
        flags |= FLAG_LABELS
        blobs.append(lab.tobytes())
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, 0, flags, rows, cols))
        for b in blobs:
            fh.write(b)


def _read_exact(fh, n: int, offset: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file while reading {what}", offset + len(buf))
    return buf


def read_features(path) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Read a feature file; returns ``(features, ids, labels_or_None)``.

    Raises:
        FormatError: wrong magic/version/dtype or truncation, with the byte
            offset where the problem was found.
    """
    with open(path, "rb") as fh:
        head = _read_exact(fh, _HEADER.size, 0, "header")
        magic, version, dtype, flags, rows, cols = _HEADER.unpack(head)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}", 0)
        if version != VERSION:
            raise FormatError(f"unsupported version {version}", 4)
        if dtype != 0:
            raise FormatError(f"unsupported dtype code {dtype}", 6)
        if flags & FLAG_SECTIONS:
            raise FormatError("section container given where a feature file was expected", 7)
        offset = _HEADER.size
        data = _read_exact(fh, rows * cols * 4, offset, "feature data")
        offset += rows * cols * 4
        features = np.frombuffer(data, dtype="<f4").reshape(rows, cols).copy()
        ids = np.frombuffer(_read_exact(fh, rows * 4, offset, "ids"), dtype="<u4").astype(np.int64)
        offset += rows * 4
        labels = None
        if flags & FLAG_LABELS:
            labels = np.frombuffer(_read_exact(fh, rows * 4, offset, "labels"),
                                   dtype="<u4").astype(np.int64)
    return features, ids, labels


def write_container(path, sections: dict[str, np.ndarray], meta: dict) -> None:
    """Write named float32 blobs plus JSON metadata (checkpoint format)."""
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, 0, FLAG_SECTIONS, 0, 0))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<Q", len(sections)))
        for name, arr in sections.items():
            a = np.ascontiguousarray(arr, dtype="<f4")
            if a.ndim == 1:
                a = a[None, :]
            if a.ndim != 2:
                raise InvalidConfig(f"section {name!r} must be 1-D or 2-D")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<QQ", a.shape[0], a.shape[1]))
            fh.write(a.tobytes())


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint container; returns ``(sections, meta)``."""
    with open(path, "rb") as fh:
        head = _read_exact(fh, _HEADER.size, 0, "header")
        magic, version, dtype, flags, _, _ = _HEADER.unpack(head)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}", 0)
        if version != VERSION:
            raise FormatError(f"unsupported version {version}", 4)
        if not flags & FLAG_SECTIONS:
            raise FormatError("feature file given where a section container was expected", 7)
        offset = _HEADER.size
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4, offset, "meta length"))
        offset += 4
        meta = json.loads(_read_exact(fh, meta_len, offset, "meta").decode("utf-8"))
        offset += meta_len
        (n_sections,) = struct.unpack("<Q", _read_exact(fh, 8, offset, "section count"))
        offset += 8
        sections = {}
        for _ in range(n_sections):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, offset, "section name length"))
            offset += 2
            name = _read_exact(fh, name_len, offset, "section name").decode("utf-8")
            offset += name_len
            rows, cols = struct.unpack("<QQ", _read_exact(fh, 16, offset, "section shape"))
            offset += 16
            data = _read_exact(fh, rows * cols * 4, offset, f"section {name!r}")
            offset += rows * cols * 4
            sections[name] = np.frombuffer(data, dtype="<f4").reshape(rows, cols).copy()
    return sections, meta


def label_skew(datasets: list[Dataset]) -> float:
    """Mean over devices of the max class share — a simple skew measure."""
    shares = []
    for ds in datasets:
        counts = np.bincount(ds.require_labels(), minlength=ds.num_classes)
        shares.append(counts.max() / max(1, counts.sum()))
    return float(np.mean(shares))
