"""Concrete per-device architectures: frozen feature heads, the local tail
classifier, the shared-space embedding block, and the cooperative output head,
bundled into a :class:`DeviceState`.

Heads are frozen by construction (synthetic projections hold plain arrays,
file-backed heads hold lookup tables), so no gradient can ever reach them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidConfig, ShapeError
from .nn import Dropout, LayerNorm, Linear, ReLU, ResidualBlock, Sequential
from .numerics import Rng

EMBED_DIM = 256


class HeadSource:
    """A frozen feature extractor addressed by sample.

    Two kinds exist:
      * ``synthetic_projection`` — a seeded random linear+ReLU map applied to
        raw inputs; distinct seeds give devices genuinely misaligned feature
        spaces.
      * ``file_backed`` — precomputed features keyed by sample id, as produced
        by an external encoder export.

    Either way, the same sample always yields the same feature vector.
    """

    def __init__(self, kind: str, feature_dim: int):
        self.kind = kind
        self.feature_dim = feature_dim

    def features(self, x_raw: np.ndarray | None, ids: np.ndarray | None) -> np.ndarray:
        raise NotImplementedError

    @property
    def supports_raw_input(self) -> bool:
        return False


class SyntheticHead(HeadSource):
    """Frozen random ``relu(x @ W + b)`` projection, seeded per device."""

    def __init__(self, input_dim: int, feature_dim: int, rng: Rng):
        super().__init__("synthetic_projection", feature_dim)
        bound = float(np.sqrt(6.0 / input_dim))
        self.w = rng.uniform(-bound, bound, (input_dim, feature_dim))
        self.b = rng.uniform(-0.1, 0.1, (feature_dim,))

    def features(self, x_raw, ids=None):
        if x_raw is None:
            raise InvalidConfig("synthetic head needs raw inputs")
        if x_raw.shape[-1] != self.w.shape[0]:
            raise ShapeError(f"head expects input dim {self.w.shape[0]}, got {x_raw.shape[-1]}")
        return np.maximum(x_raw.astype(np.float32) @ self.w + self.b, 0.0)

    @property
    def supports_raw_input(self):
        return True


class FileBackedHead(HeadSource):
    """Features precomputed by an external encoder, looked up by sample id."""

    def __init__(self, ids: np.ndarray, features: np.ndarray):
        if ids.shape[0] != features.shape[0]:
            raise ShapeError(f"{ids.shape[0]} ids but {features.shape[0]} feature rows")
        super().__init__("file_backed", int(features.shape[1]))
        self._row_of = {int(i): r for r, i in enumerate(ids)}
        self._features = np.ascontiguousarray(features, dtype=np.float32)

    def features(self, x_raw=None, ids=None):
        if ids is None:
            raise InvalidConfig("file-backed head needs sample ids")
        try:
            rows = np.array([self._row_of[int(i)] for i in ids], dtype=np.int64)
        except KeyError as e:
            raise InvalidConfig(f"sample id {e.args[0]} not present in feature file") from e
        return self._features[rows]


def make_tail(feature_dim: int, num_classes: int, rng: Rng,
              hidden: int = 1024, dropout: float = 0.3) -> Sequential:
    """Two-layer classifier head: 1024 hidden units, ReLU, dropout 0.3."""
    return Sequential([
        Linear(feature_dim, hidden, rng.child("fc1")),
        ReLU(),
        Dropout(dropout, rng.child("drop1")),
        Linear(hidden, num_classes, rng.child("fc2")),
    ])


def make_ce_layer(feature_dim: int, rng: Rng, hidden: int = 256,
                  dropout: float = 0.1, embed_dim: int = EMBED_DIM) -> ResidualBlock:
    """Embedding block: two FC+ReLU+dropout layers, a linear skip projection
    (identity when the dimensions already match), and a final layer norm."""
    inner = Sequential([
        Linear(feature_dim, hidden, rng.child("fc1")),
        ReLU(),
        Dropout(dropout, rng.child("drop1")),
        Linear(hidden, embed_dim, rng.child("fc2")),
        ReLU(),
        Dropout(dropout, rng.child("drop2")),
    ])
    projection = None if feature_dim == embed_dim else Linear(feature_dim, embed_dim, rng.child("proj"))
    return ResidualBlock(inner, projection, LayerNorm(embed_dim))


def make_co_layer(num_classes: int, rng: Rng, hidden: int = 512,
                  dropout: float = 0.3, embed_dim: int = EMBED_DIM) -> Sequential:
    """Cooperative output head over embeddings; in eval mode this is exactly
    ``W2 @ relu(W1 z + b1) + b2``."""
    return Sequential([
        Linear(embed_dim, hidden, rng.child("fc1")),
        ReLU(),
        Dropout(dropout, rng.child("drop1")),
        Linear(hidden, num_classes, rng.child("fc2")),
    ])


def co_weight_matrices(co: Sequential) -> tuple[np.ndarray, np.ndarray]:
    """The two linear maps of a cooperative output head, in order."""
    linears = [l for l in co.layers if isinstance(l, Linear)]
    if len(linears) != 2:
        raise InvalidConfig("cooperative output head must contain exactly two linear layers")
    return linears[0].w.value, linears[1].w.value


@dataclass
class ArchitectureConfig:
    num_classes: int = 10
    head_dim: int = 128
    tail_hidden: int = 1024
    tail_dropout: float = 0.3
    ce_hidden: int = 256
    ce_dropout: float = 0.1
    co_hidden: int = 512
    co_dropout: float = 0.3
    embed_dim: int = EMBED_DIM


@dataclass
class DeviceState:
    """Everything one device owns: frozen head, tail, embedding and output
    layers, its private dataset handle, and idealization overrides used by
    the analysis harness."""

    device_id: int
    head: HeadSource
    tail: Sequential
    ce: ResidualBlock
    co: Sequential
    num_classes: int
    local_ids: np.ndarray | None = None
    seen_labels: frozenset[int] = frozenset()
    embedding_override: dict[int, np.ndarray] | None = None
    co_override: Callable[[np.ndarray], np.ndarray] | None = None

    def head_features(self, x_raw: np.ndarray | None = None,
                      ids: np.ndarray | None = None) -> np.ndarray:
        return self.head.features(x_raw, ids)

    def embed(self, features: np.ndarray, mode: str = "eval") -> np.ndarray:
        """Map head features into the shared embedding space."""
        if features.shape[-1] != self.head.feature_dim:
            raise ShapeError(
                f"device {self.device_id} expects feature dim {self.head.feature_dim}, "
                f"got {features.shape[-1]}")
        return self.ce.forward(features, mode)

    def embed_ids(self, ids: np.ndarray, x_raw: np.ndarray | None = None,
                  mode: str = "eval") -> np.ndarray:
        """Embed identified samples, honoring an idealization override."""
        if self.embedding_override is not None:
            return np.stack([self.embedding_override[int(i)] for i in ids])
        return self.embed(self.head_features(x_raw, ids), mode)

    def co_predict(self, z: np.ndarray, mode: str = "eval") -> np.ndarray:
        """Class logits from shared-space embeddings."""
        if self.co_override is not None:
            return self.co_override(z)
        if z.shape[-1] != EMBED_DIM:
            raise ShapeError(f"embedding dim must be {EMBED_DIM}, got {z.shape[-1]}")
        return self.co.forward(z, mode)

    def solo_predict(self, features: np.ndarray, mode: str = "eval") -> np.ndarray:
        """Class logits from the device's own pretrained tail."""
        return self.tail.forward(features, mode)


def build_device(device_id: int, input_dim: int, arch: ArchitectureConfig,
                 rng: Rng, head: HeadSource | None = None) -> DeviceState:
    """Assemble a device with per-component seeded substreams."""
    droot = rng.child("device", device_id)
    if head is None:
        head = SyntheticHead(input_dim, arch.head_dim, droot.child("head"))
    tail = make_tail(head.feature_dim, arch.num_classes, droot.child("tail"),
                     hidden=arch.tail_hidden, dropout=arch.tail_dropout)
    ce = make_ce_layer(head.feature_dim, droot.child("ce"),
                       hidden=arch.ce_hidden, dropout=arch.ce_dropout,
                       embed_dim=arch.embed_dim)
    co = make_co_layer(arch.num_classes, droot.child("co"),
                       hidden=arch.co_hidden, dropout=arch.co_dropout,
                       embed_dim=arch.embed_dim)
    return DeviceState(device_id=device_id, head=head, tail=tail, ce=ce, co=co,
                       num_classes=arch.num_classes)
