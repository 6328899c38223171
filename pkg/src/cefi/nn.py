"""Minimal dense layers with hand-derived backward passes, Adam with a
cosine-annealed learning rate, dropout, layer normalization, residual blocks,
parameter freezing, and a supervised training loop with early stopping.

Parameters are stored in float32 (float64 is available for gradient
verification). A frozen layer still propagates input gradients so upstream
layers can learn, but its parameter gradients are pinned to exactly zero and
the optimizer never touches it, which keeps frozen bytes bit-identical across
any number of steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfig, ProtocolError, ShapeError
from .losses import cross_entropy
from .numerics import Rng


class Param:
    """A trainable array plus its gradient buffer.

    ``decay`` marks whether weight decay applies; biases and layernorm
    scale/shift are excluded by convention.
    """

    __slots__ = ("name", "value", "grad", "decay")

    def __init__(self, name: str, value: np.ndarray, decay: bool):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.decay = decay


class Layer:
    """Base layer: subclasses implement _forward/_backward on cached state."""

    kind = "layer"

    def __init__(self):
        self.frozen = False
        self._cache = None

    def params(self) -> list[Param]:
        return []

    def forward(self, x: np.ndarray, mode: str = "eval") -> np.ndarray:
        if mode not in ("train", "eval"):
            raise InvalidConfig(f"mode must be 'train' or 'eval', got {mode!r}")
        out, cache = self._forward(x, mode)
        self._cache = cache
        return out

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise ProtocolError(f"{self.kind}: backward called before forward")
        gin = self._backward(grad, self._cache)
        if self.frozen:
            for p in self.params():
                p.grad[...] = 0.0
        self._cache = None
        return gin

    def _forward(self, x, mode):
        raise NotImplementedError

    def _backward(self, grad, cache):
        raise NotImplementedError


class Linear(Layer):
    """Affine map ``x @ W + b`` with Kaiming-uniform fan-in init."""

    kind = "linear"

    def __init__(self, in_dim: int, out_dim: int, rng: Rng, dtype=np.float32):
        super().__init__()
        bound = math.sqrt(6.0 / in_dim)
        self.w = Param("w", rng.uniform(-bound, bound, (in_dim, out_dim), dtype=dtype), decay=True)
        self.b = Param("b", np.zeros(out_dim, dtype=dtype), decay=False)

    def params(self):
        return [self.w, self.b]

    def _forward(self, x, mode):
        if x.shape[-1] != self.w.value.shape[0]:
            raise ShapeError(
                f"linear expects input dim {self.w.value.shape[0]}, got {x.shape[-1]}")
        return x @ self.w.value + self.b.value, x

    def _backward(self, grad, x):
        self.w.grad[...] = x.T @ grad
        self.b.grad[...] = grad.sum(axis=0)
        return grad @ self.w.value.T


class ReLU(Layer):
    kind = "relu"

    def _forward(self, x, mode):
        out = np.maximum(x, 0)
        return out, (x > 0)

    def _backward(self, grad, mask):
        return grad * mask


class Dropout(Layer):
    """Inverted dropout: train-mode activations are scaled by 1/(1-p) so the
    eval pass is the identity. Masks come from this layer's own seeded stream,
    one draw per train-mode forward call."""

    kind = "dropout"

    def __init__(self, p: float, rng: Rng):
        super().__init__()
        if not (0.0 <= p < 1.0):
            raise InvalidConfig(f"dropout rate must be in [0, 1), got {p}")
        self.p = p
        self._rng = rng

    def _forward(self, x, mode):
        if mode == "eval" or self.p == 0.0:
            return x, 1.0
        keep = (self._rng.generator.random(x.shape) >= self.p)
        mask = keep.astype(x.dtype) / np.asarray(1.0 - self.p, dtype=x.dtype)
        return x * mask, mask

    def _backward(self, grad, mask):
        return grad * mask


class LayerNorm(Layer):
    """Per-row normalization with learned scale/shift, epsilon 1e-5."""

    kind = "layernorm"
    eps = 1e-5

    def __init__(self, dim: int, dtype=np.float32):
        super().__init__()
        self.gamma = Param("gamma", np.ones(dim, dtype=dtype), decay=False)
        self.beta = Param("beta", np.zeros(dim, dtype=dtype), decay=False)

    def params(self):
        return [self.gamma, self.beta]

    def _forward(self, x, mode):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        return xhat * self.gamma.value + self.beta.value, (xhat, inv)

    def _backward(self, grad, cache):
        xhat, inv = cache
        d = xhat.shape[-1]
        self.gamma.grad[...] = (grad * xhat).sum(axis=0)
        self.beta.grad[...] = grad.sum(axis=0)
        gx = grad * self.gamma.value
        return inv * (gx - gx.mean(axis=-1, keepdims=True)
                      - xhat * (gx * xhat).mean(axis=-1, keepdims=True))


class Sequential(Layer):
    """A chain of layers executed in order; freezing the chain freezes all."""

    kind = "sequential"

    def __init__(self, layers: list[Layer]):
        super().__init__()
        self.layers = layers

    @property
    def frozen(self):
        return all(l.frozen for l in self.layers)

    @frozen.setter
    def frozen(self, value: bool):
        for l in getattr(self, "layers", []):
            l.frozen = value

    def params(self):
        return [p for l in self.layers for p in l.params()]

    def _forward(self, x, mode):
        for l in self.layers:
            x = l.forward(x, mode)
        return x, True

    def _backward(self, grad, _cache):
        for l in reversed(self.layers):
            grad = l.backward(grad)
        return grad


class ResidualBlock(Layer):
    """``LayerNorm(project(x) + inner(x))`` with an optional projection.

    When the input dimension already matches the block width the projection
    is the identity and carries no parameters.
    """

    kind = "residual-block"

    def __init__(self, inner: Sequential, projection: Linear | None, norm: LayerNorm):
        super().__init__()
        self.inner = inner
        self.projection = projection
        self.norm = norm

    @property
    def frozen(self):
        parts = [self.inner.frozen, self.norm.frozen]
        if self.projection is not None:
            parts.append(self.projection.frozen)
        return all(parts)

    @frozen.setter
    def frozen(self, value: bool):
        if not hasattr(self, "inner"):
            return
        self.inner.frozen = value
        self.norm.frozen = value
        if self.projection is not None:
            self.projection.frozen = value

    def params(self):
        ps = self.inner.params()
        if self.projection is not None:
            ps = self.projection.params() + ps
        return ps + self.norm.params()

    def _forward(self, x, mode):
        skip = self.projection.forward(x, mode) if self.projection is not None else x
        deep = self.inner.forward(x, mode)
        if skip.shape != deep.shape:
            raise ShapeError(f"skip path {skip.shape} != inner path {deep.shape}")
        return self.norm.forward(skip + deep, mode), True

    def _backward(self, grad, _cache):
        gsum = self.norm.backward(grad)
        gin = self.inner.backward(gsum)
        if self.projection is not None:
            gin = gin + self.projection.backward(gsum)
        else:
            gin = gin + gsum
        return gin


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-3
    lr_floor: float = 1e-5
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def cosine_lr(cfg: OptimizerConfig, progress: float) -> float:
    """Cosine anneal from the initial rate to the floor as progress goes 0->1."""
    p = min(max(progress, 0.0), 1.0)
    return cfg.lr_floor + 0.5 * (cfg.learning_rate - cfg.lr_floor) * (1.0 + math.cos(math.pi * p))


class Adam:
    """Adam over an explicit parameter list, honoring freeze and decay flags."""

    def __init__(self, stack: Layer, cfg: OptimizerConfig = OptimizerConfig()):
        self.cfg = cfg
        self.stack = stack
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}
        self._t = 0

    def _slots(self, p: Param):
        key = id(p)
        if key not in self._m:
            self._m[key] = np.zeros_like(p.value)
            self._v[key] = np.zeros_like(p.value)
        return self._m[key], self._v[key]

    def step(self, progress: float) -> float:
        """Apply one update at the given schedule progress; returns the LR used."""
        lr = cosine_lr(self.cfg, progress)
        self._t += 1
        b1, b2, eps = self.cfg.beta1, self.cfg.beta2, self.cfg.eps
        bc1 = 1.0 - b1 ** self._t
        bc2 = 1.0 - b2 ** self._t
        for layer, p in _iter_params(self.stack):
            if layer.frozen:
                continue
            g = p.grad
            if self.cfg.weight_decay and p.decay:
                g = g + self.cfg.weight_decay * p.value
            m, v = self._slots(p)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            p.value -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.value.dtype)
        return lr


def _iter_params(layer: Layer):
    """Yield (owning leaf layer, param) pairs, respecting leaf freeze flags."""
    if isinstance(layer, Sequential):
        for sub in layer.layers:
            yield from _iter_params(sub)
    elif isinstance(layer, ResidualBlock):
        if layer.projection is not None:
            yield from _iter_params(layer.projection)
        yield from _iter_params(layer.inner)
        yield from _iter_params(layer.norm)
    else:
        for p in layer.params():
            yield layer, p


def zero_grads(stack: Layer) -> None:
    for _, p in _iter_params(stack):
        p.grad[...] = 0.0


def param_snapshot(stack: Layer) -> list[bytes]:
    """Byte-exact snapshot of every parameter, for freeze-contract checks."""
    return [p.value.tobytes() for _, p in _iter_params(stack)]


def named_params(stack: Layer, prefix: str) -> dict[str, np.ndarray]:
    """Stable ``prefix/index/name -> value`` mapping for checkpointing."""
    out = {}
    for i, (_, p) in enumerate(_iter_params(stack)):
        out[f"{prefix}/{i}/{p.name}"] = p.value
    return out


def load_named_params(stack: Layer, prefix: str, sections: dict[str, np.ndarray]) -> None:
    for i, (_, p) in enumerate(_iter_params(stack)):
        key = f"{prefix}/{i}/{p.name}"
        if key not in sections:
            raise ShapeError(f"checkpoint is missing section {key}")
        arr = sections[key].reshape(p.value.shape).astype(p.value.dtype)
        p.value[...] = arr


@dataclass
class TrainLoopConfig:
    batch_size: int = 64
    max_epochs: int = 20
    early_stop_patience: int = 5
    validation_fraction: float = 0.2
    rng_seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.validation_fraction < 1.0):
            raise InvalidConfig(
                f"validation_fraction must be in (0, 1), got {self.validation_fraction}")
        if self.early_stop_patience < 1:
            raise InvalidConfig(f"patience must be >= 1, got {self.early_stop_patience}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise InvalidConfig("batch_size and max_epochs must be >= 1")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    stopped_epoch: int = 0


def train_supervised(
    stack: Layer,
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainLoopConfig,
    optim_cfg: OptimizerConfig = OptimizerConfig(),
) -> TrainHistory:
    """Cross-entropy training with a held-out validation tail and early stop.

    The index order is shuffled once under the run seed; the last
    ``validation_fraction`` of that order becomes the validation split.
    Training stops when validation loss has not improved for
    ``early_stop_patience`` consecutive epochs. The last partial batch of
    each epoch is used, not dropped.
    """
    rng = Rng(cfg.rng_seed).child("train-loop")
    n = x.shape[0]
    order = rng.permutation(n)
    n_val = max(1, int(round(n * cfg.validation_fraction)))
    if n_val >= n:
        raise InvalidConfig("validation split leaves no training data")
    train_idx, val_idx = order[: n - n_val], order[n - n_val:]

    opt = Adam(stack, optim_cfg)
    history = TrainHistory()
    steps_per_epoch = math.ceil(len(train_idx) / cfg.batch_size)
    total_steps = cfg.max_epochs * steps_per_epoch
    best = math.inf
    stall = 0
    step = 0
    for epoch in range(cfg.max_epochs):
        perm = rng.child("epoch", epoch).permutation(len(train_idx))
        epoch_idx = train_idx[perm]
        losses = []
        for start in range(0, len(epoch_idx), cfg.batch_size):
            batch = epoch_idx[start: start + cfg.batch_size]
            logits = stack.forward(x[batch], mode="train")
            loss, grad = cross_entropy(logits, y[batch])
            zero_grads(stack)
            stack.backward(grad.astype(logits.dtype))
            step += 1
            opt.step(step / total_steps)
            losses.append(loss)
        history.train_loss.append(float(np.mean(losses)))

        val_logits = stack.forward(x[val_idx], mode="eval")
        val_loss, _ = cross_entropy(val_logits, y[val_idx])
        history.val_loss.append(val_loss)
        history.stopped_epoch = epoch + 1
        if val_loss < best - 1e-12:
            best = val_loss
            stall = 0
        else:
            stall += 1
            if stall >= cfg.early_stop_patience:
                break
    return history
