"""Dense numeric kernels: stable softmax / log-sum-exp, cosine similarity,
spectral norm, seeded RNG streams, and finite-difference gradient checking.

Conventions used throughout the engine:

- Matrices are C-contiguous ``numpy`` arrays. Long-lived values (parameters,
  features, embeddings) are stored as ``float32``; reductions that feed
  losses or norms accumulate in ``float64`` to keep denominators stable.
- All public operations reject non-finite input and never return NaN/Inf.
- Randomness always flows through :class:`Rng` (PCG64), never the global
  numpy state, so identical seeds give identical streams on every platform.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .errors import DegenerateVector, InvalidInput

_NORM_EPS = 1e-30


def _require_finite(a: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(a)):
        raise InvalidInput(f"{name} contains NaN or Inf")


class Rng:
    """Deterministic random stream backed by numpy's PCG64.

    A stream is identified by a 64-bit seed plus a tuple of derivation keys.
    ``child(*labels)`` derives an independent substream whose identity depends
    only on the labels (strings are hashed with CRC32), so the same
    (seed, label path) always reproduces the same draws.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._key = _key
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=_key)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def child(self, *labels: str | int) -> "Rng":
        """Derive an independent, reproducible substream."""
        key = list(self._key)
        for label in labels:
            if isinstance(label, str):
                key.append(zlib.crc32(label.encode("utf-8")))
            else:
                key.append(int(label) & 0xFFFFFFFF)
        return Rng(self.seed, tuple(key))

    def uniform(self, low: float, high: float, shape, dtype=np.float32) -> np.ndarray:
        return self.generator.uniform(low, high, size=shape).astype(dtype)

    def normal(self, shape, dtype=np.float32) -> np.ndarray:
        return self.generator.standard_normal(size=shape, dtype=np.float64).astype(dtype)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


def softmax(m: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Temperature-scaled softmax over the last axis, stable for any finite input.

    The running maximum is subtracted before exponentiation, so logits as
    large as +-1e4 neither overflow nor produce NaN. Output rows sum to 1.

    Args:
        m: logits, shape (C,) or (N, C).
        temperature: positive softening factor; entries are divided by it.

    Raises:
        InvalidInput: non-finite logits or non-positive temperature.
    """
    m = np.asarray(m)
    if m.size == 0:
        raise InvalidInput("softmax of an empty vector")
    _require_finite(m, "logits")
    if not (temperature > 0):
        raise InvalidInput(f"temperature must be > 0, got {temperature}")
    a = m.astype(np.float64) / float(temperature)
    a -= a.max(axis=-1, keepdims=True)
    e = np.exp(a)
    out = e / e.sum(axis=-1, keepdims=True)
    return out.astype(m.dtype if m.dtype.kind == "f" else np.float64)


def log_sum_exp(m: np.ndarray) -> float | np.ndarray:
    """log(sum(exp(m))) over the last axis via max-subtraction.

    Raises:
        InvalidInput: empty or non-finite input.
    """
    m = np.asarray(m)
    if m.size == 0 or m.shape[-1] == 0:
        raise InvalidInput("log_sum_exp of an empty vector")
    _require_finite(m, "logits")
    a = m.astype(np.float64)
    mx = a.max(axis=-1, keepdims=True)
    out = np.log(np.exp(a - mx).sum(axis=-1)) + mx.squeeze(-1)
    return float(out) if out.ndim == 0 else out


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1].

    Raises:
        DegenerateVector: either vector has (near-)zero norm. A silent 0 here
            would hide dead embeddings, so it is an error by design.
    """
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    _require_finite(u, "u")
    _require_finite(v, "v")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu < _NORM_EPS or nv < _NORM_EPS:
        raise DegenerateVector("cosine similarity of a zero-norm vector")
    return float(np.clip(float(u @ v) / (nu * nv), -1.0, 1.0))


@dataclass(frozen=True)
class SpectralNormResult:
    value: float
    converged: bool
    iterations: int


def spectral_norm(w: np.ndarray, iters: int = 200, tol: float = 1e-10) -> SpectralNormResult:
    """Largest singular value of ``w`` by power iteration on ``w.T @ w``.

    Runs until the estimate changes by at most ``tol`` (relative) or the
    iteration budget is exhausted; the best estimate is always returned
    together with a convergence flag.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.size == 0:
        raise InvalidInput("spectral_norm needs a nonempty 2-D matrix")
    _require_finite(w, "matrix")
    gram = w.T @ w if w.shape[0] >= w.shape[1] else w @ w.T
    n = gram.shape[0]
    # Fixed deterministic start; the tiny ramp breaks symmetry against
    # starting orthogonal to the dominant eigenvector.
    v = np.ones(n) + np.linspace(0.0, 1e-3, n)
    v /= np.linalg.norm(v)
    sigma = 0.0
    for it in range(1, iters + 1):
        v_new = gram @ v
        norm = float(np.linalg.norm(v_new))
        if norm < _NORM_EPS:
            return SpectralNormResult(0.0, True, it)
        v_new /= norm
        sigma_new = float(np.sqrt(max(norm, 0.0)))
        if abs(sigma_new - sigma) <= tol * max(1.0, sigma_new):
            return SpectralNormResult(sigma_new, True, it)
        sigma, v = sigma_new, v_new
    return SpectralNormResult(sigma, False, iters)


def grad_check(
    fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    params: np.ndarray,
    h: float = 1e-3,
    coords: Iterable[int] | None = None,
) -> float:
    """Compare the analytic gradient of a scalar function to central differences.

    Args:
        fn: maps a parameter array to ``(value, gradient)``; the gradient must
            have the same shape as the input.
        params: the point to check at; evaluated in float64.
        h: central-difference step, expected in [1e-4, 1e-2].
        coords: optional subset of flat coordinate indices (all by default).

    Returns:
        max over checked coordinates of |g_analytic - g_numeric| /
        max(1, |g_analytic|, |g_numeric|).
    """
    p = np.asarray(params, dtype=np.float64).copy()
    _, grad = fn(p)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != p.shape:
        raise InvalidInput(f"gradient shape {grad.shape} != params shape {p.shape}")
    flat = p.ravel()
    gflat = grad.ravel()
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        up, _ = fn(p)
        flat[i] = orig - h
        dn, _ = fn(p)
        flat[i] = orig
        numeric = (up - dn) / (2.0 * h)
        analytic = gflat[i]
        rel = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
        worst = max(worst, rel)
    return worst
