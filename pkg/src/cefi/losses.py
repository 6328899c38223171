"""Training objectives: the centroid contrastive alignment loss, its O(K^2)
pairwise reference, temperature-scaled distillation, and cross-entropy.

All losses take float arrays of any float dtype, accumulate internally in
float64, and return float64 results; callers cast gradients back to their
parameter dtype. Each contrastive "pair term" evaluation is counted in
``pair_terms`` so complexity claims (2*K*N for the centroid form versus
K*(K-1)*N for the pairwise form) can be asserted rather than assumed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateVector, InvalidBatch, InvalidLabel, ShapeError
from .numerics import _require_finite

_NORM_EPS = 1e-30
_PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class ContrastiveConfig:
    """Settings for the alignment loss.

    Attributes:
        tau: temperature of the similarity terms.
        denominator_includes_positive: when True the positive pair also appears
            in the denominator (SimCLR convention); when False the denominator
            ranges over other samples only, so individual terms can go negative.
        stop_gradient_centroid: when True the per-sample centroid is treated as
            a constant during differentiation instead of being chained through.
    """

    tau: float = 0.2
    denominator_includes_positive: bool = False
    stop_gradient_centroid: bool = False

    def __post_init__(self):
        if not (self.tau > 0):
            raise InvalidBatch(f"tau must be > 0, got {self.tau}")


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 3.0

    def __post_init__(self):
        if not (self.temperature > 0):
            raise InvalidBatch(f"temperature must be > 0, got {self.temperature}")


class PairTermCounter:
    """Counts how many contrastive pair terms l(.,.) have been evaluated."""

    def __init__(self):
        self.count = 0

    def add(self, n: int) -> None:
        self.count += n

    def reset(self) -> None:
        self.count = 0


pair_terms = PairTermCounter()


def _unit_rows(a: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    """Rows normalized to unit length plus the original norms."""
    norms = np.linalg.norm(a, axis=-1)
    if np.any(norms < _NORM_EPS):
        raise DegenerateVector(f"zero-norm {what} in contrastive batch")
    return a / norms[..., None], norms


def ntxent_term(
    z_i: np.ndarray,
    z_j: np.ndarray,
    negatives: np.ndarray,
    cfg: ContrastiveConfig = ContrastiveConfig(),
) -> float:
    """One directional contrastive term for a positive pair against negatives.

    Computes ``-log( exp(sim(z_i, z_j)/tau) / sum_n exp(sim(z_i, n)/tau) )``
    where the sum ranges over ``negatives`` (embeddings of *other* samples
    from the counterpart side), plus the positive itself when
    ``denominator_includes_positive`` is set. With the positive excluded the
    value can be negative; that is intentional.

    Raises:
        InvalidBatch: no negatives were supplied.
        DegenerateVector: any participating vector has zero norm.
    """
    negatives = np.asarray(negatives, dtype=np.float64)
    if negatives.ndim == 1:
        negatives = negatives[None, :]
    if negatives.shape[0] == 0:
        raise InvalidBatch("contrastive term needs at least one negative")
    zi = np.asarray(z_i, dtype=np.float64).ravel()
    zj = np.asarray(z_j, dtype=np.float64).ravel()
    zi_n, _ = _unit_rows(zi[None, :], "anchor")
    zj_n, _ = _unit_rows(zj[None, :], "positive")
    neg_n, _ = _unit_rows(negatives, "negative")

    s_pos = float(zi_n[0] @ zj_n[0]) / cfg.tau
    s_neg = (neg_n @ zi_n[0]) / cfg.tau
    terms = np.concatenate([s_neg, [s_pos]]) if cfg.denominator_includes_positive else s_neg
    mx = terms.max()
    lse = float(np.log(np.exp(terms - mx).sum()) + mx)
    pair_terms.add(1)
    return lse - s_pos


def _lse_and_softmax(masked: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    """Log-sum-exp and softmax over ``axis`` sharing one exponential pass.
    Entries masked to -inf contribute zero weight."""
    mx = masked.max(axis=axis, keepdims=True)
    e = np.exp(masked - mx)
    total = e.sum(axis=axis, keepdims=True)
    lse = np.log(np.squeeze(total, axis)) + np.squeeze(mx, axis)
    return lse, e / total


def consensus_loss(
    embeddings: np.ndarray,
    cfg: ContrastiveConfig = ContrastiveConfig(),
) -> tuple[float, np.ndarray]:
    """Centroid-referenced alignment loss over per-device embeddings.

    Each device's embedding of a sample is contrasted, in both directions,
    with the across-device mean embedding of that sample; negatives are the
    counterpart's embeddings of the *other* samples in the batch. The result
    is averaged as ``(1/K) * sum_k (1/2N) * sum_x [l(z_kx, avg_x) +
    l(avg_x, z_kx)]``, which costs O(K) pair terms per sample instead of the
    O(K^2) of all-pairs contrasting.

    The returned gradient is exact: unless ``cfg.stop_gradient_centroid`` is
    set, the chain through the centroid (every device's embedding appears in
    every centroid) is included.

    Args:
        embeddings: array of shape (K, N, d), K devices by N samples.

    Returns:
        (loss, gradient) with the gradient shaped like ``embeddings``,
        both in float64.

    Raises:
        InvalidBatch: fewer than 2 devices or fewer than 2 samples.
        DegenerateVector: an embedding or a centroid has zero norm.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    if z.ndim != 3:
        raise InvalidBatch(f"expected (K, N, d) embeddings, got shape {z.shape}")
    k, n, d = z.shape
    if k < 2 or n < 2:
        raise InvalidBatch(f"need K >= 2 devices and N >= 2 samples, got K={k}, N={n}")
    _require_finite(z, "embeddings")

    avg = z.mean(axis=0)  # (N, d)
    zn, z_norm = _unit_rows(z, "embedding")
    an, a_norm = _unit_rows(avg, "centroid")

    # sims[k, x, y] = cos(z[k, x], avg[y]); direction two is its (x, y) transpose.
    sims = zn @ an.T  # broadcast matmul over K
    t = sims / cfg.tau
    ii = np.arange(n)
    diag = t[:, ii, ii].copy()  # (K, N)

    masked = t  # t is a fresh array; safe to mask in place
    if not cfg.denominator_includes_positive:
        masked[:, ii, ii] = -np.inf
    lse1, p1 = _lse_and_softmax(masked, axis=2)  # over counterpart samples y
    lse2, p2 = _lse_and_softmax(masked, axis=1)  # over anchor samples x
    loss = float((lse1 - diag).sum() + (lse2 - diag).sum()) / (2.0 * n * k)

    # d(loss)/d(t[k, x, y]): softmax weights from both direction denominators,
    # minus 2 on the diagonal from the two numerators.
    w = 1.0 / (2.0 * n * k)
    g_t = (p1 + p2) * w
    g_t[:, ii, ii] -= 2.0 * w
    g_s = g_t / cfg.tau

    # Backprop through cos(z[k,x], avg[y]) = zn[k,x] . an[y].
    row_dot = (g_s * sims).sum(axis=2)  # (K, N): sum_y g_s * s
    dz = (g_s @ an - row_dot[..., None] * zn) / z_norm[..., None]
    col_dot = (g_s * sims).sum(axis=(0, 1))  # (N,): sum_{k,x} g_s * s
    davg_num = g_s.reshape(k * n, n).T @ zn.reshape(k * n, d)
    davg = (davg_num - col_dot[:, None] * an) / a_norm[:, None]
    if not cfg.stop_gradient_centroid:
        dz += davg[None, :, :] / k

    pair_terms.add(2 * k * n)
    return loss, dz


def _logsumexp_axis(t: np.ndarray, axis: int) -> np.ndarray:
    mx = t.max(axis=axis)
    return np.log(np.exp(t - np.expand_dims(mx, axis)).sum(axis=axis)) + mx


def pairwise_consensus_loss(
    embeddings: np.ndarray,
    cfg: ContrastiveConfig = ContrastiveConfig(),
) -> float:
    """Reference alignment loss contrasting every device pair directly.

    Averages the symmetric contrastive term over all K*(K-1)/2 device pairs;
    kept as the quadratic-cost baseline the centroid form replaces. Value
    only (it is never trained against).
    """
    z = np.asarray(embeddings, dtype=np.float64)
    if z.ndim != 3:
        raise InvalidBatch(f"expected (K, N, d) embeddings, got shape {z.shape}")
    k, n, _ = z.shape
    if k < 2 or n < 2:
        raise InvalidBatch(f"need K >= 2 devices and N >= 2 samples, got K={k}, N={n}")
    _require_finite(z, "embeddings")
    zn, _ = _unit_rows(z, "embedding")

    ii = np.arange(n)
    total = 0.0
    npairs = 0
    for i in range(k):
        for j in range(i + 1, k):
            t = (zn[i] @ zn[j].T) / cfg.tau  # t[x, y] = sim(z_i_x, z_j_y)/tau
            diag = t[ii, ii]
            if cfg.denominator_includes_positive:
                lse_ij = _logsumexp_axis(t, axis=1)
                lse_ji = _logsumexp_axis(t, axis=0)
            else:
                masked = t.copy()
                masked[ii, ii] = -np.inf
                lse_ij = _logsumexp_axis(masked, axis=1)
                lse_ji = _logsumexp_axis(masked, axis=0)
            total += float((lse_ij - diag).sum() + (lse_ji - diag).sum()) / (2.0 * n)
            npairs += 1
            pair_terms.add(2 * n)
    return total / npairs


def distill_loss(
    student_logits: np.ndarray,
    teacher_logits: np.ndarray,
    cfg: DistillConfig = DistillConfig(),
) -> tuple[float, np.ndarray]:
    """Temperature-softened KL divergence from student to (constant) teacher.

    ``T^2 * sum_x KL(softmax(student_x / T) || softmax(teacher_x / T))``.
    The T^2 factor restores the gradient scale lost to softening. Teacher
    logits carry no gradient. Probabilities are floored at 1e-12 inside the
    logs so an extreme teacher cannot produce infinities.

    Returns:
        (loss, gradient wrt student logits), float64.

    Raises:
        ShapeError: student and teacher shapes differ.
    """
    s = np.asarray(student_logits, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    if s.shape != t.shape:
        raise ShapeError(f"student shape {s.shape} != teacher shape {t.shape}")
    if s.ndim == 1:
        s = s[None, :]
        t = t[None, :]
    _require_finite(s, "student logits")
    _require_finite(t, "teacher logits")
    temp = cfg.temperature

    p = _stable_softmax64(s / temp)
    q = _stable_softmax64(t / temp)
    log_ratio = np.log(np.maximum(p, _PROB_FLOOR)) - np.log(np.maximum(q, _PROB_FLOOR))
    kl_rows = (p * log_ratio).sum(axis=1)
    loss = float(temp * temp * kl_rows.sum())
    grad = temp * p * (log_ratio - kl_rows[:, None])
    return loss, grad.reshape(np.asarray(student_logits).shape)


def _stable_softmax64(a: np.ndarray) -> np.ndarray:
    a = a - a.max(axis=-1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood plus its gradient wrt the logits.

    Gradient is ``(softmax - onehot) / N``.

    Raises:
        InvalidLabel: any label outside [0, num_classes).
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    y = np.asarray(labels).ravel().astype(np.int64)
    n, c = z.shape
    if y.shape[0] != n:
        raise ShapeError(f"{n} logit rows but {y.shape[0]} labels")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise InvalidLabel(f"labels must lie in [0, {c})")
    _require_finite(z, "logits")
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1))
    loss = float((lse - zs[np.arange(n), y]).mean())
    grad = np.exp(zs - lse[:, None])
    grad[np.arange(n), y] -= 1.0
    grad /= n
    return loss, grad.reshape(np.asarray(logits).shape if np.asarray(logits).ndim > 1 else (c,))
