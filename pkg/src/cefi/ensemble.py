"""Output-aggregation rules over per-device logits: hard/soft voting, logits
averaging, confidence selection by max-softmax / min-entropy / min-energy,
and the random / oracle baselines.

All ties break toward the lowest index: the lowest class index for argmax
decisions and the lowest device index for device selection. Every rule is a
pure function of its inputs (plus the seed for the random rule).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfig, MissingOracleLabel
from .numerics import Rng, log_sum_exp, softmax

RULE_NAMES = (
    "hard_vote", "soft_vote", "logits_avg", "max_softmax",
    "min_entropy", "min_energy", "random", "oracle",
)

_ENTROPY_FLOOR = 1e-12

AGGREGATION_RULES = frozenset({"hard_vote", "soft_vote", "logits_avg"})
SELECTION_RULES = frozenset({"max_softmax", "min_entropy", "min_energy", "random", "oracle"})
SHIFT_INVARIANT_RULES = ("soft_vote", "hard_vote", "max_softmax", "min_entropy", "logits_avg")


@dataclass(frozen=True)
class EnsembleRule:
    """A named aggregation or selection strategy.

    ``seed`` only matters for the ``random`` rule; two rules with the same
    kind and seed always agree on the same inputs.
    """

    kind: str
    seed: int = 0

    def __post_init__(self):
        if self.kind not in RULE_NAMES:
            raise InvalidConfig(f"unknown ensemble rule {self.kind!r}; "
                                f"choose from {'|'.join(RULE_NAMES)}")

    @property
    def needs_true_label(self) -> bool:
        return self.kind == "oracle"


def energy(m: np.ndarray) -> float:
    """Energy score of a logits vector: ``-log(sum(exp(m)))``.

    Lower energy means the device is more confident; unlike softmax scores it
    is not normalized away, which is what makes it usable for spotting
    devices that never saw the input's class.
    """
    return -float(log_sum_exp(np.asarray(m, dtype=np.float64)))


def _entropy(p: np.ndarray) -> float:
    q = np.maximum(p, _ENTROPY_FLOOR)
    return -float((p * np.log(q)).sum())


def apply(rule: EnsembleRule, logits_list, true_label: int | None = None,
          sample_index: int = 0) -> tuple[int, int | None]:
    """Combine per-device logits into one label.

    Args:
        rule: the strategy to apply.
        logits_list: K logits vectors (one per device, fixed device order).
        true_label: required by the oracle rule only.
        sample_index: identifies the sample for the random rule so repeated
            calls across a test set do not all pick the same device.

    Returns:
        (label, selected_device) — selected_device is None for
        aggregation-style rules that blend rather than choose.

    Raises:
        MissingOracleLabel: oracle rule without a true label.
        InvalidConfig: empty device list.
    """
    logits = np.asarray(logits_list, dtype=np.float64)
    if logits.ndim == 1:
        logits = logits[None, :]
    k = logits.shape[0]
    if k == 0:
        raise InvalidConfig("need at least one device's logits")
    if rule.kind == "oracle" and true_label is None:
        raise MissingOracleLabel("oracle rule requires the true label")

    if rule.kind == "soft_vote":
        probs = softmax(logits)
        return int(probs.mean(axis=0).argmax()), None
    if rule.kind == "logits_avg":
        return int(softmax(logits.mean(axis=0)).argmax()), None
    if rule.kind == "hard_vote":
        votes = logits.argmax(axis=1)
        counts = np.bincount(votes, minlength=logits.shape[1])
        return int(counts.argmax()), None
    if rule.kind == "max_softmax":
        probs = softmax(logits)
        dev = int(probs.max(axis=1).argmax())
        return int(probs[dev].argmax()), dev
    if rule.kind == "min_entropy":
        probs = softmax(logits)
        dev = int(np.array([_entropy(p) for p in probs]).argmin())
        return int(probs[dev].argmax()), dev
    if rule.kind == "min_energy":
        dev = int(np.array([energy(m) for m in logits]).argmin())
        return int(logits[dev].argmax()), dev
    if rule.kind == "random":
        dev = int(Rng(rule.seed).child("pick", sample_index).generator.integers(0, k))
        return int(logits[dev].argmax()), dev
    # oracle: lowest-index device predicting the true label; if none does,
    # fall back to min-energy (the answer is wrong either way, the fallback
    # only pins determinism).
    preds = logits.argmax(axis=1)
    hits = np.flatnonzero(preds == true_label)
    if len(hits):
        dev = int(hits[0])
        return int(preds[dev]), dev
    return apply(EnsembleRule("min_energy"), logits)


def apply_batch(rule: EnsembleRule, logits: np.ndarray,
                true_labels: np.ndarray | None = None) -> np.ndarray:
    """Vectorized :func:`apply` over a (K, N, C) logits array -> (N,) labels.

    Matches the per-sample function exactly (asserted in tests); the random
    rule derives one device choice per sample index from the rule seed.
    """
    z = np.asarray(logits, dtype=np.float64)
    k, n, c = z.shape
    if rule.kind == "oracle" and true_labels is None:
        raise MissingOracleLabel("oracle rule requires true labels")

    if rule.kind == "soft_vote":
        return softmax(z).mean(axis=0).argmax(axis=1)
    if rule.kind == "logits_avg":
        return softmax(z.mean(axis=0)).argmax(axis=1)
    if rule.kind == "hard_vote":
        votes = z.argmax(axis=2)  # (K, N)
        out = np.empty(n, dtype=np.int64)
        for i in range(n):
            out[i] = np.bincount(votes[:, i], minlength=c).argmax()
        return out
    if rule.kind == "max_softmax":
        probs = softmax(z)
        dev = probs.max(axis=2).argmax(axis=0)  # (N,)
        return probs[dev, np.arange(n)].argmax(axis=1)
    if rule.kind == "min_entropy":
        probs = softmax(z)
        ent = -(probs * np.log(np.maximum(probs, _ENTROPY_FLOOR))).sum(axis=2)
        dev = ent.argmin(axis=0)
        return probs[dev, np.arange(n)].argmax(axis=1)
    if rule.kind == "min_energy":
        mx = z.max(axis=2)
        en = -(np.log(np.exp(z - mx[..., None]).sum(axis=2)) + mx)
        dev = en.argmin(axis=0)
        return z[dev, np.arange(n)].argmax(axis=1)
    if rule.kind == "random":
        dev = np.array([
            int(Rng(rule.seed).child("pick", i).generator.integers(0, k))
            for i in range(n)
        ])
        return z[dev, np.arange(n)].argmax(axis=1)
    # oracle
    preds = z.argmax(axis=2)  # (K, N)
    out = np.empty(n, dtype=np.int64)
    fallback = apply_batch(EnsembleRule("min_energy"), z)
    for i in range(n):
        hits = np.flatnonzero(preds[:, i] == true_labels[i])
        out[i] = preds[hits[0], i] if len(hits) else fallback[i]
    return out
