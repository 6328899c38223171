"""Baselines, the theory-verification harness, bottleneck experiments, and
CSV report emission.

The two theory checks mirror the engine's analytical claims:

* ``verify_fi_equivalence`` builds the idealized system — one canonical
  embedding per sample and cooperative heads that reproduce each device's own
  tail logits up to a per-(device, sample) constant shift — and confirms that
  every shift-invariant ensemble rule then agrees with input-sharing
  inference on every test label. This is a theorem, so the expected match
  fraction is exactly 1.0.
* ``verify_epsilon_bound`` samples perturbations of bounded norm and checks
  the product-of-spectral-norms Lipschitz bound on output probabilities,
  including the top-2-margin condition under which the predicted label cannot
  flip.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .ensemble import SHIFT_INVARIANT_RULES, EnsembleRule, apply_batch
from .errors import IoError
from .federation import exclude_ood_for_co, federated_infer, idealize_consensus
from .models import DeviceState, SyntheticHead, co_weight_matrices, make_tail
from .nn import Sequential, TrainLoopConfig, train_supervised
from .numerics import Rng, softmax, spectral_norm
from .pipeline import (
    ALL_SCHEMES,
    CellResult,
    PipelineConfig,
    TrainedSystem,
    accuracy_of,
    canonical_grid_config,
    cefi_logits,
    evaluate_system,
    reset_co,
    run_train_co,
    train_full,
)

DEFAULT_RULES = ("min_energy", "soft_vote", "logits_avg", "max_softmax",
                 "min_entropy", "hard_vote", "random")


@dataclass(frozen=True)
class TheoryCheckConfig:
    epsilon: float = 0.05
    lipschitz_lambda: float = 1.0   # softmax is 1-Lipschitz in l2 at unit temperature
    num_samples: int = 1000


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

def run_solo_baseline(devices: list[DeviceState], test: Dataset) -> list[float]:
    """Accuracy of each device using only its own pretrained model."""
    truth = test.require_labels()
    out = []
    for d in devices:
        logits = d.solo_predict(d.head_features(test.x, test.ids), mode="eval")
        out.append(accuracy_of(logits.argmax(axis=1), truth))
    return out


def run_input_sharing_fi(devices: list[DeviceState], test: Dataset,
                         rule: EnsembleRule = EnsembleRule("soft_vote")) -> float:
    """Relaxed reference: every device sees the same raw input and the solo
    outputs are combined."""
    truth = test.require_labels()
    logits = np.stack([
        d.solo_predict(d.head_features(test.x, test.ids), mode="eval")
        for d in devices
    ]).astype(np.float64)
    return accuracy_of(apply_batch(rule, logits, truth), truth)


def run_edge_ensemble(cfg: PipelineConfig, parts: list[Dataset], test: Dataset,
                      rule: EnsembleRule = EnsembleRule("soft_vote")) -> float:
    """Baseline with one common encoder: a single shared head feeds per-device
    tails trained on each device's local data; outputs are combined.

    Uses none of the embedding/cooperative machinery.
    """
    rng = Rng(cfg.seed).child("edge-ensemble")
    head = SyntheticHead(cfg.task.input_dim, cfg.arch.head_dim, rng.child("head"))
    tails: list[Sequential] = []
    for k, part in enumerate(parts):
        tail = make_tail(head.feature_dim, cfg.arch.num_classes, rng.child("tail", k),
                         hidden=cfg.arch.tail_hidden, dropout=cfg.arch.tail_dropout)
        feats = head.features(part.x, part.ids)
        loop = TrainLoopConfig(
            batch_size=cfg.tail_train.batch_size,
            max_epochs=cfg.tail_train.max_epochs,
            early_stop_patience=cfg.tail_train.early_stop_patience,
            validation_fraction=cfg.tail_train.validation_fraction,
            rng_seed=cfg.seed * 2000003 + k,
        )
        train_supervised(tail, feats, part.require_labels(), loop, cfg.optimizer)
        tails.append(tail)
    truth = test.require_labels()
    shared_feats = head.features(test.x, test.ids)
    logits = np.stack([t.forward(shared_feats, "eval") for t in tails]).astype(np.float64)
    return accuracy_of(apply_batch(rule, logits, truth), truth)


# ---------------------------------------------------------------------------
# Theory checks
# ---------------------------------------------------------------------------

@dataclass
class EquivalenceReport:
    match_fraction: dict[str, float]
    num_samples: int


def install_ideal_outputs(devices: list[DeviceState], test: Dataset,
                          shift_scale: float, seed: int) -> None:
    """Configure the idealized construction on trained devices, in place.

    All devices share one canonical embedding per sample, and each device's
    cooperative head is replaced by a lookup that returns the device's own
    tail logits plus a per-(device, sample) constant shift — the exact
    situation in which the cooperative path provably reproduces input-sharing
    behavior for shift-invariant rules.
    """
    table = idealize_consensus(devices, [test])
    rng = Rng(seed).child("ideal-shifts")
    for d in devices:
        feats = d.head_features(test.x, test.ids)
        teacher = d.solo_predict(feats, mode="eval").astype(np.float64)
        shifts = rng.child("device", d.device_id).uniform(
            -shift_scale, shift_scale, (len(test), 1), dtype=np.float64)
        lut = {table[int(sid)].tobytes(): teacher[i] + shifts[i]
               for i, sid in enumerate(test.ids)}

        def co_lookup(z, _lut=lut):
            return np.stack([_lut[np.ascontiguousarray(z[i], dtype=np.float32).tobytes()]
                             for i in range(len(z))])

        d.co_override = co_lookup


def clear_ideal_outputs(devices: list[DeviceState]) -> None:
    for d in devices:
        d.co_override = None
        d.embedding_override = None


def verify_fi_equivalence(devices: list[DeviceState], test: Dataset,
                          shift_scale: float = 5.0, seed: int = 0,
                          rules: tuple[str, ...] = SHIFT_INVARIANT_RULES + ("min_energy",),
                          ) -> EquivalenceReport:
    """Exact-match fraction between cooperative and input-sharing labels under
    the idealized construction, per rule, driven through the real per-sample
    message exchange.

    Shift-invariant rules must match on 100% of samples; min_energy is
    reported as well and may fall short under nonzero shifts (it is the
    documented non-invariant rule).
    """
    truth = test.require_labels()
    k = len(devices)
    install_ideal_outputs(devices, test, shift_scale, seed)
    try:
        solo = np.stack([
            d.solo_predict(d.head_features(test.x, test.ids), mode="eval")
            for d in devices
        ]).astype(np.float64)
        fractions = {}
        for kind in rules:
            rule = EnsembleRule(kind)
            reference = apply_batch(rule, solo, truth)
            matches = 0
            for i in range(len(test)):
                origin = devices[i % k]
                label, _, _ = federated_infer(
                    origin, None if test.x is None else test.x[i],
                    devices, rule, sample_id=int(test.ids[i]), sample_index=i)
                matches += int(label == reference[i])
            fractions[kind] = matches / len(test)
    finally:
        clear_ideal_outputs(devices)
    return EquivalenceReport(match_fraction=fractions, num_samples=len(test))


@dataclass
class EpsilonBoundReport:
    max_deviation: float
    bound: float
    deviation_violations: int
    margin_flips: int
    margin_cases: int
    num_samples: int


def verify_epsilon_bound(co: Sequential, z_samples: np.ndarray, epsilon: float,
                         cfg: TheoryCheckConfig = TheoryCheckConfig(),
                         seed: int = 0) -> EpsilonBoundReport:
    """Check the perturbation bound on a cooperative head in eval mode.

    For perturbations with norm at most ``epsilon``, output probabilities may
    move at most ``sigma_max(W2) * sigma_max(W1) * lambda * epsilon`` in l2,
    and whenever the unperturbed top-2 probability gap exceeds twice that
    bound the predicted label must not change.
    """
    w1, w2 = co_weight_matrices(co)
    lip = spectral_norm(w1.astype(np.float64)).value * spectral_norm(w2.astype(np.float64)).value
    bound = lip * cfg.lipschitz_lambda * epsilon
    rng = Rng(seed).child("eps-bound")

    z = np.asarray(z_samples, dtype=np.float32)
    n, d = z.shape
    max_dev = 0.0
    violations = 0
    flips = 0
    margin_cases = 0
    for i in range(cfg.num_samples):
        row = z[i % n]
        direction = rng.normal((d,), dtype=np.float64)
        direction /= np.linalg.norm(direction)
        radius = epsilon * float(rng.generator.uniform(0.0, 1.0)) if i % 4 else epsilon
        delta = (radius * direction).astype(np.float32)
        p0 = softmax(co.forward(row[None, :], "eval").astype(np.float64))[0]
        p1 = softmax(co.forward((row + delta)[None, :], "eval").astype(np.float64))[0]
        dev = float(np.linalg.norm(p1 - p0))
        max_dev = max(max_dev, dev)
        if dev > bound + 1e-12:
            violations += 1
        top2 = np.sort(p0)[-2:]
        gap = float(top2[1] - top2[0])
        if gap > 2.0 * bound:
            margin_cases += 1
            if int(p1.argmax()) != int(p0.argmax()):
                flips += 1
    return EpsilonBoundReport(max_deviation=max_dev, bound=bound,
                              deviation_violations=violations, margin_flips=flips,
                              margin_cases=margin_cases, num_samples=cfg.num_samples)


# ---------------------------------------------------------------------------
# Bottleneck experiments
# ---------------------------------------------------------------------------

@dataclass
class BottleneckReport:
    baseline: list[float]                      # per-origin accuracy
    deltas: dict[str, list[float]]             # variant -> per-origin delta
    rule: str = "min_energy"


def run_bottleneck_suite(system: TrainedSystem,
                         rule: EnsembleRule = EnsembleRule("min_energy"),
                         ) -> BottleneckReport:
    """Idealized-variant deltas against the trained baseline.

    Variants: unifying every device's embedding to the per-sample mean
    (retraining the cooperative heads on the unified embeddings), excluding
    shared samples whose true class a device never saw, and both combined.
    Cooperative heads are retrained from their original initialization for
    every variant; the trained baseline is restored afterwards.
    """
    test = system.test
    truth = test.require_labels()
    devices = system.devices
    k = len(devices)

    def eval_per_origin() -> list[float]:
        return [accuracy_of(apply_batch(rule, cefi_logits(system, o, test), truth), truth)
                for o in range(k)]

    baseline = eval_per_origin()
    trained_co = [[p.value.copy() for p in d.co.params()] for d in devices]
    keep = [exclude_ood_for_co(d, system.shared, system.oracle_labels) for d in devices]

    deltas: dict[str, list[float]] = {}

    reset_co(system)
    idealize_consensus(devices, [system.shared, test])
    run_train_co(system)
    deltas["unify"] = [a - b for a, b in zip(eval_per_origin(), baseline)]
    for d in devices:
        d.embedding_override = None

    reset_co(system)
    run_train_co(system, keep_ids_per_device=keep)
    deltas["ood_exclusion"] = [a - b for a, b in zip(eval_per_origin(), baseline)]

    reset_co(system)
    idealize_consensus(devices, [system.shared, test])
    run_train_co(system, keep_ids_per_device=keep)
    deltas["both"] = [a - b for a, b in zip(eval_per_origin(), baseline)]
    for d in devices:
        d.embedding_override = None

    for d, snap in zip(devices, trained_co):
        for p, value in zip(d.co.params(), snap):
            p.value[...] = value
    return BottleneckReport(baseline=baseline, deltas=deltas, rule=rule.kind)


# ---------------------------------------------------------------------------
# Grid runner and reports
# ---------------------------------------------------------------------------

def run_grid(schemes=ALL_SCHEMES, seeds=range(5), rule_names=DEFAULT_RULES,
             system_hook=None, log=None) -> list[CellResult]:
    """Train and evaluate every (scheme, seed) cell of the desk-scale grid."""
    results = []
    for scheme in schemes:
        for seed in seeds:
            cfg = canonical_grid_config(scheme, seed)
            system = train_full(cfg)
            rules = [EnsembleRule(name, seed=seed) for name in rule_names]
            cell = evaluate_system(system, rules)
            results.append(cell)
            if log is not None:
                log(f"{scheme} seed={seed}: solo={cell.mean_solo:.3f} "
                    f"min_energy={cell.mean_cefi('min_energy'):.3f}")
            if system_hook is not None:
                system_hook(scheme, seed, system)
    return results


RESULT_COLUMNS = ("scheme", "seed", "rule", "origin_device", "accuracy",
                  "mean_solo", "input_sharing", "oracle",
                  "inference_bytes_per_sample", "config_hash")


def emit_report(results: list[CellResult], out_dir, config_hash: str | None = None,
                ) -> dict[str, str]:
    """Write results, summary (mean +- sample std over seeds), and plot data.

    One results row per (scheme, rule, origin device, seed), stable order.
    Returns the written paths.
    """
    import os

    try:
        os.makedirs(out_dir, exist_ok=True)
        paths = {
            "results": os.path.join(out_dir, "results.csv"),
            "summary": os.path.join(out_dir, "summary.csv"),
            "plotdata": os.path.join(out_dir, "plotdata.csv"),
        }
        rows = []
        for cell in results:
            for rule, accs in sorted(cell.cefi_acc.items()):
                for origin, acc in enumerate(accs):
                    rows.append((cell.scheme, cell.seed, rule, origin, f"{acc:.6f}",
                                 f"{cell.mean_solo:.6f}", f"{cell.input_sharing_acc:.6f}",
                                 f"{cell.oracle_acc:.6f}", cell.inference_bytes_per_sample,
                                 cell.config_hash))
        rows.sort(key=lambda r: (r[0], r[2], r[3], r[1]))
        with open(paths["results"], "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            if config_hash:
                fh.write(f"# config_hash={config_hash}\n")
            writer.writerow(RESULT_COLUMNS)
            writer.writerows(rows)

        summary_rows = _summarize(results)
        with open(paths["summary"], "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            if config_hash:
                fh.write(f"# config_hash={config_hash}\n")
            writer.writerow(("scheme", "series", "mean", "std", "num_seeds"))
            writer.writerows(summary_rows)

        with open(paths["plotdata"], "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(("x", "y", "series"))
            for scheme, series, mean, _std, _n in summary_rows:
                writer.writerow((scheme, mean, series))
        return paths
    except OSError as e:
        raise IoError(f"cannot write report to {out_dir}: {e}") from e


def _summarize(results: list[CellResult]) -> list[tuple]:
    """Per (scheme, series): mean and sample std across seeds of the
    mean-over-origins accuracy."""
    by_scheme: dict[str, list[CellResult]] = {}
    for cell in results:
        by_scheme.setdefault(cell.scheme, []).append(cell)
    rows = []
    for scheme in sorted(by_scheme):
        cells = by_scheme[scheme]
        series: dict[str, list[float]] = {}
        for cell in cells:
            series.setdefault("solo", []).append(cell.mean_solo)
            series.setdefault("input_sharing", []).append(cell.input_sharing_acc)
            series.setdefault("oracle", []).append(cell.oracle_acc)
            for rule in cell.cefi_acc:
                series.setdefault(rule, []).append(cell.mean_cefi(rule))
        for name in sorted(series):
            vals = np.array(series[name])
            std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            rows.append((scheme, name, f"{vals.mean():.6f}", f"{std:.6f}", len(vals)))
    return rows


def read_results_csv(path) -> list[dict]:
    """Round-trip parse of an emitted results file (comment lines skipped)."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        body = [line for line in fh if not line.startswith("#")]
    reader = csv.DictReader(body)
    for row in reader:
        out.append(row)
    return out
