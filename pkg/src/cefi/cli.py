"""Operator entry point: a staged, config-driven pipeline.

Stages communicate through on-disk artifacts in the output directory; each
stage checks that what it needs exists (exit 3 when not), validates that the
artifact was produced under the same configuration hash (no silent mixing of
runs), and overwrites its own outputs idempotently. Configuration is a flat
UTF-8 JSON object with dotted keys; unknown keys and invalid values are all
reported together (exit 2). Unexpected runtime failures exit 4.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .data import (
    Dataset,
    SyntheticTaskConfig,
    holdout_shared,
    read_container,
    read_features,
    synth_generate,
    write_container,
)
from .ensemble import RULE_NAMES, EnsembleRule
from .errors import (
    CefiError,
    ConfigMismatch,
    InvalidConfig,
    StageDependencyError,
)
from .evalkit import (
    TheoryCheckConfig,
    emit_report,
    read_results_csv,
    verify_epsilon_bound,
    verify_fi_equivalence,
)
from .federation import CommMeter, FederationConfig, TraceLog, federated_infer
from .losses import ContrastiveConfig, DistillConfig
from .models import ArchitectureConfig, FileBackedHead
from .nn import OptimizerConfig, TrainLoopConfig, load_named_params, named_params
from .numerics import Rng
from .pipeline import (
    CellResult,
    PipelineConfig,
    TrainedSystem,
    build_system,
    evaluate_system,
    pretrain_tails,
    run_train_ce,
    run_train_co,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3
EXIT_RUNTIME = 4

STAGES = ("synth-data", "partition", "pretrain-tails", "train-ce", "train-co",
          "infer", "evaluate", "theory-check", "report")


def _positive(kind):
    def check(v):
        if not isinstance(v, kind) or isinstance(v, bool) or v <= 0:
            raise ValueError(f"expected positive {kind.__name__}")
        return v
    return check


def _fraction(v):
    if not isinstance(v, (int, float)) or isinstance(v, bool) or not (0 < v < 1):
        raise ValueError("expected a fraction in (0, 1)")
    return float(v)


def _nonneg_float(v):
    if not isinstance(v, (int, float)) or isinstance(v, bool) or v < 0:
        raise ValueError("expected a nonnegative number")
    return float(v)


def _boolean(v):
    if not isinstance(v, bool):
        raise ValueError("expected true or false")
    return v


def _choice(*options):
    def check(v):
        if v not in options:
            raise ValueError(f"expected one of {'|'.join(options)}")
        return v
    return check


def _pos_float(v):
    if not isinstance(v, (int, float)) or isinstance(v, bool) or v <= 0:
        raise ValueError("expected a positive number")
    return float(v)


def _string_list(v):
    if not isinstance(v, list) or not all(isinstance(s, str) for s in v):
        raise ValueError("expected a list of strings")
    return v


def _rule_list(v):
    v = _string_list(v)
    for name in v:
        if name not in RULE_NAMES:
            raise ValueError(f"unknown rule {name!r}")
    return v


def _int_nonneg(v):
    if not isinstance(v, int) or isinstance(v, bool) or v < 0:
        raise ValueError("expected a nonnegative integer")
    return v


# key -> (default, validator)
CONFIG_KEYS = {
    "task": ("synthetic", _choice("synthetic", "feature-files")),
    "seed": (0, _int_nonneg),
    "data.num_classes": (10, _positive(int)),
    "data.input_dim": (64, _positive(int)),
    "data.samples_per_class": (500, _positive(int)),
    "data.test_per_class": (100, _positive(int)),
    "data.class_separation": (4.0, _pos_float),
    "data.within_std": (1.0, _pos_float),
    "data.test_fraction": (0.2, _fraction),
    "share.fraction": (0.2, _fraction),
    "partition.scheme": ("disjoint", _choice("mild", "moderate", "skewed",
                                             "disjoint", "dirichlet")),
    "partition.alpha": (0.5, _pos_float),
    "devices.count": (3, _positive(int)),
    "head.dim": (128, _positive(int)),
    "head.files": ([], _string_list),
    "tail.hidden": (1024, _positive(int)),
    "tail.dropout": (0.3, _nonneg_float),
    "tail.batch": (64, _positive(int)),
    "tail.epochs": (20, _positive(int)),
    "tail.patience": (5, _positive(int)),
    "tail.val_fraction": (0.2, _fraction),
    "ce.hidden": (256, _positive(int)),
    "ce.dropout": (0.1, _nonneg_float),
    "ce.batch": (512, _positive(int)),
    "ce.epochs": (100, _positive(int)),
    "ce.patience": (10, _positive(int)),
    "ce.min_improve": (1e-4, _pos_float),
    "co.hidden": (512, _positive(int)),
    "co.dropout": (0.3, _nonneg_float),
    "co.batch": (64, _positive(int)),
    "co.epochs": (20, _positive(int)),
    "loss.tau": (0.2, _pos_float),
    "loss.distill_temperature": (3.0, _pos_float),
    "loss.include_positive": (False, _boolean),
    "loss.stop_gradient_centroid": (False, _boolean),
    "optim.lr": (1e-3, _pos_float),
    "optim.lr_floor": (1e-5, _pos_float),
    "optim.weight_decay": (0.0005, _nonneg_float),
    "federation.aggregator": ("fixed", _choice("fixed", "round_robin")),
    "federation.aggregator_id": (0, _int_nonneg),
    "federation.threaded": (False, _boolean),
    "ensemble.rules": (["min_energy", "soft_vote", "logits_avg", "max_softmax",
                        "min_entropy", "hard_vote"], _rule_list),
    "theory.epsilon": (0.05, _pos_float),
    "theory.samples": (1000, _positive(int)),
}


def load_config(path: str | None, seed_override: int | None = None,
                rules_override: list[str] | None = None) -> dict:
    """Resolve the flat config: defaults, file values, CLI overrides.

    Every violated key is reported in one pass.
    """
    raw = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise InvalidConfig(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise InvalidConfig(f"config is not valid JSON: {e}")
        if not isinstance(raw, dict):
            raise InvalidConfig("config must be a JSON object of dotted keys")

    problems = []
    for key in sorted(raw):
        if key not in CONFIG_KEYS:
            problems.append(f"unknown key {key!r}")
    resolved = {}
    for key, (default, validate) in CONFIG_KEYS.items():
        value = raw.get(key, default)
        try:
            resolved[key] = validate(value)
        except ValueError as e:
            problems.append(f"{key}: {e} (got {value!r})")
    if resolved.get("task") == "feature-files" and path is not None:
        files = resolved.get("head.files", [])
        if raw.get("task") == "feature-files" and len(files) != resolved["devices.count"]:
            problems.append(
                f"head.files: need {resolved['devices.count']} files, got {len(files)}")
    if problems:
        raise InvalidConfig("invalid configuration:\n  " + "\n  ".join(problems))
    if seed_override is not None:
        resolved["seed"] = seed_override
    if rules_override:
        try:
            resolved["ensemble.rules"] = _rule_list(rules_override)
        except ValueError as e:
            raise InvalidConfig(f"--rule: {e}")
    return resolved


def to_pipeline_config(flat: dict) -> PipelineConfig:
    scheme = flat["partition.scheme"]
    if scheme == "dirichlet":
        scheme = f"dirichlet:{flat['partition.alpha']}"
    return PipelineConfig(
        task=SyntheticTaskConfig(
            num_classes=flat["data.num_classes"],
            input_dim=flat["data.input_dim"],
            class_separation=flat["data.class_separation"],
            within_class_std=flat["data.within_std"],
            train_per_class=flat["data.samples_per_class"],
            test_per_class=flat["data.test_per_class"],
            seed=flat["seed"],
        ),
        arch=ArchitectureConfig(
            num_classes=flat["data.num_classes"],
            head_dim=flat["head.dim"],
            tail_hidden=flat["tail.hidden"],
            tail_dropout=flat["tail.dropout"],
            ce_hidden=flat["ce.hidden"],
            ce_dropout=flat["ce.dropout"],
            co_hidden=flat["co.hidden"],
            co_dropout=flat["co.dropout"],
        ),
        federation=FederationConfig(
            num_devices=flat["devices.count"],
            aggregator_policy=flat["federation.aggregator"],
            aggregator_id=flat["federation.aggregator_id"],
            ce_epochs=flat["ce.epochs"],
            ce_batch=flat["ce.batch"],
            ce_patience=flat["ce.patience"],
            ce_min_improve=flat["ce.min_improve"],
            co_epochs=flat["co.epochs"],
            co_batch=flat["co.batch"],
            seed=flat["seed"],
            threaded=flat["federation.threaded"],
        ),
        contrastive=ContrastiveConfig(
            tau=flat["loss.tau"],
            denominator_includes_positive=flat["loss.include_positive"],
            stop_gradient_centroid=flat["loss.stop_gradient_centroid"],
        ),
        distill=DistillConfig(temperature=flat["loss.distill_temperature"]),
        optimizer=OptimizerConfig(
            learning_rate=flat["optim.lr"],
            lr_floor=flat["optim.lr_floor"],
            weight_decay=flat["optim.weight_decay"],
        ),
        tail_train=TrainLoopConfig(
            batch_size=flat["tail.batch"],
            max_epochs=flat["tail.epochs"],
            early_stop_patience=flat["tail.patience"],
            validation_fraction=flat["tail.val_fraction"],
            rng_seed=flat["seed"],
        ),
        scheme=scheme,
        share_fraction=flat["share.fraction"],
        seed=flat["seed"],
    )


def config_hash_of(flat: dict) -> str:
    return to_pipeline_config(flat).config_hash()


# ---------------------------------------------------------------------------
# Artifact helpers
# ---------------------------------------------------------------------------

def _artifact(out: str, name: str) -> str:
    return os.path.join(out, name)


def _require(out: str, name: str) -> str:
    path = _artifact(out, name)
    if not os.path.exists(path):
        raise StageDependencyError(
            f"missing artifact {name!r} in {out}; run the earlier stage first")
    return path


def _check_hash(meta: dict, expect: str, name: str) -> None:
    got = meta.get("config_hash")
    if got != expect:
        raise ConfigMismatch(
            f"artifact {name!r} was produced under config {got}, current config is {expect}")


def _write_dataset(path: str, ds: Dataset, expect_hash: str, stage: str) -> None:
    # Container sections are float32 blobs; ids/labels below 2^24 round-trip
    # exactly through that representation.
    sections = {"features": ds.x, "ids": ds.ids.astype(np.float32)[None, :]}
    meta = {"config_hash": expect_hash, "stage": stage,
            "num_classes": ds.num_classes, "has_labels": ds.labels is not None}
    if ds.labels is not None:
        sections["labels"] = ds.labels.astype(np.float32)[None, :]
    write_container(path, sections, meta)


def _read_dataset(path: str, expect_hash: str, name: str) -> Dataset:
    sections, meta = read_container(path)
    _check_hash(meta, expect_hash, name)
    labels = None
    if meta.get("has_labels"):
        labels = sections["labels"].ravel().astype(np.int64)
    return Dataset(
        ids=sections["ids"].ravel().astype(np.int64),
        x=sections["features"].astype(np.float32),
        labels=labels,
        num_classes=int(meta["num_classes"]),
    )


def _load_task_datasets(flat: dict) -> tuple[Dataset, Dataset]:
    """(train, test) for the configured task."""
    cfg = to_pipeline_config(flat)
    if flat["task"] == "synthetic":
        return synth_generate(cfg.task)
    feats, ids, labels = read_features(flat["head.files"][0])
    if labels is None:
        raise InvalidConfig("feature-files task needs labels in the first file")
    num_classes = int(labels.max()) + 1
    pool = Dataset(ids=ids, x=None, labels=labels, num_classes=num_classes)
    n = len(pool)
    order = Rng(flat["seed"]).child("file-task-split").permutation(n)
    n_test = max(1, int(round(n * flat["data.test_fraction"])))
    test = pool.subset(np.sort(order[:n_test]))
    train = pool.subset(np.sort(order[n_test:]))
    return train, test


def _build_file_heads(flat: dict) -> list[FileBackedHead] | None:
    if flat["task"] != "feature-files":
        return None
    heads = []
    for path in flat["head.files"]:
        feats, ids, _ = read_features(path)
        heads.append(FileBackedHead(ids, feats))
    return heads


def _rebuild_system(flat: dict, out: str, need: str) -> TrainedSystem:
    """Reconstruct devices from config and load trained stages up to ``need``."""
    cfg = to_pipeline_config(flat)
    expect = cfg.config_hash()
    train = _read_dataset(_require(out, "train.cefi"), expect, "train.cefi")
    test = _read_dataset(_require(out, "test.cefi"), expect, "test.cefi")
    with open(_require(out, "partition.json"), encoding="utf-8") as fh:
        part_doc = json.load(fh)
    _check_hash(part_doc, expect, "partition.json")

    system = build_system(cfg, heads=_build_file_heads(flat), datasets=(train, test))
    # Partition artifact is authoritative for device membership.
    row_of = {int(sid): i for i, sid in enumerate(train.ids)}
    parts = []
    for k in range(cfg.federation.num_devices):
        ids = part_doc["devices"][str(k)]
        parts.append(train.subset(np.array(sorted(row_of[i] for i in ids))))
    shared_rows = np.array(sorted(row_of[i] for i in part_doc["shared_ids"]))
    system.parts = parts
    system.shared = train.subset(shared_rows).without_labels()
    for k, d in enumerate(system.devices):
        d.local_ids = parts[k].ids
        d.seen_labels = frozenset(int(c) for c in np.unique(parts[k].require_labels()))

    order = ["tails", "ce", "co"]
    needed = order[: order.index(need) + 1] if need in order else []
    for stage in needed:
        path = _require(out, f"{stage}.ckpt")
        sections, meta = read_container(path)
        _check_hash(meta, expect, f"{stage}.ckpt")
        for k, d in enumerate(system.devices):
            stack = {"tails": d.tail, "ce": d.ce, "co": d.co}[stage]
            load_named_params(stack, f"dev{k}/{stage}", sections)
    return system


def _save_stage(system: TrainedSystem, out: str, stage: str, expect: str,
                extra_meta: dict | None = None) -> None:
    sections = {}
    for k, d in enumerate(system.devices):
        stack = {"tails": d.tail, "ce": d.ce, "co": d.co}[stage]
        sections.update(named_params(stack, f"dev{k}/{stage}"))
    meta = {"config_hash": expect, "stage": stage}
    if extra_meta:
        meta.update(extra_meta)
    write_container(_artifact(out, f"{stage}.ckpt"), sections, meta)


# ---------------------------------------------------------------------------
# Stage implementations
# ---------------------------------------------------------------------------

def stage_synth_data(flat: dict, out: str) -> None:
    if flat["task"] != "synthetic":
        raise InvalidConfig("synth-data only applies to task=synthetic; "
                            "feature-files runs take data from head.files")
    expect = config_hash_of(flat)
    train, test = _load_task_datasets(flat)
    _write_dataset(_artifact(out, "train.cefi"), train, expect, "synth-data")
    _write_dataset(_artifact(out, "test.cefi"), test, expect, "synth-data")
    print(f"wrote train.cefi ({len(train)} samples), test.cefi ({len(test)} samples)")


def stage_import_data(flat: dict, out: str) -> None:
    """feature-files variant of synth-data: materialize the id/label pool."""
    expect = config_hash_of(flat)
    train, test = _load_task_datasets(flat)
    for name, ds in (("train.cefi", train), ("test.cefi", test)):
        sections = {"ids": ds.ids.astype(np.float32)[None, :],
                    "labels": ds.labels.astype(np.float32)[None, :],
                    "features": np.zeros((len(ds), 1), dtype=np.float32)}
        write_container(_artifact(out, name), sections,
                        {"config_hash": expect, "stage": "import-data",
                         "num_classes": ds.num_classes, "has_labels": True,
                         "features_external": True})
    print(f"imported ids/labels for {len(train)} train / {len(test)} test samples")


def stage_partition(flat: dict, out: str) -> None:
    from .pipeline import partition_for

    cfg = to_pipeline_config(flat)
    expect = cfg.config_hash()
    train = _read_dataset(_require(out, "train.cefi"), expect, "train.cefi")
    local, shared = holdout_shared(train, cfg.share_fraction, seed=cfg.seed)
    parts = partition_for(cfg, local)
    doc = {
        "config_hash": expect,
        "scheme": cfg.scheme,
        "shared_ids": [int(i) for i in shared.ids],
        "devices": {str(k): [int(i) for i in p.ids] for k, p in enumerate(parts)},
    }
    with open(_artifact(out, "partition.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
    sizes = [len(p) for p in parts]
    print(f"partitioned {len(local)} local samples into {sizes}; {len(shared)} shared")


def stage_pretrain_tails(flat: dict, out: str) -> None:
    expect = config_hash_of(flat)
    system = _rebuild_system(flat, out, need="")
    pretrain_tails(system)
    _save_stage(system, out, "tails", expect)
    print("wrote tails.ckpt")


def stage_train_ce(flat: dict, out: str) -> None:
    expect = config_hash_of(flat)
    system = _rebuild_system(flat, out, need="tails")
    hist = run_train_ce(system)
    _save_stage(system, out, "ce", expect,
                {"epochs_run": hist.epochs_run, "final_loss": hist.epoch_loss[-1]})
    system.trace.write(_artifact(out, "ce_trace.csv"))
    with open(_artifact(out, "ce_history.json"), "w", encoding="utf-8") as fh:
        json.dump({"config_hash": expect, "epoch_loss": hist.epoch_loss,
                   "bytes_per_epoch": hist.bytes_per_epoch}, fh, indent=1)
    print(f"wrote ce.ckpt after {hist.epochs_run} epochs "
          f"(loss {hist.epoch_loss[0]:.4f} -> {hist.epoch_loss[-1]:.4f}, "
          f"{sum(hist.bytes_per_epoch)} bytes moved)")


def stage_train_co(flat: dict, out: str) -> None:
    expect = config_hash_of(flat)
    system = _rebuild_system(flat, out, need="ce")
    run_train_co(system)
    _save_stage(system, out, "co", expect)
    print("wrote co.ckpt (0 bytes moved; distillation is local)")


def stage_infer(flat: dict, out: str) -> None:
    expect = config_hash_of(flat)
    system = _rebuild_system(flat, out, need="co")
    rules = [EnsembleRule(name, seed=flat["seed"]) for name in flat["ensemble.rules"]]
    test = system.test
    meter = CommMeter()
    trace = TraceLog()
    k = len(system.devices)
    header = ["sample_id", "true_label"] + [r.kind for r in rules]
    lines = [",".join(header)]
    truth = test.require_labels()
    for i in range(len(test)):
        origin = system.devices[i % k]
        row = [str(int(test.ids[i])), str(int(truth[i]))]
        for r in rules:
            label, _, _ = federated_infer(
                origin, None if test.x is None else test.x[i], system.devices, r,
                true_label=int(truth[i]) if r.needs_true_label else None,
                sample_id=int(test.ids[i]), meter=meter, trace=trace, sample_index=i)
            row.append(str(label))
        lines.append(",".join(row))
    with open(_artifact(out, "predictions.csv"), "w", encoding="utf-8") as fh:
        fh.write(f"# config_hash={expect}\n")
        fh.write("\n".join(lines) + "\n")
    trace.write(_artifact(out, "infer_trace.csv"))
    with open(_artifact(out, "comm.json"), "w", encoding="utf-8") as fh:
        json.dump({"config_hash": expect, "inference_bytes": meter.bytes["inference"],
                   "samples": len(test), "rules": len(rules)}, fh, indent=1)
    print(f"wrote predictions.csv ({len(test)} samples, "
          f"{meter.bytes['inference']} bytes moved)")


def stage_evaluate(flat: dict, out: str) -> None:
    expect = config_hash_of(flat)
    system = _rebuild_system(flat, out, need="co")
    rules = [EnsembleRule(name, seed=flat["seed"]) for name in flat["ensemble.rules"]]
    cell = evaluate_system(system, rules)
    paths = emit_report([cell], out, config_hash=expect)
    print(f"solo mean {cell.mean_solo:.4f}; "
          + "; ".join(f"{r.kind} {cell.mean_cefi(r.kind):.4f}" for r in rules))
    print(f"oracle {cell.oracle_acc:.4f}; input-sharing {cell.input_sharing_acc:.4f}")
    print("wrote " + ", ".join(sorted(os.path.basename(p) for p in paths.values())))


def stage_theory_check(flat: dict, out: str) -> None:
    expect = config_hash_of(flat)
    system = _rebuild_system(flat, out, need="co")
    equiv = verify_fi_equivalence(system.devices, system.test, seed=flat["seed"])
    z = system.devices[0].embed(
        system.devices[0].head_features(system.test.x, system.test.ids))
    reports = {}
    for d in system.devices:
        rep = verify_epsilon_bound(
            d.co, z, flat["theory.epsilon"],
            TheoryCheckConfig(epsilon=flat["theory.epsilon"],
                              num_samples=flat["theory.samples"]),
            seed=flat["seed"] + d.device_id)
        reports[d.device_id] = {
            "max_deviation": rep.max_deviation, "bound": rep.bound,
            "deviation_violations": rep.deviation_violations,
            "margin_flips": rep.margin_flips, "margin_cases": rep.margin_cases,
        }
    doc = {"config_hash": expect,
           "fi_equivalence_match": equiv.match_fraction,
           "epsilon_bound": reports}
    with open(_artifact(out, "theory.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
    shift_invariant = {k: v for k, v in equiv.match_fraction.items() if k != "min_energy"}
    ok = all(v == 1.0 for v in shift_invariant.values())
    violations = sum(r["deviation_violations"] + r["margin_flips"] for r in reports.values())
    print(f"equivalence exact-match: {equiv.match_fraction}")
    print(f"perturbation-bound violations: {violations}")
    if not ok or violations:
        raise CefiError("theory check failed")
    print("wrote theory.json")


def stage_report(flat: dict, out: str, inputs: list[str]) -> None:
    if not inputs:
        inputs = [_require(out, "results.csv")]
    rows = []
    for path in inputs:
        if not os.path.exists(path):
            raise StageDependencyError(f"missing results file {path!r}")
        rows.extend(read_results_csv(path))
    # Rebuild minimal cells grouped by (scheme, seed) for the summary writer.
    cells: dict[tuple, CellResult] = {}
    for r in rows:
        key = (r["scheme"], int(r["seed"]))
        cell = cells.get(key)
        if cell is None:
            cell = CellResult(
                scheme=r["scheme"], seed=int(r["seed"]), config_hash=r["config_hash"],
                solo_acc=[float(r["mean_solo"])], cefi_acc={},
                input_sharing_acc=float(r["input_sharing"]),
                oracle_acc=float(r["oracle"]), edge_ensemble_acc=None,
                inference_bytes_per_sample=int(r["inference_bytes_per_sample"]),
                ce_bytes_per_epoch=0)
            cells[key] = cell
        cell.cefi_acc.setdefault(r["rule"], []).append(float(r["accuracy"]))
    paths = emit_report(list(cells.values()), out, config_hash=config_hash_of(flat))
    print(f"aggregated {len(rows)} rows from {len(inputs)} file(s) into "
          + os.path.basename(paths["summary"]))


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cefi",
        description="Consensus-embedding federated inference engine")
    parser.add_argument("stage", choices=STAGES)
    parser.add_argument("inputs", nargs="*",
                        help="for 'report': results.csv files to aggregate")
    parser.add_argument("--config", default=None, help="flat JSON config file")
    parser.add_argument("--out", required=True, help="artifact directory")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--rule", action="append", default=None,
                        help="ensemble rule (repeatable); overrides ensemble.rules")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_intermixed_args(argv)
    try:
        flat = load_config(args.config, seed_override=args.seed,
                           rules_override=args.rule)
    except InvalidConfig as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        os.makedirs(args.out, exist_ok=True)
        if args.stage == "synth-data":
            if flat["task"] == "feature-files":
                stage_import_data(flat, args.out)
            else:
                stage_synth_data(flat, args.out)
        elif args.stage == "partition":
            stage_partition(flat, args.out)
        elif args.stage == "pretrain-tails":
            stage_pretrain_tails(flat, args.out)
        elif args.stage == "train-ce":
            stage_train_ce(flat, args.out)
        elif args.stage == "train-co":
            stage_train_co(flat, args.out)
        elif args.stage == "infer":
            stage_infer(flat, args.out)
        elif args.stage == "evaluate":
            stage_evaluate(flat, args.out)
        elif args.stage == "theory-check":
            stage_theory_check(flat, args.out)
        elif args.stage == "report":
            stage_report(flat, args.out, args.inputs)
        return EXIT_OK
    except (StageDependencyError, ConfigMismatch) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STAGE
    except InvalidConfig as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CefiError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
