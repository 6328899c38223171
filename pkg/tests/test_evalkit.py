"""Baselines, theory checks, bottleneck harness, and report round trips."""

import numpy as np
import pytest

from cefi.data import SyntheticTaskConfig
from cefi.ensemble import EnsembleRule
from cefi.errors import IoError
from cefi.evalkit import (
    TheoryCheckConfig,
    emit_report,
    install_ideal_outputs,
    clear_ideal_outputs,
    read_results_csv,
    run_bottleneck_suite,
    run_edge_ensemble,
    run_input_sharing_fi,
    run_solo_baseline,
    verify_epsilon_bound,
    verify_fi_equivalence,
)
from cefi.federation import FederationConfig
from cefi.models import ArchitectureConfig, build_device, co_weight_matrices, make_co_layer
from cefi.nn import Linear, zero_grads, Adam, OptimizerConfig
from cefi.numerics import Rng, softmax, spectral_norm
from cefi.pipeline import (
    PipelineConfig,
    build_system,
    evaluate_system,
    pretrain_tails,
    run_train_ce,
    run_train_co,
)


def small_config(seed=0, scheme="moderate"):
    return PipelineConfig(
        task=SyntheticTaskConfig(train_per_class=60, test_per_class=20, seed=seed),
        arch=ArchitectureConfig(tail_hidden=128, ce_hidden=64, co_hidden=64),
        federation=FederationConfig(seed=seed, ce_epochs=6, ce_batch=128,
                                    co_epochs=6, co_batch=32),
        scheme=scheme,
        seed=seed,
    )


@pytest.fixture(scope="module")
def trained():
    system = build_system(small_config())
    pretrain_tails(system)
    run_train_ce(system)
    run_train_co(system)
    return system


class TestBaselines:
    def test_solo_sanity_full_coverage_device(self):
        # A device trained on all classes of a clearly separable task is
        # near-perfect.
        from cefi.data import synth_generate
        from cefi.models import build_device
        from cefi.nn import TrainLoopConfig, train_supervised

        task = SyntheticTaskConfig(class_separation=8.0, train_per_class=150,
                                   test_per_class=50, seed=0)
        train, test = synth_generate(task)
        dev = build_device(0, 64, ArchitectureConfig(tail_hidden=256), Rng(0))
        feats = dev.head_features(train.x, train.ids)
        train_supervised(dev.tail, feats, train.require_labels(),
                         TrainLoopConfig(batch_size=64, max_epochs=20, rng_seed=1))
        acc = run_solo_baseline([dev], test)[0]
        assert acc > 0.95

    def test_solo_untouched_by_cooperative_training(self, trained):
        before = [d.solo_predict(d.head_features(trained.test.x, trained.test.ids))
                  for d in trained.devices]
        run_train_co(trained)  # retrain cooperative heads again
        after = [d.solo_predict(d.head_features(trained.test.x, trained.test.ids))
                 for d in trained.devices]
        for b, a in zip(before, after):
            np.testing.assert_array_equal(b, a)

    def test_input_sharing_beats_best_solo_on_disjoint(self):
        cfg = small_config(seed=1, scheme="disjoint")
        system = build_system(cfg)
        pretrain_tails(system)
        solo = run_solo_baseline(system.devices, system.test)
        fi = run_input_sharing_fi(system.devices, system.test)
        assert fi >= max(solo)  # complementary class coverage

    def test_input_sharing_k1_equals_solo(self):
        cfg = small_config(seed=2)
        system = build_system(cfg)
        pretrain_tails(system)
        one = [system.devices[0]]
        assert run_input_sharing_fi(one, system.test) == pytest.approx(
            run_solo_baseline(one, system.test)[0])

    def test_edge_ensemble_runs_and_beats_solo_average_on_disjoint(self):
        cfg = small_config(seed=3, scheme="disjoint")
        system = build_system(cfg)
        pretrain_tails(system)
        solo = run_solo_baseline(system.devices, system.test)
        edge = run_edge_ensemble(cfg, system.parts, system.test)
        assert edge >= np.mean(solo)


class TestFiEquivalence:
    def test_shift_invariant_rules_match_exactly(self, trained):
        report = verify_fi_equivalence(trained.devices, trained.test,
                                       shift_scale=5.0, seed=7)
        for kind in ("soft_vote", "hard_vote", "max_softmax", "min_entropy", "logits_avg"):
            assert report.match_fraction[kind] == 1.0, kind

    def test_min_energy_can_disagree_under_shifts(self, trained):
        report = verify_fi_equivalence(trained.devices, trained.test,
                                       shift_scale=5.0, seed=7)
        assert report.match_fraction["min_energy"] <= 1.0  # reported, not required

    def test_min_energy_matches_with_zero_shift(self, trained):
        report = verify_fi_equivalence(trained.devices, trained.test,
                                       shift_scale=0.0, seed=7)
        assert report.match_fraction["min_energy"] == 1.0

    def test_overrides_cleared_after_run(self, trained):
        verify_fi_equivalence(trained.devices, trained.test, seed=1)
        for d in trained.devices:
            assert d.co_override is None
            assert d.embedding_override is None


class TestEpsilonBound:
    def test_zero_perturbation_zero_deviation(self, trained):
        co = trained.devices[0].co
        z = Rng(1).normal((4, 256))
        rep = verify_epsilon_bound(co, z, epsilon=1e-12,
                                   cfg=TheoryCheckConfig(num_samples=8))
        assert rep.deviation_violations == 0
        assert rep.max_deviation <= rep.bound + 1e-9

    def test_no_violations_random_sweep(self, trained):
        co = trained.devices[1].co
        z = Rng(2).normal((50, 256))
        rep = verify_epsilon_bound(co, z, epsilon=0.05,
                                   cfg=TheoryCheckConfig(num_samples=500), seed=3)
        assert rep.deviation_violations == 0
        assert rep.margin_flips == 0
        assert rep.max_deviation <= rep.bound

    def test_linear_regime_attains_logit_bound_along_top_direction(self):
        # Large positive biases keep every ReLU active, making the head
        # affine; a step along the top right-singular direction of W2 @ W1
        # then moves the logits by exactly sigma_max(W2 W1) * epsilon, which
        # is tight when the product matrix realizes its factors' norms.
        co = make_co_layer(num_classes=6, rng=Rng(4).child("co"), hidden=32)
        linears = [l for l in co.layers if isinstance(l, Linear)]
        linears[0].b.value[...] = 50.0
        w1 = linears[0].w.value.astype(np.float64)
        w2 = linears[1].w.value.astype(np.float64)
        prod = w1 @ w2
        u, s, vt = np.linalg.svd(prod)
        eps = 0.01
        z = Rng(5).normal((1, 256)) * 0.01
        delta = (eps * u[:, 0]).astype(np.float32)
        g0 = co.forward(z, "eval").astype(np.float64)
        g1 = co.forward(z + delta, "eval").astype(np.float64)
        moved = np.linalg.norm(g1 - g0)
        assert moved == pytest.approx(s[0] * eps, rel=1e-3)
        lip = spectral_norm(w1).value * spectral_norm(w2).value
        assert moved <= lip * eps * (1 + 1e-6)


class TestBottleneck:
    def test_unify_helps_and_ood_is_minor(self, trained):
        report = run_bottleneck_suite(trained)
        assert all(d >= -0.02 for d in report.deltas["unify"])
        assert all(abs(d) <= 0.1 for d in report.deltas["ood_exclusion"])
        for both, ood in zip(report.deltas["both"], report.deltas["ood_exclusion"]):
            assert both >= ood - 0.05

    def test_baseline_restored_after_suite(self, trained):
        from cefi.pipeline import cefi_logits
        before = cefi_logits(trained, 0, trained.test)
        run_bottleneck_suite(trained)
        after = cefi_logits(trained, 0, trained.test)
        np.testing.assert_array_equal(before, after)


class TestReports:
    def test_round_trip(self, tmp_path, trained):
        cell = evaluate_system(trained, [EnsembleRule("min_energy"), EnsembleRule("soft_vote")])
        paths = emit_report([cell], tmp_path / "out", config_hash="deadbeef")
        rows = read_results_csv(paths["results"])
        assert len(rows) == 2 * 3  # two rules, three origins
        assert {r["rule"] for r in rows} == {"min_energy", "soft_vote"}
        accs = [float(r["accuracy"]) for r in rows if r["rule"] == "min_energy"]
        assert accs == pytest.approx(cell.cefi_acc["min_energy"], abs=1e-6)

    def test_empty_results_header_only(self, tmp_path):
        paths = emit_report([], tmp_path / "empty")
        rows = read_results_csv(paths["results"])
        assert rows == []
        with open(paths["results"]) as fh:
            assert fh.readline().startswith("scheme,")

    def test_summary_uses_sample_std(self, tmp_path, trained):
        cellA = evaluate_system(trained, [EnsembleRule("min_energy")])
        cellB = evaluate_system(trained, [EnsembleRule("min_energy")])
        cellB.seed = 1
        cellB.cefi_acc = {"min_energy": [a - 0.05 for a in cellB.cefi_acc["min_energy"]]}
        paths = emit_report([cellA, cellB], tmp_path / "sum")
        summary = {}
        with open(paths["summary"]) as fh:
            next(fh)
            for line in fh:
                scheme, series, mean, std, n = line.strip().split(",")
                summary[(scheme, series)] = (float(mean), float(std), int(n))
        key = (cellA.scheme, "min_energy")
        vals = np.array([cellA.mean_cefi("min_energy"), cellB.mean_cefi("min_energy")])
        assert summary[key][0] == pytest.approx(vals.mean(), abs=1e-6)
        assert summary[key][1] == pytest.approx(vals.std(ddof=1), abs=1e-6)

    def test_unwritable_path_raises_io_error(self, trained):
        cell = evaluate_system(trained, [EnsembleRule("min_energy")])
        with pytest.raises(IoError):
            emit_report([cell], "/proc/definitely/not/writable")
