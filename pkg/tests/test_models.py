"""Device architecture contracts: determinism, dimensions, skip connection,
the two-layer output form, and head behavior."""

import numpy as np
import pytest

from cefi.data import SyntheticTaskConfig, synth_generate
from cefi.errors import InvalidConfig, ShapeError
from cefi.models import (
    ArchitectureConfig,
    FileBackedHead,
    SyntheticHead,
    build_device,
    co_weight_matrices,
    make_ce_layer,
)
from cefi.nn import Linear, TrainLoopConfig, train_supervised
from cefi.numerics import Rng, spectral_norm


@pytest.fixture(scope="module")
def device():
    return build_device(0, input_dim=16, arch=ArchitectureConfig(head_dim=24), rng=Rng(3))


class TestHeads:
    def test_synthetic_head_deterministic_per_sample(self):
        head = SyntheticHead(8, 12, Rng(1).child("h"))
        x = Rng(2).normal((5, 8))
        np.testing.assert_array_equal(head.features(x), head.features(x))

    def test_distinct_seeds_give_misaligned_feature_spaces(self):
        a = SyntheticHead(8, 12, Rng(1).child("h", 0))
        b = SyntheticHead(8, 12, Rng(1).child("h", 1))
        x = Rng(2).normal((50, 8))
        gap = np.linalg.norm(a.features(x) - b.features(x), axis=1)
        scale = np.linalg.norm(a.features(x), axis=1).mean()
        assert gap.mean() > 0.5 * scale  # far apart relative to feature size

    def test_file_backed_lookup_by_id(self):
        ids = np.array([7, 3, 11])
        feats = Rng(4).normal((3, 6))
        head = FileBackedHead(ids, feats)
        got = head.features(ids=np.array([11, 7]))
        np.testing.assert_array_equal(got, feats[[2, 0]])

    def test_file_backed_missing_id_rejected(self):
        head = FileBackedHead(np.array([1, 2]), np.ones((2, 4), dtype=np.float32))
        with pytest.raises(InvalidConfig):
            head.features(ids=np.array([99]))


class TestEmbed:
    def test_eval_mode_repeatable_bit_identical(self, device):
        feats = Rng(5).normal((10, 24))
        np.testing.assert_array_equal(device.embed(feats), device.embed(feats))

    def test_batch_order_preserved(self, device):
        feats = Rng(6).normal((12, 24))
        perm = Rng(7).permutation(12)
        np.testing.assert_array_equal(device.embed(feats)[perm], device.embed(feats[perm]))

    def test_output_dim_uniform_across_head_dims(self):
        for head_dim in (24, 256, 300):
            d = build_device(0, 16, ArchitectureConfig(head_dim=head_dim), Rng(8))
            feats = Rng(9).normal((4, head_dim))
            assert d.embed(feats).shape == (4, 256)

    def test_dim_mismatch_rejected(self, device):
        with pytest.raises(ShapeError):
            device.embed(Rng(10).normal((3, 25)))

    def test_skip_connection_with_zeroed_inner_path(self):
        ce = make_ce_layer(24, Rng(11).child("ce"))
        fc2 = [l for l in ce.inner.layers if isinstance(l, Linear)][1]
        fc2.w.value[...] = 0.0
        fc2.b.value[...] = 0.0
        x = Rng(12).normal((6, 24))
        want = ce.norm.forward(ce.projection.forward(x, "eval"), "eval")
        got = ce.forward(x, "eval")
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_identity_projection_when_dims_match(self):
        ce = make_ce_layer(256, Rng(13).child("ce"))
        assert ce.projection is None


class TestCoPredict:
    def test_zero_initialized_head_gives_zero_logits(self, device):
        for p in device.co.params():
            p.value[...] = 0.0
        z = Rng(14).normal((5, 256))
        np.testing.assert_array_equal(device.co_predict(z), np.zeros((5, 10), dtype=np.float32))

    def test_eval_equals_two_layer_closed_form(self):
        d = build_device(1, 16, ArchitectureConfig(head_dim=24), Rng(15))
        z = Rng(16).normal((8, 256))
        linears = [l for l in d.co.layers if isinstance(l, Linear)]
        w1, b1 = linears[0].w.value, linears[0].b.value
        w2, b2 = linears[1].w.value, linears[1].b.value
        closed = np.maximum(z @ w1 + b1, 0) @ w2 + b2
        np.testing.assert_allclose(d.co_predict(z), closed, atol=1e-5)

    def test_batch_order_preserved(self, device):
        z = Rng(17).normal((9, 256))
        perm = Rng(18).permutation(9)
        np.testing.assert_array_equal(device.co_predict(z)[perm], device.co_predict(z[perm]))

    def test_dim_mismatch_rejected(self, device):
        with pytest.raises(ShapeError):
            device.co_predict(Rng(19).normal((2, 128)))

    def test_lipschitz_bound_on_1000_random_pairs(self):
        d = build_device(2, 16, ArchitectureConfig(head_dim=24), Rng(20))
        w1, w2 = co_weight_matrices(d.co)
        lip = spectral_norm(w1.astype(np.float64)).value * \
            spectral_norm(w2.astype(np.float64)).value
        rng = Rng(21)
        z1 = rng.normal((1000, 256))
        z2 = rng.normal((1000, 256))
        g1 = d.co_predict(z1).astype(np.float64)
        g2 = d.co_predict(z2).astype(np.float64)
        lhs = np.linalg.norm(g1 - g2, axis=1)
        rhs = lip * np.linalg.norm(z1.astype(np.float64) - z2.astype(np.float64), axis=1)
        assert np.all(lhs <= rhs + 1e-6)


class TestSoloPredict:
    def test_deterministic_in_eval(self, device):
        feats = Rng(22).normal((7, 24))
        np.testing.assert_array_equal(device.solo_predict(feats), device.solo_predict(feats))

    def test_seen_classes_beat_unseen_after_local_pretraining(self):
        # A device trained on 4 of 10 classes spends its accuracy only there.
        train, test = synth_generate(SyntheticTaskConfig(
            train_per_class=120, test_per_class=40, seed=33))
        d = build_device(0, 64, ArchitectureConfig(), Rng(34))
        seen = train.labels < 4
        feats = d.head_features(train.x[seen], train.ids[seen])
        train_supervised(d.tail, feats, train.labels[seen],
                         TrainLoopConfig(batch_size=64, max_epochs=10, rng_seed=1))
        logits = d.solo_predict(d.head_features(test.x, test.ids))
        pred = logits.argmax(axis=1)
        seen_mask = test.labels < 4
        acc_seen = (pred[seen_mask] == test.labels[seen_mask]).mean()
        acc_unseen = (pred[~seen_mask] == test.labels[~seen_mask]).mean()
        assert acc_seen > acc_unseen + 0.3
        assert acc_unseen < 0.05  # it cannot predict classes it never saw
