"""Engine tests: shape validation, forward/backward correctness against a
central finite-difference oracle, SGD arithmetic, head replacement, and
feature-map / likelihood extraction."""

import numpy as np
import pytest

from reptrain import nn
from conftest import cross_entropy_of


def finite_difference_grads(net, x, targets, eps):
    """Central differences on every trainable parameter."""
    out = {}
    for li, (spec, params) in enumerate(zip(net.layers, net.params)):
        if not getattr(spec, "trainable", False):
            continue
        for key, p in params.items():
            fd = np.zeros_like(p)
            it = np.nditer(p, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = p[idx]
                p[idx] = orig + eps
                lp = cross_entropy_of(net, x, targets)
                p[idx] = orig - eps
                lm = cross_entropy_of(net, x, targets)
                p[idx] = orig
                fd[idx] = (lp - lm) / (2 * eps)
            out[(li, key)] = fd
    return out


def max_relative_error(analytic, numeric):
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float((np.abs(analytic - numeric) / scale).max())


class TestBuild:
    def test_deterministic_init(self, tiny_layers):
        a = nn.build_network(tiny_layers, [2, 3, 4], seed=42, input_shape=(1, 8, 8))
        b = nn.build_network(tiny_layers, [2, 3, 4], seed=42, input_shape=(1, 8, 8))
        for pa, pb in zip(a.params, b.params):
            for key in pa:
                assert np.array_equal(pa[key], pb[key])

    def test_different_seed_differs(self, tiny_layers):
        a = nn.build_network(tiny_layers, [2, 3, 4], seed=1, input_shape=(1, 8, 8))
        b = nn.build_network(tiny_layers, [2, 3, 4], seed=2, input_shape=(1, 8, 8))
        assert not np.array_equal(a.params[0]["w"], b.params[0]["w"])

    def test_num_classes_from_scores(self):
        net = nn.build_network(
            (nn.Flatten(), nn.Dense(4, 3)), [2, 3, 4], seed=0, input_shape=(4, 1, 1)
        )
        assert net.num_classes == 3

    def test_scores_not_increasing_rejected(self):
        with pytest.raises(nn.BuildError, match="not strictly increasing"):
            nn.build_network(
                (nn.Flatten(), nn.Dense(4, 3)), [3, 3, 4], seed=0, input_shape=(4, 1, 1)
            )

    def test_shape_mismatch_names_layer_pair(self):
        layers = (nn.Conv(3, 4, 3, padding=1), nn.Flatten(), nn.Dense(99, 2))
        with pytest.raises(nn.BuildError, match=r"layer 1 .*-> layer 2"):
            nn.build_network(layers, [1, 2], seed=0, input_shape=(3, 4, 4))

    def test_head_width_must_match_scores(self):
        with pytest.raises(nn.BuildError, match="head emits"):
            nn.build_network(
                (nn.Flatten(), nn.Dense(4, 3)), [2, 3], seed=0, input_shape=(4, 1, 1)
            )

    def test_kernel_larger_than_input_rejected(self):
        with pytest.raises(nn.BuildError, match="kernel larger"):
            nn.build_network(
                (nn.Conv(1, 1, 9), nn.Flatten(), nn.Dense(1, 2)),
                [2, 3],
                seed=0,
                input_shape=(1, 4, 4),
            )


class TestForward:
    def test_identity_conv_preserves_input(self):
        net = nn.build_network(
            (nn.Conv(1, 1, 1), nn.Flatten(), nn.Dense(16, 2)),
            [2, 3],
            seed=0,
            input_shape=(1, 4, 4),
        )
        net.params[0]["w"] = np.ones((1, 1, 1, 1), dtype=np.float32)
        net.params[0]["b"] = np.zeros(1, dtype=np.float32)
        x = np.random.default_rng(0).uniform(0, 1, (2, 1, 4, 4)).astype(np.float32)
        acts = nn.forward(net, x)
        assert np.array_equal(acts.outputs[0], x)

    def test_identity_dense_preserves_input(self):
        net = nn.build_network(
            (nn.Flatten(), nn.Dense(3, 3)), [2, 3, 4], seed=0, input_shape=(3, 1, 1)
        )
        net.params[1]["w"] = np.eye(3, dtype=np.float32)
        net.params[1]["b"] = np.zeros(3, dtype=np.float32)
        x = np.random.default_rng(1).normal(size=(5, 3, 1, 1)).astype(np.float32)
        acts = nn.forward(net, x)
        assert np.allclose(acts.outputs[-1], x.reshape(5, 3), atol=1e-7)

    def test_softmax_rows_sum_to_one(self, tiny_net):
        rng = np.random.default_rng(3)
        for scale in (1.0, 10.0, 1000.0):
            x = (rng.uniform(0, 1, (4, 1, 8, 8)) * scale).astype(np.float32)
            acts = nn.forward(tiny_net, x)
            assert np.abs(acts.probs.sum(axis=1) - 1.0).max() < 1e-6

    def test_softmax_extreme_logits_stable(self):
        probs = nn.softmax(np.array([[1e4, 0.0, -1e4], [-1e4, -1e4, -1e4]], dtype=np.float32))
        assert np.isfinite(probs).all()
        assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-6

    def test_shape_mismatch_reports_expected_and_actual(self, tiny_net):
        with pytest.raises(ValueError, match=r"\(7, 1, 4, 4\).*\(N, 1, 8, 8\)"):
            nn.forward(tiny_net, np.zeros((7, 1, 4, 4), dtype=np.float32))

    def test_maxpool_takes_window_max(self):
        net = nn.build_network(
            (nn.MaxPool(2, 2), nn.Flatten(), nn.Dense(4, 2)),
            [2, 3],
            seed=0,
            input_shape=(1, 4, 4),
        )
        x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
        acts = nn.forward(net, x)
        assert np.array_equal(acts.outputs[0][0, 0], [[5, 7], [13, 15]])


class TestBackward:
    def test_gradients_match_finite_differences_eps_1e3(self, tiny_layers):
        """The documented oracle case: 2-conv + 1-dense on 8x8 inputs,
        central differences with epsilon 1e-3."""
        net = nn.build_network(
            tiny_layers, [2, 3, 4], seed=0, input_shape=(1, 8, 8), dtype=np.float64
        )
        rng = np.random.default_rng(0)
        x = rng.uniform(0, 1, (3, 1, 8, 8))
        targets = rng.integers(0, 3, 3)
        grads = nn.backward(net, nn.forward(net, x), targets)
        fd = finite_difference_grads(net, x, targets, eps=1e-3)
        worst = max(
            max_relative_error(grads.by_layer[li][key], fd[(li, key)]) for li, key in fd
        )
        assert worst < 1e-3

    @pytest.mark.parametrize("seed", range(6))
    def test_gradients_match_finite_differences_random_nets(self, seed):
        rng = np.random.default_rng(seed)
        c1, c2 = int(rng.integers(2, 4)), int(rng.integers(2, 5))
        n_out = int(rng.integers(2, 5))
        layers = (
            nn.Conv(1, c1, 3, stride=1, padding=1),
            nn.ReLU(),
            nn.MaxPool(2, 2),
            nn.Conv(c1, c2, 3, stride=1, padding=1),
            nn.ReLU(),
            nn.Flatten(),
            nn.Dense(c2 * 16, n_out),
        )
        net = nn.build_network(
            layers, list(range(n_out)), seed=seed, input_shape=(1, 8, 8), dtype=np.float64
        )
        for p in net.params:
            if "b" in p:
                p["b"] += rng.uniform(-0.1, 0.1, p["b"].shape)
        x = rng.uniform(0, 1, (2, 1, 8, 8))
        targets = rng.integers(0, n_out, 2)
        grads = nn.backward(net, nn.forward(net, x), targets)
        fd = finite_difference_grads(net, x, targets, eps=1e-5)
        worst = max(
            max_relative_error(grads.by_layer[li][key], fd[(li, key)]) for li, key in fd
        )
        assert worst < 1e-3

    def test_frozen_layer_gets_no_gradient(self, tiny_layers):
        frozen = (nn.Conv(1, 2, 3, 1, 1, trainable=False),) + tiny_layers[1:]
        net = nn.build_network(frozen, [2, 3, 4], seed=0, input_shape=(1, 8, 8))
        x = np.random.default_rng(0).uniform(0, 1, (2, 1, 8, 8)).astype(np.float32)
        grads = nn.backward(net, nn.forward(net, x), [0, 1])
        assert grads.by_layer[0] is None
        assert grads.by_layer[-1] is not None

    def test_one_hot_prediction_gives_zero_loss(self):
        net = nn.build_network(
            (nn.Flatten(), nn.Dense(3, 3)), [2, 3, 4], seed=0, input_shape=(3, 1, 1)
        )
        net.params[1]["w"] = np.zeros((3, 3), dtype=np.float32)
        net.params[1]["b"] = np.array([100.0, 0.0, 0.0], dtype=np.float32)
        x = np.zeros((1, 3, 1, 1), dtype=np.float32)
        grads = nn.backward(net, nn.forward(net, x), [0])
        assert grads.loss == 0.0

    def test_target_out_of_range_rejected(self, tiny_net):
        x = np.zeros((1, 1, 8, 8), dtype=np.float32)
        acts = nn.forward(tiny_net, x)
        with pytest.raises(ValueError, match="out of range"):
            nn.backward(tiny_net, acts, [3])

    def test_loss_is_mean_cross_entropy(self, tiny_net):
        rng = np.random.default_rng(5)
        x = rng.uniform(0, 1, (4, 1, 8, 8)).astype(np.float32)
        targets = [0, 1, 2, 0]
        acts = nn.forward(tiny_net, x)
        grads = nn.backward(tiny_net, acts, targets)
        assert grads.loss == pytest.approx(cross_entropy_of(tiny_net, x, targets), rel=1e-9)


class TestSgd:
    def _scalar_net(self, w):
        net = nn.build_network(
            (nn.Flatten(), nn.Dense(1, 2)), [2, 3], seed=0, input_shape=(1, 1, 1)
        )
        net.params[1]["w"] = np.array([[w, 0.0]], dtype=np.float32)
        return net

    def _grads_for(self, net, wgrad):
        g = {"w": np.array([[wgrad, 0.0]], dtype=np.float32), "b": np.zeros(2, dtype=np.float32)}
        return nn.Gradients(by_layer=[None, g], loss=0.0)

    def test_zero_lr_keeps_params(self, tiny_net):
        x = np.random.default_rng(0).uniform(0, 1, (2, 1, 8, 8)).astype(np.float32)
        before = [{k: v.copy() for k, v in p.items()} for p in tiny_net.params]
        grads = nn.backward(tiny_net, nn.forward(tiny_net, x), [0, 1])
        nn.sgd_step(tiny_net, grads, lr=0.0)
        for pb, pa in zip(before, tiny_net.params):
            for key in pb:
                assert np.array_equal(pb[key], pa[key])

    def test_plain_step_arithmetic(self):
        net = self._scalar_net(1.0)
        nn.sgd_step(net, self._grads_for(net, 2.0), lr=0.1, momentum=0.0)
        assert net.params[1]["w"][0, 0] == pytest.approx(0.8, abs=1e-7)

    def test_momentum_accumulates(self):
        net = self._scalar_net(0.0)
        g = self._grads_for(net, 1.0)
        v = nn.sgd_step(net, g, lr=0.1, momentum=0.9)
        first = abs(0.0 - net.params[1]["w"][0, 0])
        w1 = net.params[1]["w"][0, 0]
        nn.sgd_step(net, g, lr=0.1, momentum=0.9, velocity=v)
        second = abs(w1 - net.params[1]["w"][0, 0])
        assert second > first
        assert second == pytest.approx(0.1 * 1.9, abs=1e-7)

    def test_frozen_params_untouched(self, tiny_layers):
        frozen = (nn.Conv(1, 2, 3, 1, 1, trainable=False),) + tiny_layers[1:]
        net = nn.build_network(frozen, [2, 3, 4], seed=0, input_shape=(1, 8, 8))
        before = net.params[0]["w"].copy()
        x = np.random.default_rng(0).uniform(0, 1, (2, 1, 8, 8)).astype(np.float32)
        grads = nn.backward(net, nn.forward(net, x), [0, 1])
        nn.sgd_step(net, grads, lr=0.5)
        assert np.array_equal(before, net.params[0]["w"])


class TestReplaceHead:
    def test_preserves_earlier_params_bitwise(self, tiny_net):
        out = nn.replace_head(tiny_net, [2, 3, 4, 5, 6, 7, 8, 9], seed=5)
        for pa, pb in zip(tiny_net.params[:-1], out.params[:-1]):
            for key in pa:
                assert np.array_equal(pa[key], pb[key])
        assert out.num_classes == 8
        assert out.layers[-1].out_features == 8

    def test_head_reinit_is_seed_reproducible(self, tiny_net):
        a = nn.replace_head(nn.replace_head(tiny_net, [1, 2], seed=9), [2, 3, 4], seed=3)
        b = nn.replace_head(tiny_net, [2, 3, 4], seed=3)
        assert np.array_equal(a.params[-1]["w"], b.params[-1]["w"])
        assert np.array_equal(a.params[-1]["b"], b.params[-1]["b"])

    def test_paper_scale_head(self, tiny_net):
        out = nn.replace_head(tiny_net, range(2, 10), seed=0)
        assert out.num_classes == 8
        assert out.class_scores == (2, 3, 4, 5, 6, 7, 8, 9)


class TestInspection:
    def test_conv1_map_count_and_shape(self):
        net = nn.build_network(nn.default_architecture(8), range(2, 10), seed=1)
        image = np.random.default_rng(0).uniform(0, 1, (32, 32, 3)).astype(np.float32)
        maps = nn.conv1_feature_maps(net, image)
        assert len(maps) == 16
        assert all(m.shape == (32, 32) for m in maps)

    def test_zero_image_zero_bias_gives_zero_maps(self):
        net = nn.build_network(nn.default_architecture(8), range(2, 10), seed=1)
        maps = nn.conv1_feature_maps(net, np.zeros((32, 32, 3), dtype=np.float32))
        assert all(not m.any() for m in maps)

    def test_identical_nets_identical_maps(self):
        a = nn.build_network(nn.default_architecture(8), range(2, 10), seed=4)
        b = nn.build_network(nn.default_architecture(8), range(2, 10), seed=4)
        image = np.random.default_rng(2).uniform(0, 1, (32, 32, 3)).astype(np.float32)
        for ma, mb in zip(nn.conv1_feature_maps(a, image), nn.conv1_feature_maps(b, image)):
            assert np.array_equal(ma, mb)

    def test_post_activation_rectifies(self, tiny_net):
        image = np.random.default_rng(3).uniform(0, 1, (8, 8, 1)).astype(np.float32)
        pre = nn.conv1_feature_maps(tiny_net, image, post_activation=False)
        post = nn.conv1_feature_maps(tiny_net, image, post_activation=True)
        for mp, mq in zip(pre, post):
            assert np.array_equal(np.maximum(mp, 0), mq)

    def test_no_conv_layer_is_an_error(self):
        net = nn.build_network(
            (nn.Flatten(), nn.Dense(4, 2)), [2, 3], seed=0, input_shape=(4, 1, 1)
        )
        with pytest.raises(ValueError, match="no convolution"):
            nn.conv1_feature_maps(net, np.zeros((1, 2, 2), dtype=np.float32))

    def test_fc_likelihood_closed_form(self):
        """sigmoid([2, 0, -2]) computed independently as 1/(1+e^-x)."""
        net = nn.build_network(
            (nn.Flatten(), nn.Dense(1, 3)), [2, 3, 4], seed=0, input_shape=(1, 1, 1)
        )
        net.params[1]["w"] = np.zeros((1, 3), dtype=np.float32)
        net.params[1]["b"] = np.array([2.0, 0.0, -2.0], dtype=np.float32)
        values = nn.fc_likelihoods(net, np.zeros((1, 1, 1), dtype=np.float32))
        expected = 1.0 / (1.0 + np.exp(-np.array([2.0, 0.0, -2.0])))
        assert np.abs(values - expected).max() < 1e-4
        assert values == pytest.approx([0.8808, 0.5, 0.1192], abs=1e-4)
        assert values[1] == 0.5

    def test_fc_likelihoods_strictly_inside_unit_interval(self, tiny_net):
        rng = np.random.default_rng(8)
        for _ in range(20):
            image = rng.uniform(0, 1, (8, 8, 1)).astype(np.float32)
            values = nn.fc_likelihoods(tiny_net, image)
            assert (values > 0).all() and (values < 1).all()

    def test_fc_likelihoods_monotone_in_logit(self):
        net = nn.build_network(
            (nn.Flatten(), nn.Dense(1, 2)), [2, 3], seed=0, input_shape=(1, 1, 1)
        )
        net.params[1]["w"] = np.array([[1.0, 0.0]], dtype=np.float32)
        image = np.ones((1, 1, 1), dtype=np.float32)
        lows, highs = [], []
        for b in np.linspace(-4, 4, 9):
            net.params[1]["b"] = np.array([b, 0.0], dtype=np.float32)
            lows.append(nn.fc_likelihoods(net, image)[0])
        assert all(a < b for a, b in zip(lows, lows[1:]))

    def test_fc_likelihoods_softmax_mode(self, tiny_net):
        image = np.random.default_rng(9).uniform(0, 1, (8, 8, 1)).astype(np.float32)
        probs = nn.fc_likelihoods(tiny_net, image, use_softmax=True)
        assert probs.sum() == pytest.approx(1.0, abs=1e-6)
