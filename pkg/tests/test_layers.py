"""Pooling fusion, channel gate, and model construction."""

import numpy as np
import pytest

from oracles import fd_gradient, rel_err

from pfnn.autodiff import ShapeError, Tensor, backward
from pfnn.layers import (
    ModelConfig,
    SeVectorParams,
    build_model,
    compressed_units,
    config_from_mapping,
    config_to_mapping,
    gagm,
    sevector,
)
from pfnn.losses import total_loss


class TestGagm:
    def test_constant_map_mean_equals_max(self):
        out = gagm(Tensor(np.full((4, 5, 3), 2.5)))
        np.testing.assert_array_equal(out.v_avg.data, [2.5] * 3)
        np.testing.assert_array_equal(out.u_max.data, [2.5] * 3)
        np.testing.assert_array_equal(out.u_fused.data, [2.5] * 6)

    def test_two_by_two_enumeration(self):
        out = gagm(Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(2, 2, 1)))
        np.testing.assert_array_equal(out.v_avg.data, [2.5])
        np.testing.assert_array_equal(out.u_max.data, [4.0])
        np.testing.assert_array_equal(out.u_fused.data, [2.5, 4.0])

    def test_fused_width_doubles_channels(self):
        out = gagm(Tensor(np.random.default_rng(0).uniform(0, 1, (6, 6, 3))))
        assert out.u_fused.shape == (6,)
        np.testing.assert_array_equal(out.u_fused.data[:3], out.v_avg.data)
        np.testing.assert_array_equal(out.u_fused.data[3:], out.u_max.data)

    def test_rejects_wrong_rank(self):
        with pytest.raises(ShapeError, match="gagm"):
            gagm(Tensor(np.zeros((2, 3, 4, 1))))

    def test_mean_never_exceeds_max(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            out = gagm(Tensor(rng.uniform(-4, 4, (5, 7, 4))))
            assert np.all(out.v_avg.data <= out.u_max.data + 1e-15)

    def test_channel_permutation_equivariance(self):
        rng = np.random.default_rng(2)
        fm = rng.uniform(-1, 1, (4, 4, 5))
        perm = rng.permutation(5)
        base = gagm(Tensor(fm))
        permuted = gagm(Tensor(fm[:, :, perm]))
        np.testing.assert_array_equal(permuted.v_avg.data, base.v_avg.data[perm])
        np.testing.assert_array_equal(permuted.u_max.data, base.u_max.data[perm])

    def test_spatial_permutation_invariance(self):
        rng = np.random.default_rng(3)
        fm = rng.uniform(-1, 1, (3, 4, 2))
        shuffled = fm.reshape(12, 2)[rng.permutation(12)].reshape(3, 4, 2)
        base, moved = gagm(Tensor(fm)), gagm(Tensor(shuffled))
        np.testing.assert_allclose(moved.u_fused.data, base.u_fused.data, atol=1e-15)

    def test_positive_scaling_is_linear(self):
        rng = np.random.default_rng(4)
        fm = rng.uniform(-1, 1, (4, 4, 3))
        lam = 2.75
        base, scaled = gagm(Tensor(fm)), gagm(Tensor(lam * fm))
        np.testing.assert_allclose(scaled.u_fused.data, lam * base.u_fused.data, rtol=1e-13)


class TestSeVector:
    def test_compressed_units_formula(self):
        assert compressed_units(32, 16) == 8
        assert compressed_units(256, 16) == 16
        assert compressed_units(6, 16) == 8

    def test_zero_params_halve_input(self):
        params = SeVectorParams(
            w1=Tensor(np.zeros((32, 8))), b1=Tensor(np.zeros(8)),
            w2=Tensor(np.zeros((8, 32))), b2=Tensor(np.zeros(32)),
            reduction_ratio=16,
        )
        u = Tensor(np.arange(32.0))
        np.testing.assert_allclose(sevector(u, params).data, 0.5 * u.data)

    def test_output_never_exceeds_input_magnitude(self):
        rng = np.random.default_rng(5)
        params = SeVectorParams.create(16, 4, rng)
        for _ in range(10):
            u = Tensor(rng.uniform(-3, 3, 16))
            out = sevector(u, params)
            assert np.all(np.abs(out.data) <= np.abs(u.data) + 1e-15)

    def test_large_positive_bias_opens_gate(self):
        params = SeVectorParams(
            w1=Tensor(np.zeros((16, 8))), b1=Tensor(np.zeros(8)),
            w2=Tensor(np.zeros((8, 16))), b2=Tensor(np.full(16, 30.0)),
            reduction_ratio=16,
        )
        u = Tensor(np.linspace(-2, 2, 16))
        out = sevector(u, params)
        gate = out.data / np.where(u.data == 0, 1.0, u.data)
        assert np.all(gate[u.data != 0] > 1 - 1e-9)

    def test_bottleneck_width_validated(self):
        with pytest.raises(ShapeError, match="bottleneck"):
            SeVectorParams(
                w1=Tensor(np.zeros((32, 4))), b1=Tensor(np.zeros(4)),
                w2=Tensor(np.zeros((4, 32))), b2=Tensor(np.zeros(32)),
                reduction_ratio=16,
            )

    def test_width_mismatch_rejected(self):
        params = SeVectorParams.create(16, 4, np.random.default_rng(0))
        with pytest.raises(ShapeError, match="width"):
            sevector(Tensor(np.zeros(12)), params)

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(6)
        params = SeVectorParams.create(10, 2, rng)
        batch = rng.uniform(-1, 1, (5, 10))
        batched = sevector(Tensor(batch), params).data
        for i in range(5):
            single = sevector(Tensor(batch[i]), params).data
            np.testing.assert_allclose(batched[i], single, atol=1e-15)


class TestBuildModel:
    def test_default_config_has_three_way_output(self):
        model = build_model(ModelConfig())
        out = model.forward(np.zeros((2, 12, 12, 1)))
        assert out.probs.shape == (2, 3)
        np.testing.assert_allclose(out.probs.data.sum(axis=1), 1.0, atol=1e-12)

    def test_head_input_width_doubles_with_fusion(self):
        gap_only = build_model(ModelConfig(conv_widths=(4, 64), enable_gagm=False, enable_sevector=False))
        fused = build_model(ModelConfig(conv_widths=(4, 64), enable_gagm=True, enable_sevector=False))
        assert gap_only.params["head/weight"].shape[0] == 64
        assert fused.params["head/weight"].shape[0] == 128

    def test_penultimate_feature_width_is_head_units(self):
        model = build_model(ModelConfig(head_units=256))
        out = model.forward(np.zeros((1, 10, 10, 1)))
        assert out.features.shape == (1, 256)
        assert model.feature_layer == "head_features"

    def test_rejects_zero_classes_and_empty_backbone(self):
        with pytest.raises(ValueError, match="class"):
            build_model(ModelConfig(classes=0))
        with pytest.raises(ValueError, match="conv"):
            build_model(ModelConfig(conv_widths=()))

    def test_same_seed_same_init(self):
        a = build_model(ModelConfig(seed=9))
        b = build_model(ModelConfig(seed=9))
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)

    def test_cam_layer_is_last_conv(self):
        model = build_model(ModelConfig(conv_widths=(4, 8, 16)))
        assert model.cam_layer == "conv3_relu"
        out = model.forward(np.zeros((1, 9, 9, 1)))
        assert out.captures["conv3_relu"].shape == (1, 9, 9, 16)

    def test_feature_candidates_follow_ablation_flags(self):
        full = build_model(ModelConfig())
        assert full.feature_candidates == ("pool_fused", "attended", "head_features")
        bare = build_model(ModelConfig(enable_gagm=False, enable_sevector=False))
        assert bare.feature_candidates == ("pool_gap", "head_features")

    def test_batched_forward_matches_gagm_op(self):
        rng = np.random.default_rng(8)
        model = build_model(ModelConfig(conv_widths=(3,), enable_sevector=False, seed=2))
        x = rng.uniform(0, 1, (4, 8, 8, 1))
        out = model.forward(x)
        fm = out.captures["conv1_relu"]
        for i in range(4):
            single = gagm(Tensor(fm.data[i]))
            np.testing.assert_allclose(out.captures["pool_fused"].data[i], single.u_fused.data, atol=1e-12)

    def test_state_round_trip(self):
        model = build_model(ModelConfig(conv_widths=(2, 3), head_units=8, seed=4))
        state = model.state_arrays()
        other = build_model(ModelConfig(conv_widths=(2, 3), head_units=8, seed=99))
        other.load_state(state)
        x = np.random.default_rng(0).uniform(0, 1, (3, 8, 8, 1))
        np.testing.assert_array_equal(model.forward(x).probs.data, other.forward(x).probs.data)

    def test_end_to_end_gradients(self):
        rng = np.random.default_rng(10)
        model = build_model(ModelConfig(conv_widths=(2, 3), head_units=6, dropout_rate=0.0, seed=1))
        x = rng.uniform(0, 1, (4, 6, 6, 1))
        labels = rng.integers(0, 3, 4)

        def forward():
            res = model.forward(Tensor(x), training=True)
            return total_loss(res.probs, labels, res.features, 0.1)

        loss = forward()
        model.zero_grads()
        backward(loss)
        for name, p in model.params.items():
            err = rel_err(p.grad, fd_gradient(forward, p.data))
            assert err < 1e-4, f"{name}: {err}"


class TestConfigMapping:
    def test_round_trip(self):
        config = ModelConfig(conv_widths=(4, 8), kernel=5, head_units=32, dropout_rate=0.25,
                             classes=3, enable_gagm=False, enable_sevector=True,
                             reduction_ratio=8, seed=3)
        assert config_from_mapping(config_to_mapping(config)) == config

    def test_bool_spellings(self):
        assert config_from_mapping({"enable_gagm": "on"}).enable_gagm
        assert not config_from_mapping({"enable_sevector": "off"}).enable_sevector
        with pytest.raises(ValueError, match="boolean"):
            config_from_mapping({"enable_gagm": "maybe"})
