"""Layers, blocks, losses and the SE-DenseNet / fusion builders."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check_op
from msedensenet import nn
from msedensenet import tensor as T
from msedensenet.data import class_weights
from msedensenet.tensor import Tensor

APTOS_COUNTS = (1805, 370, 999, 193, 295)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture(scope="module")
def desk_net():
    return nn.build_sedensenet(nn.NetworkSpec.desk(), seed=3, dtype=np.float64)


class TestNetworkSpec:
    def test_full_scale_defaults(self):
        spec = nn.NetworkSpec.full_scale()
        assert (spec.growth_rate, spec.modules_per_block, spec.num_dense_blocks) == (18, 16, 5)
        assert spec.compression == 0.5 and spec.se_ratio == 16
        assert spec.input_size == (299, 299, 3) and spec.num_classes == 5

    def test_full_scale_channel_plan(self):
        assert nn.NetworkSpec.full_scale().channel_plan() == [36, 324, 162, 450, 225, 513, 256, 544, 272, 560]

    def test_desk_channel_plan(self):
        assert nn.NetworkSpec.desk().channel_plan() == [12, 24, 12, 24]

    def test_filters_from_formula(self):
        assert nn.NetworkSpec(growth_rate=18, compression=0.5).filters_per_module == 18
        assert nn.NetworkSpec(growth_rate=10, compression=1.0).filters_per_module == 20
        assert nn.NetworkSpec(growth_rate=5, compression=0.3).filters_per_module == 3

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"growth_rate": 0},
            {"modules_per_block": 0},
            {"num_dense_blocks": 0},
            {"compression": 0.0},
            {"compression": 1.5},
            {"se_ratio": 0},
            {"head": "ordinal"},
            {"input_size": (32, 32)},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            nn.NetworkSpec(**kwargs)

    def test_dict_round_trip(self):
        spec = nn.NetworkSpec.desk("regression")
        assert nn.NetworkSpec.from_dict(spec.to_dict()) == spec

    @settings(max_examples=40, deadline=None)
    @given(
        st.integers(1, 24),
        st.integers(1, 20),
        st.integers(1, 6),
        st.sampled_from([0.25, 0.5, 0.75, 1.0]),
    )
    def test_block_channel_rule(self, k, L, B, theta):
        spec = nn.NetworkSpec(growth_rate=k, modules_per_block=L, num_dense_blocks=B, compression=theta)
        plan = spec.channel_plan()
        f = spec.filters_per_module
        for i in range(B):
            c_in, c_out = plan[2 * i], plan[2 * i + 1]
            assert c_out == c_in + L * f
            if i < B - 1:
                assert plan[2 * i + 2] == math.floor(c_out * theta)


class TestActivationsAndLosses:
    def test_softmax_uniform(self):
        np.testing.assert_allclose(nn.softmax(Tensor(np.zeros((1, 5)))).data, 0.2)

    def test_softmax_closed_form(self):
        np.testing.assert_allclose(nn.softmax(Tensor([[math.log(2.0), 0.0]])).data, [[2 / 3, 1 / 3]], rtol=1e-12)

    def test_softmax_stable(self):
        with np.errstate(over="raise", invalid="raise"):
            out = nn.softmax(Tensor([[1000.0, 0.0]])).data
        np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-300)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 6), st.floats(-50, 50), st.integers(0, 2**31 - 1))
    def test_softmax_rows_sum_to_one_and_shift_invariant(self, n, k, shift, seed):
        z = np.random.default_rng(seed).normal(scale=5.0, size=(n, k))
        p = nn.softmax(Tensor(z)).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(nn.softmax(Tensor(z + shift)).data, p, atol=1e-6)

    def test_softmax_gradient(self, rng):
        assert check_op(nn.softmax, rng.normal(size=(3, 5))) < 1e-5

    def test_ce_perfect_prediction(self):
        y = np.eye(5)[[0, 3]]
        assert nn.cross_entropy(Tensor(y), y).item() <= 1e-6

    def test_ce_uniform(self):
        loss = nn.cross_entropy(Tensor(np.full((2, 5), 0.2)), np.eye(5)[[1, 4]])
        assert loss.item() == pytest.approx(-math.log(0.2), abs=1e-12)

    def test_ce_class_weighted(self):
        w = class_weights(APTOS_COUNTS).weights
        loss = nn.cross_entropy(Tensor(np.full((1, 5), 0.2)), np.eye(5)[[3]], w)
        assert loss.item() == pytest.approx(3662 / (5 * 193) * math.log(5.0), rel=1e-12)
        assert loss.item() == pytest.approx(6.108, abs=5e-4)

    def test_ce_fused_gradient(self, rng):
        z = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        y = np.eye(5)[[0, 2, 4, 1]]
        nn.cross_entropy(nn.softmax(z), y).backward()
        expected = (nn.softmax(Tensor(z.data)).data - y) / 4
        np.testing.assert_allclose(z.grad, expected, atol=1e-6)

    def test_ce_shape_mismatch(self):
        with pytest.raises(ValueError):
            nn.cross_entropy(Tensor(np.full((2, 5), 0.2)), np.eye(4)[[0, 1]])

    def test_mse_examples(self):
        assert nn.mse(Tensor([[0.3]]), [[0.3]]).item() == 0.0
        assert nn.mse(Tensor([[0.4]]), [[0.2]]).item() == pytest.approx(0.04)
        assert nn.mse(Tensor([[0.0], [0.8]]), [[0.2], [0.2]]).item() == pytest.approx(0.2)

    def test_mse_shape_mismatch(self):
        with pytest.raises(ValueError):
            nn.mse(Tensor(np.zeros((2, 1))), np.zeros((2,)))

    def test_loss_gradients(self, rng):
        y = np.eye(5)[[1, 3, 0]]
        w = np.array([0.5, 1.0, 2.0, 1.5, 0.7])
        assert check_op(lambda p: nn.cross_entropy(nn.softmax(p), y, w).reshape((1,)), rng.normal(size=(3, 5))) < 1e-5
        target = rng.uniform(0, 0.8, (3, 1))
        assert check_op(lambda p: nn.mse(p, target).reshape((1,)), rng.normal(size=(3, 1))) < 1e-5


class TestSEBlock:
    def test_reduced_channels(self):
        assert nn.se_reduced_channels(18, 16) == 1
        assert nn.se_reduced_channels(324, 16) == 20
        assert nn.se_reduced_channels(3, 16) == 1

    def test_saturated_gate_is_identity(self, rng):
        x = rng.normal(size=(2, 4, 3, 3))
        out = nn.se_block(Tensor(x), Tensor(rng.normal(size=(4, 1))), None, Tensor(np.zeros((1, 4))), Tensor(np.full(4, 1e3)))
        np.testing.assert_array_equal(out.data, x)

    def test_constant_channels_stay_constant(self, rng):
        x = np.broadcast_to(np.array([1.0, -2.0, 3.0])[None, :, None, None], (2, 3, 4, 4)).copy()
        out = nn.SEBlock(3, 2, rng, dtype=np.float64)(Tensor(x)).data
        per_channel = out[:, :, :1, :1]
        np.testing.assert_allclose(out, np.broadcast_to(per_channel, out.shape))
        gates = per_channel[..., 0, 0] / x[:, :, 0, 0]
        assert np.all((gates > 0) & (gates < 1))

    def test_magnitude_never_grows(self, rng):
        x = rng.normal(size=(3, 6, 4, 4))
        out = nn.SEBlock(6, 2, rng, dtype=np.float64)(Tensor(x)).data
        assert np.all(np.abs(out) <= np.abs(x))

    def test_gradients(self, rng):
        err = check_op(
            nn.se_block,
            rng.uniform(-1, 1, (2, 4, 3, 3)),
            rng.uniform(-1, 1, (4, 2)),
            rng.uniform(-1, 1, 2),
            rng.uniform(-1, 1, (2, 4)),
            rng.uniform(-1, 1, 4),
        )
        assert err < 1e-5


class TestBlocks:
    def test_dense_module_channels_and_passthrough(self, rng):
        module = nn.SEDenseModule(36, 18, 16, rng, dtype=np.float64)
        x = rng.normal(size=(1, 36, 5, 5))
        out = module(Tensor(x)).data
        assert out.shape == (1, 54, 5, 5)
        assert np.array_equal(out[:, :36], x)
        assert not np.array_equal(out[:, 36:], np.zeros_like(out[:, 36:]))

    def test_full_scale_dense_block_channels(self, rng):
        block = nn.DenseBlock(36, 16, 18, 16, rng)
        assert block.out_channels == 324

    def test_desk_dense_block_forward(self, rng):
        block = nn.DenseBlock(12, 2, 6, 4, rng, dtype=np.float64)
        x = rng.normal(size=(2, 12, 4, 4))
        out = block(Tensor(x)).data
        assert out.shape == (2, 24, 4, 4)
        assert np.array_equal(out[:, :12], x)

    def test_single_module_block_equals_module(self):
        x = np.random.default_rng(0).normal(size=(2, 4, 3, 3))
        block = nn.DenseBlock(4, 1, 3, 2, np.random.default_rng(5), dtype=np.float64)
        module = nn.SEDenseModule(4, 3, 2, np.random.default_rng(5), dtype=np.float64)
        np.testing.assert_array_equal(block(Tensor(x)).data, module(Tensor(x)).data)

    def test_transition_channels(self, rng):
        assert nn.TransitionBlock(324, 0.5, 16, rng).out_channels == 162
        assert nn.TransitionBlock(20, 1.0, 4, rng).out_channels == 20

    def test_transition_floor_rule(self, rng):
        out = nn.TransitionBlock(6, 0.5, 2, rng, dtype=np.float64)(Tensor(rng.normal(size=(2, 6, 7, 7))))
        assert out.shape == (2, 3, 3, 3)

    def test_transition_rejects_tiny_input(self, rng):
        with pytest.raises(ValueError, match="spatial"):
            nn.TransitionBlock(4, 0.5, 2, rng)(Tensor(np.zeros((2, 4, 1, 4))))


class TestSEDenseNet:
    def test_desk_trace(self, desk_net):
        trace = []
        desk_net.eval()(np.zeros((1, 3, 32, 32)), trace=trace)
        assert trace == [
            ("stem", (1, 12, 32, 32)),
            ("block1", (1, 24, 32, 32)),
            ("transition1", (1, 12, 16, 16)),
            ("block2", (1, 24, 16, 16)),
            ("pool", (1, 24)),
        ]

    def test_classification_rows_sum_to_one(self, desk_net, rng):
        out = desk_net.train()(rng.uniform(0, 1, (3, 3, 32, 32))).data
        assert out.shape == (3, 5)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)

    def test_regression_head_shape(self, rng):
        net = nn.build_sedensenet(nn.NetworkSpec.desk("regression"), seed=1)
        assert net(rng.uniform(0, 1, (2, 3, 32, 32))).shape == (2, 1)

    def test_spatial_collapse_rejected(self):
        spec = nn.NetworkSpec(num_dense_blocks=5, input_size=(8, 8, 3))
        with pytest.raises(ValueError, match="minimum input size is 16x16"):
            nn.build_sedensenet(spec)

    def test_wrong_input_rejected(self, desk_net):
        with pytest.raises(ValueError):
            desk_net(np.zeros((1, 1, 32, 32)))

    def test_same_seed_same_weights(self):
        a = nn.build_sedensenet(nn.NetworkSpec.desk(), seed=9).state_dict()
        b = nn.build_sedensenet(nn.NetworkSpec.desk(), seed=9).state_dict()
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_decay_flags_on_kernels_only(self, desk_net):
        for name, p in desk_net.named_parameters():
            assert p.decay == name.endswith("weight"), name

    def test_state_dict_round_trip(self, rng):
        src = nn.build_sedensenet(nn.NetworkSpec.desk(), seed=1)
        src.train()(rng.uniform(0, 1, (4, 3, 32, 32)))  # move running stats
        dst = nn.build_sedensenet(nn.NetworkSpec.desk(), seed=2)
        dst.load_state_dict(src.state_dict())
        x = rng.uniform(0, 1, (2, 3, 32, 32))
        np.testing.assert_array_equal(src.eval()(x).data, dst.eval()(x).data)

    def test_state_dict_mismatch(self):
        net = nn.build_sedensenet(nn.NetworkSpec.desk(), seed=1)
        state = net.state_dict()
        state.pop("stem.weight")
        with pytest.raises(ValueError, match="missing"):
            net.load_state_dict(state)

    def test_first_nonfinite_layer(self, rng):
        net = nn.build_sedensenet(nn.NetworkSpec.desk(), seed=1)
        x = rng.uniform(0, 1, (2, 3, 32, 32)).astype(np.float32)
        assert nn.first_nonfinite_layer(net, x) is None
        bad = x.copy()
        bad[0, 0, 0, 0] = np.nan
        assert nn.first_nonfinite_layer(net, bad) == "input"
        net.transitions[0].conv.weight.data[0, 0, 0, 0] = np.inf
        assert nn.first_nonfinite_layer(net, x).startswith("transitions.0.conv")


class TestFusion:
    def test_desk_mlp_dims(self):
        mlp = nn.build_fusion_mlp(24, 24)
        assert mlp.in_dim == 48
        assert mlp.fc1.weight.shape == (48, 512) and mlp.fc2.weight.shape == (512, 5)
        assert mlp.bn.momentum == 0.9

    def test_full_scale_mlp_dims(self):
        dim = nn.NetworkSpec.full_scale().feature_dim
        assert nn.build_fusion_mlp(dim, dim).in_dim == 1120

    def test_output_distribution(self, rng):
        out = nn.build_fusion_mlp(24, 24)(Tensor(rng.normal(size=(4, 48)).astype(np.float32))).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(out >= 0)

    def test_model_freezes_backbones(self):
        cls = nn.build_sedensenet(nn.NetworkSpec.desk(), seed=1)
        reg = nn.build_sedensenet(nn.NetworkSpec.desk("regression"), seed=2)
        model = nn.FusionModel(cls, reg, nn.build_fusion_mlp(24, 24))
        model.train()
        assert not cls.training and not reg.training and model.mlp.training
        trainable = [p for p in model.parameters() if p.requires_grad]
        assert {id(p) for p in trainable} == {id(p) for p in model.mlp.parameters()}

    def test_predict_outputs(self, rng):
        cls = nn.build_sedensenet(nn.NetworkSpec.desk(), seed=1)
        reg = nn.build_sedensenet(nn.NetworkSpec.desk("regression"), seed=2)
        model = nn.FusionModel(cls, reg, nn.build_fusion_mlp(24, 24))
        probs, severity = model.predict(rng.uniform(0, 1, (3, 3, 32, 32)))
        assert probs.shape == (3, 5) and severity.shape == (3,)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)

    def test_mismatched_inputs_rejected(self):
        cls = nn.build_sedensenet(nn.NetworkSpec.desk(), seed=1)
        spec = nn.NetworkSpec(**{**nn.NetworkSpec.desk("regression").__dict__, "input_size": (64, 64, 3)})
        reg = nn.build_sedensenet(spec, seed=2)
        with pytest.raises(ValueError, match="input sizes"):
            nn.FusionModel(cls, reg, nn.build_fusion_mlp(24, 24))

    def test_mlp_dim_mismatch(self):
        cls = nn.build_sedensenet(nn.NetworkSpec.desk(), seed=1)
        reg = nn.build_sedensenet(nn.NetworkSpec.desk("regression"), seed=2)
        with pytest.raises(ValueError, match="MLP input"):
            nn.FusionModel(cls, reg, nn.build_fusion_mlp(24, 12))
