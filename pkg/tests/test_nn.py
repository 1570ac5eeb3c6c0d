import numpy as np
import pytest

from dagseg import _macs, nn, tensor
from dagseg.nn import (
    BatchNorm,
    Conv2d,
    ConvBlock,
    DWSeparableConv2d,
    LayerNorm,
    Linear,
    count_scalars,
)

import oracles
from conftest import assert_grads


def leaf(rng, *shape):
    return tensor(rng.normal(size=shape), requires_grad=True)


class TestConvolution:
    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_conv2d_matches_loop(self, rng, k):
        x, w, b = rng.normal(size=(2, 5, 6, 3)), rng.normal(size=(k, k, 3, 4)), rng.normal(size=4)
        out = nn.conv2d(tensor(x), tensor(w), tensor(b)).data
        np.testing.assert_allclose(out, oracles.conv2d_loop(x, w, b), rtol=1e-12, atol=1e-12)

    def test_depthwise_matches_loop(self, rng):
        x, w, b = rng.normal(size=(1, 5, 4, 3)), rng.normal(size=(3, 3, 3, 1)), rng.normal(size=3)
        out = nn.depthwise_conv2d(tensor(x), tensor(w), tensor(b)).data
        np.testing.assert_allclose(out, oracles.depthwise_loop(x, w, b), rtol=1e-12, atol=1e-12)

    def test_strided_valid_shape(self, rng):
        x = tensor(rng.normal(size=(1, 7, 7, 2)))
        assert nn.conv2d(x, tensor(rng.normal(size=(3, 3, 2, 5))), stride=2, padding="valid").shape == (1, 3, 3, 5)
        assert nn.conv2d(x, tensor(rng.normal(size=(3, 3, 2, 5))), stride=2).shape == (1, 4, 4, 5)

    def test_channel_mismatch_raises(self, rng):
        with pytest.raises(ValueError):
            nn.conv2d(tensor(rng.normal(size=(1, 4, 4, 2))), tensor(rng.normal(size=(3, 3, 3, 1))))

    @pytest.mark.parametrize("k,stride", [(1, 1), (3, 1), (3, 2)])
    def test_conv2d_grad(self, rng, k, stride):
        x, w, b = leaf(rng, 1, 6, 6, 3), leaf(rng, k, k, 3, 2), leaf(rng, 2)
        assert_grads(lambda: (nn.conv2d(x, w, b, stride) ** 2).sum(), [x, w, b])

    def test_dw_separable_grad(self, rng):
        layer = DWSeparableConv2d(4, 3, 3, rng)
        x = leaf(rng, 1, 8, 8, 4)
        assert_grads(lambda: (layer(x) ** 2).sum(), [x, *layer.parameters()])

    def test_dw_separable_is_depthwise_then_pointwise(self, rng):
        layer = DWSeparableConv2d(3, 2, 3, rng)
        x = rng.normal(size=(1, 4, 4, 3))
        mid = oracles.depthwise_loop(x, layer.depthwise.kernel.data, layer.depthwise.bias.data)
        ref = oracles.conv2d_loop(mid, layer.pointwise.kernel.data, layer.pointwise.bias.data)
        np.testing.assert_allclose(layer(tensor(x)).data, ref, rtol=1e-12, atol=1e-12)


class TestPoolingAndResize:
    def test_maxpool_matches_loop(self, rng):
        x = rng.normal(size=(2, 4, 6, 3))
        np.testing.assert_array_equal(nn.maxpool2(tensor(x)).data, oracles.maxpool_loop(x))

    def test_maxpool_grad_routes_to_argmax(self, rng):
        x = leaf(rng, 1, 4, 4, 2)
        assert_grads(lambda: (nn.maxpool2(x) ** 2).sum(), [x])

    def test_avg_pool(self, rng):
        x = leaf(rng, 1, 4, 6, 2)
        out = nn.avg_pool(x, 2)
        np.testing.assert_allclose(out.data[0, 0, 0], x.data[0, :2, :2].mean(axis=(0, 1)))
        assert_grads(lambda: (nn.avg_pool(x, 2) ** 2).sum(), [x])
        with pytest.raises(ValueError):
            nn.avg_pool(x, 4)

    @pytest.mark.parametrize("size", [(8, 12), (3, 5), (4, 6)])
    def test_bilinear_matches_loop(self, rng, size):
        x = rng.normal(size=(2, 4, 6, 3))
        np.testing.assert_allclose(nn.bilinear_resize(tensor(x), size).data, oracles.bilinear_loop(x, size), atol=1e-13)

    def test_bilinear_grad(self, rng):
        x = leaf(rng, 1, 3, 4, 2)
        assert_grads(lambda: (nn.bilinear_resize(x, (6, 7)) ** 2).sum(), [x])

    def test_checkerboard_corners_preserved(self):
        x = np.array([[0.0, 1.0], [1.0, 0.0]]).reshape(1, 2, 2, 1)
        out = nn.bilinear_resize(tensor(x), (4, 4)).data[0, :, :, 0]
        assert (out[0, 0], out[0, -1], out[-1, 0], out[-1, -1]) == (0.0, 1.0, 1.0, 0.0)

    def test_resize_rows_are_convex(self):
        m = nn.resize_matrix(5, 11)
        np.testing.assert_allclose(m.sum(axis=1), 1.0)
        assert (m >= 0).all()


class TestNormalization:
    def test_batchnorm_training_statistics(self, rng):
        bn = BatchNorm(3, momentum=0.5)
        x = rng.normal(2.0, 3.0, size=(4, 5, 5, 3))
        out = bn(tensor(x)).data
        np.testing.assert_allclose(out.mean(axis=(0, 1, 2)), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=(0, 1, 2)), 1.0, rtol=1e-4)
        flat = x.reshape(-1, 3)
        np.testing.assert_allclose(bn.running_mean, 0.5 * flat.mean(axis=0))
        np.testing.assert_allclose(bn.running_var, 0.5 + 0.5 * flat.var(axis=0, ddof=1))

    def test_batchnorm_eval_uses_running_stats(self, rng):
        bn = BatchNorm(2)
        bn.running_mean[:] = [1.0, -1.0]
        bn.running_var[:] = [4.0, 9.0]
        bn.eval()
        x = rng.normal(size=(1, 2, 2, 2))
        expect = (x - bn.running_mean) / np.sqrt(bn.running_var + bn.eps)
        np.testing.assert_allclose(bn(tensor(x)).data, expect)

    @pytest.mark.parametrize("training", [True, False])
    def test_batchnorm_grad(self, rng, training):
        bn = BatchNorm(3)
        bn.gamma.data[:] = rng.normal(size=3)
        bn.train(training)
        x = leaf(rng, 2, 3, 3, 3)
        w = rng.normal(size=x.shape)
        assert_grads(lambda: (bn(x) * w).sum(), [x, bn.gamma, bn.beta])

    def test_layernorm(self, rng):
        ln = LayerNorm(5)
        ln.gamma.data[:] = rng.normal(size=5)
        ln.beta.data[:] = rng.normal(size=5)
        x = leaf(rng, 2, 3, 5)
        np.testing.assert_allclose(ln(x).data, oracles.layer_norm_ref(x.data, ln.gamma.data, ln.beta.data), atol=1e-12)
        w = rng.normal(size=x.shape)
        assert_grads(lambda: (ln(x) * w).sum(), [x, ln.gamma, ln.beta])


class TestAttentionKernel:
    @pytest.mark.parametrize("scale", [1.0, 0.3])
    def test_matches_loop(self, rng, scale):
        q, k, v = (rng.normal(size=(2, 7, 3)) for _ in range(3))
        out = nn.attention(tensor(q), tensor(k), tensor(v), scale).data
        np.testing.assert_allclose(out, oracles.attention_loop(q, k, v, scale), rtol=1e-12, atol=1e-12)

    def test_grad_distinct_operands(self, rng):
        q, k, v = leaf(rng, 2, 5, 3), leaf(rng, 2, 5, 3), leaf(rng, 2, 5, 4)
        w = rng.normal(size=(2, 5, 4))
        assert_grads(lambda: (nn.attention(q, k, v, 0.5) * w).sum(), [q, k, v])

    def test_grad_shared_operand(self, rng):
        x = leaf(rng, 1, 6, 3)
        w = rng.normal(size=(1, 6, 3))
        assert_grads(lambda: (nn.attention(x, x, x) * w).sum(), [x])

    def test_weights_are_row_stochastic(self, rng):
        a = nn.attention_weights(rng.normal(size=(1, 4, 2)), rng.normal(size=(1, 4, 2)))
        np.testing.assert_allclose(a.sum(axis=-1), 1.0)

    def test_large_logits_stay_finite(self, rng):
        x = rng.normal(size=(1, 5, 3)) * 300
        out = nn.attention(tensor(x), tensor(x), tensor(x)).data
        assert np.isfinite(out).all()


class TestModules:
    def test_parameter_discovery_and_counts(self, rng):
        block = ConvBlock(3, 5, rng)
        names = [n for n, _ in block.named_parameters()]
        assert names == [
            "conv.depthwise.kernel", "conv.depthwise.bias",
            "conv.pointwise.kernel", "conv.pointwise.bias",
            "norm.gamma", "norm.beta",
        ]
        assert block.param_count() == count_scalars(block) == 9 * 3 + 3 + 3 * 5 + 5 + 2 * 5

    def test_state_dict_round_trip(self, rng):
        a, b = ConvBlock(2, 3, np.random.default_rng(0)), ConvBlock(2, 3, np.random.default_rng(1))
        a.norm.running_mean[:] = [1.0, 2.0, 3.0]
        b.load_state_dict(a.state_dict())
        x = tensor(rng.normal(size=(1, 4, 4, 2)))
        a.eval(), b.eval()
        np.testing.assert_array_equal(a(x).data, b(x).data)

    def test_load_state_dict_is_strict(self):
        layer = Linear(2, 3)
        with pytest.raises(KeyError):
            layer.load_state_dict({"weight": np.zeros((2, 3))})
        with pytest.raises(ValueError):
            layer.load_state_dict({"weight": np.zeros((3, 2)), "bias": np.zeros(3)})

    def test_train_eval_propagates(self):
        block = ConvBlock(2, 2)
        block.eval()
        assert not block.norm.training
        block.train()
        assert block.norm.training

    def test_linear_grad(self, rng):
        layer = Linear(4, 3, rng)
        x = leaf(rng, 2, 4)
        assert_grads(lambda: (layer(x) ** 2).sum(), [x, layer.weight, layer.bias])


class TestMacCounting:
    def test_conv_macs(self, rng):
        conv = Conv2d(3, 4, 3, rng)
        with _macs.counting() as counter:
            conv(tensor(np.zeros((2, 5, 6, 3))))
        assert counter[id(conv)] == 2 * 5 * 6 * 9 * 3 * 4

    def test_depthwise_and_linear_macs(self, rng):
        layer, lin = DWSeparableConv2d(3, 4, 3, rng), Linear(4, 2, rng)
        with _macs.counting() as counter:
            lin(layer(tensor(np.zeros((1, 4, 4, 3)))).reshape(16, 4))
        assert counter[id(layer.depthwise)] == 16 * 9 * 3
        assert counter[id(layer.pointwise)] == 16 * 3 * 4
        assert counter[id(lin)] == 16 * 4 * 2

    def test_no_counting_outside_context(self, rng):
        assert not _macs.active()
        Conv2d(1, 1)(tensor(np.zeros((1, 2, 2, 1))))
        assert not _macs.active()
