import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tensorhsi import nn
from tensorhsi.gradcheck import check_graph, run_suites
from tensorhsi.hyperparams import Hyperparams
from tensorhsi.nn import ConvSpec, Var

from oracles import loop_attention, loop_conv


def probe(out, rng):
    return nn.total(nn.mul(out, rng.standard_normal(out.shape)))


class TestVar:
    def test_shared_node_accumulates(self):
        x = Var(np.array([1.0, 2.0, 3.0]))
        y = nn.mul(x, x)  # x used twice
        z = nn.total(nn.add(y, x))
        z.backward()
        np.testing.assert_array_equal(x.grad, 2 * x.value + 1)

    def test_diamond_graph(self):
        x = Var(np.array(2.0))
        a = nn.scale(x, 3.0)
        b = nn.mul(x, a)
        out = nn.add(a, b)  # 3x + 3x^2
        out.backward()
        assert x.grad == pytest.approx(3 + 6 * 2.0)

    def test_backward_twice_is_fresh(self):
        x = Var(np.ones(3))
        out = nn.sum_squares(x)
        out.backward()
        out.backward()
        np.testing.assert_array_equal(x.grad, 2 * np.ones(3))

    def test_nonscalar_needs_gradient(self):
        with pytest.raises(ValueError):
            nn.scale(Var(np.ones(2)), 2.0).backward()

    def test_broadcast_gradient_reduced(self):
        a = Var(np.ones((2, 3)))
        b = Var(np.array([1.0, 2.0, 3.0]))
        nn.total(nn.mul(a, b)).backward()
        np.testing.assert_array_equal(b.grad, [2.0, 2.0, 2.0])
        np.testing.assert_array_equal(a.grad, np.tile([1.0, 2.0, 3.0], (2, 1)))


class TestConvSpec:
    @pytest.mark.parametrize("length, k, stride, padding, want", [
        (5, 3, 1, "same", 5), (5, 3, 1, "valid", 3), (5, 3, 2, "same", 3),
        (6, 4, 1, "same", 6), (7, 3, 2, "valid", 3), (1, 1, 1, "valid", 1),
    ])
    def test_output_shape(self, length, k, stride, padding, want):
        spec = ConvSpec((k,), 1, 1, stride, padding)
        assert spec.output_shape((length,)) == (want,)
        x = Var(np.random.default_rng(0).standard_normal((1, length)))
        out = nn.conv(x, Var(np.ones((1, 1, k))), None, spec)
        assert out.shape == (1, want)

    def test_invalid(self):
        with pytest.raises(ValueError):
            ConvSpec((0, 3), 1, 1)
        with pytest.raises(ValueError):
            ConvSpec((3,), 1, 1, padding="full")


class TestConv3d:
    def test_identity(self):
        x = np.random.default_rng(0).standard_normal((1, 3, 4, 5))
        spec = ConvSpec((1, 1, 1), 1, 1)
        out = nn.conv3d(Var(x), Var(np.ones((1, 1, 1, 1, 1))), Var(np.zeros(1)), spec)
        np.testing.assert_array_equal(out.value, x)

    def test_counting(self):
        spec = ConvSpec((2, 2, 2), 1, 1, padding="valid")
        out = nn.conv3d(Var(np.ones((1, 2, 2, 2))), Var(np.ones((1, 1, 2, 2, 2))), None, spec)
        assert out.shape == (1, 1, 1, 1) and out.value.item() == 8.0

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        spec = ConvSpec((3, 2, 3), 2, 3, stride=1 + seed % 2)
        x = rng.standard_normal((2, 2, 4, 3, 5))
        w, b = rng.standard_normal(spec.weight_shape), rng.standard_normal(3)
        out = nn.conv3d(Var(x), Var(w), Var(b), spec).value
        for i in range(2):
            np.testing.assert_allclose(out[i], loop_conv(x[i], w, b, spec.stride), rtol=1e-12)

    def test_wrong_channels(self):
        with pytest.raises(ValueError):
            nn.conv3d(Var(np.zeros((2, 3, 3, 3))), Var(np.zeros((1, 1, 1, 1, 1))), None,
                      ConvSpec((1, 1, 1), 1, 1))


class TestConv2d:
    def test_identity(self):
        x = np.random.default_rng(1).standard_normal((2, 4, 4))
        w = np.zeros((2, 2, 1, 1))
        w[0, 0] = w[1, 1] = 1.0
        out = nn.conv2d(Var(x), Var(w), None, ConvSpec((1, 1), 2, 2))
        np.testing.assert_array_equal(out.value, x)

    def test_average_of_constant(self):
        x = np.full((1, 5, 5), 3.0)
        out = nn.conv2d(Var(x), Var(np.full((1, 1, 3, 3), 1 / 9)), None, ConvSpec((3, 3), 1, 1))
        np.testing.assert_allclose(out.value[0, 1:-1, 1:-1], 3.0, rtol=1e-15)

    @pytest.mark.parametrize("padding", ["same", "valid"])
    def test_matches_loop_oracle(self, padding):
        rng = np.random.default_rng(2)
        spec = ConvSpec((3, 2), 3, 2, padding=padding)
        x = rng.standard_normal((3, 5, 4))
        w, b = rng.standard_normal(spec.weight_shape), rng.standard_normal(2)
        np.testing.assert_allclose(nn.conv2d(Var(x), Var(w), Var(b), spec).value,
                                   loop_conv(x, w, b, 1, padding), rtol=1e-12)


class TestConcat:
    def test_channels_add_up(self):
        a, b = Var(np.zeros((2, 2, 3, 3))), Var(np.ones((2, 3, 3, 3)))
        assert nn.concat_channels(a, b).shape == (2, 5, 3, 3)

    def test_backward_routes_gradient(self):
        a, b = Var(np.zeros((1, 2, 2, 3))), Var(np.ones((1, 3, 2, 3)))
        out = nn.concat_channels(a, b)
        out.backward(np.ones(out.shape))
        assert np.all(a.grad == 1) and np.all(b.grad == 1)

    def test_index_oracle(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((2, 2, 3, 3)), rng.standard_normal((2, 4, 3, 3))
        out = nn.concat_channels(Var(a), Var(b)).value
        for c in range(6):
            np.testing.assert_array_equal(out[:, c], a[:, c] if c < 2 else b[:, c - 2])

    def test_spatial_mismatch(self):
        with pytest.raises(ValueError):
            nn.concat_channels(Var(np.zeros((1, 2, 3, 3))), Var(np.zeros((1, 2, 3, 4))))


class TestDepthwiseSeparable:
    def test_identity(self):
        x = np.random.default_rng(0).standard_normal((1, 3, 4, 4))
        dw = np.ones((3, 1, 1, 1))
        pw = np.eye(3).reshape(3, 3, 1, 1)
        out = nn.depthwise_separable(Var(x), Var(dw), Var(pw), (1, 1))
        np.testing.assert_array_equal(out.value, x)

    def test_parameter_count(self):
        layer = nn.DepthwiseSeparable(8, 16, 3, np.random.default_rng(0))
        assert layer.n_params() == 8 * 9 + 8 * 16 == 200
        full = nn.Conv(ConvSpec((3, 3), 8, 16), np.random.default_rng(0), bias=False)
        assert full.n_params() == 1152

    def test_matches_composed_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((3, 5, 5))
        dw, pw = rng.standard_normal((3, 1, 3, 3)), rng.standard_normal((4, 3, 1, 1))
        want = loop_conv(np.stack([loop_conv(x[c:c + 1], dw[c:c + 1], None)[0]
                                   for c in range(3)]), pw, None)
        got = nn.depthwise_separable(Var(x), Var(dw), Var(pw), (3, 3)).value
        np.testing.assert_allclose(got, want, rtol=1e-12)


class TestChannelAttention:
    def test_zero_weights_halve(self):
        x = np.random.default_rng(0).standard_normal((4, 3, 3))
        z = lambda *s: Var(np.zeros(s))
        out = nn.channel_attention(Var(x), z(1, 4), z(1), z(4, 1), z(4))
        np.testing.assert_allclose(out.value, x / 2)

    def test_zero_input(self):
        layer = nn.ChannelAttention(4, 2, np.random.default_rng(0))
        assert not np.any(layer(Var(np.zeros((2, 4, 3, 3)))).value)

    def test_ceil_width(self):
        layer = nn.ChannelAttention(6, 4, np.random.default_rng(0))
        assert layer.W1.shape == (2, 6)

    def test_matches_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 6, 3, 4))
        layer = nn.ChannelAttention(6, 3, rng)
        layer.b1.value = rng.standard_normal(2)
        out = layer(Var(x)).value
        for i in range(2):
            want = loop_attention(x[i], layer.W1.value, layer.b1.value, layer.W2.value,
                                  layer.b2.value)
            np.testing.assert_allclose(out[i], want, rtol=1e-12)


class TestActivations:
    def test_relu(self):
        np.testing.assert_array_equal(nn.relu(Var(np.array([-1.0, 0.0, 2.0]))).value, [0, 0, 2])

    def test_sigmoid_extremes(self):
        out = nn.sigmoid(Var(np.array([-800.0, 0.0, 800.0]))).value
        np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])

    def test_equal_logits(self):
        logits = Var(np.zeros((1, 4)))
        np.testing.assert_allclose(nn.softmax(logits.value), 0.25)
        for y in range(1, 5):
            assert nn.softmax_xent(logits, [y]).value == pytest.approx(math.log(4), rel=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_softmax_rows_and_shift(self, z, c):
        p = nn.softmax(z)
        assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-12)
        assert np.max(np.abs(nn.softmax(z + c) - p)) <= 1e-12

    def test_xent_matches_direct(self):
        rng = np.random.default_rng(0)
        z = rng.standard_normal((6, 4))
        y = rng.integers(1, 5, size=6)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        want = -np.mean(np.log(p[np.arange(6), y - 1]))
        logits = Var(z)
        out = nn.softmax_xent(logits, y)
        assert out.value == pytest.approx(want, rel=1e-13)
        out.backward()
        onehot = np.eye(4)[y - 1]
        np.testing.assert_allclose(logits.grad, (p - onehot) / 6, rtol=1e-12, atol=1e-15)

    def test_xent_errors(self):
        with pytest.raises(ValueError):
            nn.softmax_xent(Var(np.zeros((0, 3))), [])
        with pytest.raises(ValueError):
            nn.softmax_xent(Var(np.zeros((1, 3))), [4])


class TestEinsum:
    def test_gradients(self):
        rng = np.random.default_rng(0)
        a, b = Var(rng.standard_normal((2, 3, 4))), Var(rng.standard_normal((4, 3)))
        r = rng.standard_normal((2, 3))
        err = check_graph(lambda: nn.total(nn.mul(nn.einsum("ijk,kj->ij", a, b), r)),
                          {"a": a, "b": b}, rng, n_coords=12)
        assert err <= 1e-8


class TestGradientSuites:
    @pytest.mark.parametrize("name", ["nn.conv3d", "nn.conv2d", "nn.depthwise_separable",
                                      "nn.channel_attention", "nn.fusion_affine",
                                      "loss.classification"])
    def test_layer_suite(self, name):
        (res,) = run_suites([name], instances=20, seed=1)
        assert res.passed, res

    def test_fault_injection_is_named(self):
        results = run_suites(["nn.conv2d", "nn.channel_attention"], instances=2,
                             corrupt=["nn.channel_attention"])
        assert [r.passed for r in results] == [True, False]
        assert results[1].name == "nn.channel_attention"


class TestSgd:
    def test_schedule(self):
        hp = Hyperparams(lr0=0.001, decay=0.9, decay_every=10_000)
        assert hp.lr(0) == 0.001
        assert hp.lr(9_999) == 0.001
        assert hp.lr(10_000) == pytest.approx(0.0009, rel=1e-15)

    def test_step(self):
        hp = Hyperparams(lr0=0.5)
        out = nn.sgd_step({"w": np.array([1.0, 2.0])}, {"w": np.array([2.0, -2.0])}, 0, hp)
        np.testing.assert_array_equal(out["w"], [0.0, 3.0])

    def test_zero_gradient(self):
        p = {"w": np.array([1.0, 2.0])}
        out = nn.sgd_step(p, {"w": np.zeros(2)}, 12345, Hyperparams())
        np.testing.assert_array_equal(out["w"], p["w"])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            nn.sgd_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, 0, Hyperparams())


class TestInit:
    def test_glorot_bound(self):
        w = nn.glorot(np.random.default_rng(0), (50, 40), 40, 50)
        assert np.max(np.abs(w)) <= math.sqrt(6 / 90)

    def test_biases_zero(self):
        layer = nn.Conv(ConvSpec((3, 3), 2, 4), np.random.default_rng(0))
        assert not np.any(layer.b.value)
