import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from damnet.exceptions import DataError, ShapeError
from damnet.layers import (
    AvgPool2d,
    BatchNorm,
    Conv2d,
    GlobalAvgPool,
    Linear,
    ReLU,
    concat_channels,
    conv_output_size,
    pool_output_size,
    softmax,
    softmax_cross_entropy,
    split_channels,
)


def rng(seed=0):
    return np.random.default_rng(seed)


class TestConcat:
    def test_channel_counts_add(self):
        a = rng().standard_normal((2, 12, 3, 4))
        b = rng(1).standard_normal((2, 24, 3, 4))
        out = concat_channels([a, b])
        assert out.shape == (2, 36, 3, 4)
        np.testing.assert_array_equal(out[:, :12], a)
        np.testing.assert_array_equal(out[:, 12:], b)

    def test_single_input_is_identity(self):
        a = rng().standard_normal((2, 5, 3, 3))
        assert concat_channels([a]) is a

    def test_split_of_ones_gradient(self):
        # direct index bookkeeping: each input gets an all-ones gradient
        # of its own shape
        a = rng().standard_normal((2, 3, 2, 2))
        b = rng(1).standard_normal((2, 5, 2, 2))
        grad = np.ones_like(concat_channels([a, b]))
        ga, gb = split_channels(grad, [3, 5])
        np.testing.assert_array_equal(ga, np.ones((2, 3, 2, 2)))
        np.testing.assert_array_equal(gb, np.ones((2, 5, 2, 2)))

    def test_mismatched_spatial_extents(self):
        a = np.zeros((2, 3, 4, 4))
        b = np.zeros((2, 3, 4, 5))
        with pytest.raises(ShapeError):
            concat_channels([a, b])

    def test_empty_list(self):
        with pytest.raises(ShapeError):
            concat_channels([])

    @given(st.lists(st.integers(min_value=1, max_value=6), min_size=1, max_size=5),
           st.integers(min_value=0, max_value=2 ** 31))
    @settings(max_examples=40, deadline=None)
    def test_split_reassembles_exactly(self, sizes, seed):
        grad = np.random.default_rng(seed).standard_normal((2, sum(sizes), 2, 3))
        parts = split_channels(grad, sizes)
        assert [p.shape[1] for p in parts] == sizes
        np.testing.assert_array_equal(np.concatenate(parts, axis=1), grad)


def conv_reference(x, weight, stride, pad):
    """Direct-summation convolution oracle (nested loops)."""
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, oh, ow))
    for b in range(n):
        for o in range(cout):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[b, o, i, j] = (patch * weight[o]).sum()
    return out


class TestConv2d:
    def test_initial_conv_geometry(self):
        conv = Conv2d(3, 16, 3, stride=1, pad=0, rng=rng())
        out = conv.forward(rng().standard_normal((2, 3, 11, 40)).astype(np.float32))
        assert out.shape == (2, 16, 9, 38)

    def test_identity_1x1_kernel(self):
        conv = Conv2d(1, 1, 1)
        conv.weight[...] = 1.0
        x = rng().standard_normal((2, 1, 4, 5)).astype(np.float32)
        np.testing.assert_allclose(conv.forward(x), x, rtol=1e-6)

    def test_2x2_kernel_direct_sum(self):
        conv = Conv2d(1, 1, 2, dtype=np.float64)
        conv.weight[...] = np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(1, 1, 2, 2)
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        out = conv.forward(x)
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 5.0

    def test_channel_mismatch(self):
        conv = Conv2d(3, 4, 3)
        with pytest.raises(ShapeError):
            conv.forward(np.zeros((1, 2, 5, 5)))

    @pytest.mark.parametrize("kernel,stride,pad", [(3, 1, 1), (3, 2, 0), (1, 1, 0), (3, 1, 0)])
    def test_matches_direct_summation(self, kernel, stride, pad):
        r = rng(kernel * 10 + stride)
        conv = Conv2d(2, 3, kernel, stride=stride, pad=pad, rng=r, dtype=np.float64)
        x = r.standard_normal((2, 2, 6, 7))
        np.testing.assert_allclose(
            conv.forward(x), conv_reference(x, conv.weight, stride, pad), atol=1e-12
        )

    @given(st.integers(3, 12), st.integers(3, 12), st.sampled_from([1, 3]),
           st.integers(1, 2), st.integers(0, 1))
    @settings(max_examples=30, deadline=None)
    def test_shape_formula_matches_realized(self, h, w, kernel, stride, pad):
        conv = Conv2d(1, 2, kernel, stride=stride, pad=pad, rng=rng(), dtype=np.float64)
        out = conv.forward(np.zeros((1, 1, h, w)))
        assert out.shape[2] == conv_output_size(h, kernel, stride, pad)
        assert out.shape[3] == conv_output_size(w, kernel, stride, pad)


class TestBatchNorm:
    def test_constant_per_channel_train(self):
        bn = BatchNorm(3, dtype=np.float64)
        x = np.ones((4, 3, 2, 2)) * np.array([1.0, -2.0, 7.0]).reshape(1, 3, 1, 1)
        out = bn.forward(x, train=True)
        np.testing.assert_allclose(out, 0.0, atol=1e-9)

    def test_two_point_batch_closed_form(self):
        bn = BatchNorm(1, dtype=np.float64)
        x = np.array([-1.0, 1.0]).reshape(2, 1, 1, 1)
        out = bn.forward(x, train=True)
        expected = 1.0 / np.sqrt(1.0 + 1e-5)  # (x - mean) / sqrt(var + eps)
        np.testing.assert_allclose(out.ravel(), [-expected, expected], atol=1e-12)

    def test_infer_mode_closed_form(self):
        bn = BatchNorm(1, dtype=np.float64)
        bn.gamma[...] = 2.0
        bn.beta[...] = 3.0
        out = bn.forward(np.ones((1, 1, 1, 1)), train=False)
        assert abs(out.item() - 5.0) < 1e-4
        assert out.item() == pytest.approx(2.0 / np.sqrt(1.0 + 1e-5) + 3.0, abs=1e-12)

    def test_degenerate_batch(self):
        bn = BatchNorm(3)
        with pytest.raises(DataError):
            bn.forward(np.zeros((1, 3, 1, 1), dtype=np.float32), train=True)

    def test_running_statistics_update(self):
        bn = BatchNorm(1, dtype=np.float64)
        x = np.array([0.0, 2.0]).reshape(2, 1, 1, 1)
        bn.forward(x, train=True)
        # new = 0.9 * old + 0.1 * batch; batch mean 1, batch var 1
        assert bn.running_mean.item() == pytest.approx(0.1)
        assert bn.running_var.item() == pytest.approx(0.9 * 1.0 + 0.1 * 1.0)

    def test_infer_mode_has_no_side_effects(self):
        bn = BatchNorm(2)
        before = (bn.running_mean.copy(), bn.running_var.copy())
        bn.forward(rng().standard_normal((3, 2, 2, 2)).astype(np.float32), train=False)
        np.testing.assert_array_equal(bn.running_mean, before[0])
        np.testing.assert_array_equal(bn.running_var, before[1])

    def test_train_output_moments(self):
        bn = BatchNorm(4, dtype=np.float64)
        bn.beta[...] = np.array([0.0, 1.0, -2.0, 0.5])
        x = rng(3).standard_normal((16, 4, 3, 5)) * 3.0 + 1.0
        out = bn.forward(x, train=True)
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), bn.beta, atol=1e-5)
        bn.beta[...] = 0.0
        out = bn.forward(x, train=True)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-3)


class TestReLU:
    def test_definition(self):
        relu = ReLU()
        out = relu.forward(np.array([[-1.0, 0.0, 2.0]]).reshape(1, 3, 1, 1))
        np.testing.assert_array_equal(out.ravel(), [0.0, 0.0, 2.0])

    def test_dead_region(self):
        relu = ReLU()
        x = -np.abs(rng().standard_normal((2, 3, 4, 4))) - 0.1
        out = relu.forward(x)
        np.testing.assert_array_equal(out, 0.0)
        np.testing.assert_array_equal(relu.backward(np.ones_like(x)), 0.0)

    def test_idempotent(self):
        relu = ReLU()
        x = rng(5).standard_normal((3, 2, 4, 4))
        once = relu.forward(x)
        np.testing.assert_array_equal(relu.forward(once), once)

    def test_gradient_zero_at_kink(self):
        relu = ReLU()
        relu.forward(np.zeros((1, 1, 1, 1)))
        assert relu.backward(np.ones((1, 1, 1, 1))).item() == 0.0


class TestAvgPool:
    def test_table_shapes(self):
        pool = AvgPool2d()
        assert pool.forward(np.zeros((1, 2, 9, 38), dtype=np.float32)).shape == (1, 2, 4, 19)
        assert pool.forward(np.zeros((1, 2, 4, 19), dtype=np.float32)).shape == (1, 2, 2, 9)

    def test_constant_preserved(self):
        pool = AvgPool2d()
        out = pool.forward(np.full((2, 3, 5, 6), 2.5))
        np.testing.assert_array_equal(out, 2.5)

    def test_too_small(self):
        with pytest.raises(ShapeError):
            AvgPool2d().forward(np.zeros((1, 1, 1, 4)))

    def test_backward_distributes_quarter(self):
        pool = AvgPool2d()
        x = rng().standard_normal((1, 1, 5, 4))
        pool.forward(x)
        dx = pool.backward(np.ones((1, 1, 2, 2)))
        np.testing.assert_array_equal(dx[0, 0, :4, :4], 0.25)
        np.testing.assert_array_equal(dx[0, 0, 4, :], 0.0)  # dropped odd row


class TestGlobalAvgPool:
    def test_constant(self):
        out = GlobalAvgPool().forward(np.full((1, 3, 2, 9), 4.0))
        assert out.shape == (1, 3, 1, 1)
        np.testing.assert_array_equal(out, 4.0)

    def test_direct_mean(self):
        out = GlobalAvgPool().forward(np.array([3.0, 5.0]).reshape(1, 1, 1, 2))
        assert out.item() == 4.0

    def test_backward_spreads_uniformly(self):
        pool = GlobalAvgPool()
        pool.forward(np.zeros((1, 1, 2, 9)))
        dx = pool.backward(np.ones((1, 1, 1, 1)))
        np.testing.assert_allclose(dx, 1.0 / 18.0)


class TestLinear:
    def test_identity(self):
        lin = Linear(3, 3)
        lin.weight[...] = np.eye(3)
        x = rng().standard_normal((2, 3))
        np.testing.assert_allclose(lin.forward(x), x, atol=1e-12)

    def test_dot_product(self):
        lin = Linear(2, 1, dtype=np.float64)
        lin.weight[...] = np.array([[1.0, 2.0]])
        lin.bias[...] = np.array([1.0])
        out = lin.forward(np.array([[3.0, 4.0]]))
        assert out.item() == 12.0

    def test_batching(self):
        lin = Linear(4, 3, rng=rng(2), dtype=np.float64)
        x = rng(3).standard_normal((2, 4))
        joint = lin.forward(x)
        np.testing.assert_allclose(joint[0], lin.forward(x[:1])[0], atol=1e-12)
        np.testing.assert_allclose(joint[1], lin.forward(x[1:])[0], atol=1e-12)

    def test_extent_mismatch(self):
        with pytest.raises(ShapeError):
            Linear(4, 3).forward(np.zeros((2, 5)))


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        for classes in (2, 5, 10):
            loss, _ = softmax_cross_entropy(np.zeros((3, classes)), np.zeros(3, dtype=int))
            assert loss == pytest.approx(np.log(classes), rel=1e-6)

    def test_extreme_logits_stable(self):
        loss, grad = softmax_cross_entropy(np.array([[1000.0, 0.0]]), np.array([0]))
        assert loss == pytest.approx(0.0, abs=1e-12)
        assert np.all(np.isfinite(grad))

    def test_rows_sum_to_one(self):
        probs = softmax(rng(7).standard_normal((6, 9)))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)

    def test_label_out_of_range(self):
        with pytest.raises(DataError):
            softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
        with pytest.raises(DataError):
            softmax_cross_entropy(np.zeros((2, 3)), np.array([-1, 0]))

    def test_gradient_is_softmax_minus_onehot_over_batch(self):
        logits = rng(11).standard_normal((4, 6))
        labels = np.array([0, 5, 2, 2])
        _, grad = softmax_cross_entropy(logits, labels)
        expected = softmax(logits)
        expected[np.arange(4), labels] -= 1.0
        np.testing.assert_allclose(grad, expected / 4.0, atol=1e-12)


@given(st.integers(2, 16), st.integers(2, 16))
@settings(max_examples=30, deadline=None)
def test_pool_shape_formula(h, w):
    out = AvgPool2d().forward(np.zeros((1, 1, h, w)))
    assert out.shape[2:] == (pool_output_size(h), pool_output_size(w))
