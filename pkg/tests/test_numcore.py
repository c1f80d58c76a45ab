import math

import numpy as np
import pytest

from hyperseg import numcore as nc
from hyperseg.numcore import Tensor

from gradcases import OPERATORS, gradient_error
from oracles import finite_difference_grads, naive_conv2d, naive_conv_transpose2d


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("op", sorted(OPERATORS))
def test_gradients_match_finite_differences(op, seed):
    assert gradient_error(op, seed) < 1e-4


# -- conv2d --------------------------------------------------------------------


def test_conv2d_identity_kernel():
    x = np.random.default_rng(0).normal(size=(1, 3, 4, 5))
    w = np.eye(3).reshape(3, 3, 1, 1)
    out = nc.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_sums_window():
    out = nc.conv2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), Tensor(np.ones((1, 1, 2, 2))))
    assert out.data.tolist() == [[[[10.0]]]]


@pytest.mark.parametrize("stride,padding,pad", [
    (1, "valid", (0, 0, 0, 0)),
    (1, "same", (1, 1, 1, 1)),
    (2, "same", (1, 1, 1, 1)),
    (2, 1, (1, 1, 1, 1)),
])
def test_conv2d_matches_naive_loops(stride, padding, pad):
    rng = np.random.default_rng(7)
    x, w, b = rng.normal(size=(1, 3, 5, 5)), rng.normal(size=(2, 3, 3, 3)), rng.normal(size=2)
    out = nc.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
    np.testing.assert_allclose(out.data, naive_conv2d(x, w, b, stride, pad), rtol=0, atol=1e-12)


def test_same_padding_puts_extra_pixel_on_high_side():
    # Even kernel: total padding 1 goes to the bottom/right.
    rng = np.random.default_rng(3)
    x, w = rng.normal(size=(1, 1, 4, 4)), rng.normal(size=(1, 1, 2, 2))
    out = nc.conv2d(Tensor(x), Tensor(w), padding="same")
    assert out.shape == (1, 1, 4, 4)
    np.testing.assert_allclose(out.data, naive_conv2d(x, w, pad=(0, 1, 0, 1)), atol=1e-12)


def test_conv2d_output_size_formula():
    x = Tensor(np.zeros((1, 1, 9, 7)))
    out = nc.conv2d(x, Tensor(np.zeros((1, 1, 3, 3))), stride=2, padding=1)
    assert out.shape == (1, 1, (9 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1)


def test_conv2d_errors():
    with pytest.raises(ValueError, match="channel mismatch"):
        nc.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ValueError, match="empty"):
        nc.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_conv2d_is_linear():
    rng = np.random.default_rng(11)
    x, y, w = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(4, 3, 3, 3))
    a, b = 1.7, -0.3

    def conv(v):
        return nc.conv2d(Tensor(v), Tensor(w), padding="same").data

    np.testing.assert_allclose(conv(a * x + b * y), a * conv(x) + b * conv(y), rtol=0, atol=1e-12)


# -- conv1x1 -------------------------------------------------------------------


def test_conv1x1_identity_and_matrix():
    x = np.random.default_rng(0).normal(size=(2, 3, 2, 2))
    np.testing.assert_array_equal(nc.conv1x1(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)
    px = Tensor(np.array([1.0, 2.0]).reshape(1, 2, 1, 1))
    out = nc.conv1x1(px, Tensor([[1.0, 1.0], [1.0, -1.0]]))
    assert out.data.ravel().tolist() == [3.0, -1.0]


def test_conv1x1_equals_conv2d_with_unit_kernel():
    rng = np.random.default_rng(5)
    x, w, b = rng.normal(size=(2, 4, 3, 5)), rng.normal(size=(3, 4)), rng.normal(size=3)
    a = nc.conv1x1(Tensor(x), Tensor(w), Tensor(b)).data
    c = nc.conv2d(Tensor(x), Tensor(w.reshape(3, 4, 1, 1)), Tensor(b)).data
    np.testing.assert_allclose(a, c, rtol=0, atol=1e-14)


def test_conv1x1_channel_mismatch():
    with pytest.raises(ValueError, match="channel mismatch"):
        nc.conv1x1(Tensor(np.zeros((1, 2, 1, 1))), Tensor(np.zeros((2, 3))))


# -- conv_transpose2d ----------------------------------------------------------


def test_conv_transpose_single_tap_broadcasts_kernel():
    out = nc.conv_transpose2d(Tensor([[[[2.5]]]]), Tensor(np.ones((1, 1, 2, 2))), stride=2)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 2.5))


@pytest.mark.parametrize("stride", [1, 2, 3])
def test_conv_transpose_matches_scatter_loops(stride):
    rng = np.random.default_rng(stride)
    x, w = rng.normal(size=(2, 3, 4, 3)), rng.normal(size=(3, 2, 3, 2))
    out = nc.conv_transpose2d(Tensor(x), Tensor(w), stride=stride)
    np.testing.assert_allclose(out.data, naive_conv_transpose2d(x, w, stride), rtol=0, atol=1e-12)


def test_stride1_transpose_is_full_correlation_with_flipped_kernel():
    rng = np.random.default_rng(21)
    x, w = rng.normal(size=(1, 2, 5, 4)), rng.normal(size=(2, 3, 3, 3))
    out = nc.conv_transpose2d(Tensor(x), Tensor(w)).data
    flipped = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # [out, in, kh, kw]
    expected = naive_conv2d(x, flipped, pad=(2, 2, 2, 2))
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)


@pytest.mark.parametrize("stride", [1, 2])
def test_adjoint_identity(stride):
    rng = np.random.default_rng(40 + stride)
    x, w = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 2, 2))
    y_shape = nc.conv2d(Tensor(x), Tensor(w), stride=stride).shape
    y = rng.normal(size=y_shape)
    lhs = np.sum(nc.conv2d(Tensor(x), Tensor(w), stride=stride).data * y)
    rhs = np.sum(x * nc.conv_transpose2d(Tensor(y), Tensor(w), stride=stride).data)
    assert abs(lhs - rhs) < 1e-10


def test_conv_transpose_forward_equals_conv2d_input_gradient():
    rng = np.random.default_rng(8)
    x, w = Tensor(rng.normal(size=(1, 3, 6, 6)), requires_grad=True), rng.normal(size=(2, 3, 2, 2))
    out = nc.conv2d(x, Tensor(w), stride=2)
    g = rng.normal(size=out.shape)
    nc.backward(nc.sum(nc.mul(out, Tensor(g))))
    np.testing.assert_allclose(nc.conv_transpose2d(Tensor(g), Tensor(w), stride=2).data, x.grad, atol=1e-12)


# -- maxpool / relu / add / concat / upsample ----------------------------------


def test_maxpool_examples():
    assert nc.maxpool2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])).data.tolist() == [[[[4.0]]]]
    const = nc.maxpool2d(Tensor(np.full((1, 2, 6, 4), 0.5)))
    assert const.shape == (1, 2, 3, 2)
    assert np.all(const.data == 0.5)


def test_maxpool_gradient_is_argmax_indicator():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 2, 4, 6))
    t = Tensor(x.copy(), requires_grad=True)
    nc.backward(nc.sum(nc.maxpool2d(t)))
    (fd,) = finite_difference_grads(lambda: float(nc.maxpool2d(Tensor(x)).data.sum()), [x])
    np.testing.assert_allclose(t.grad, fd, atol=1e-9)
    assert set(np.unique(t.grad)) == {0.0, 1.0}
    assert t.grad.sum() == 2 * 2 * 3


def test_maxpool_tie_goes_to_first_maximiser():
    t = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    nc.backward(nc.sum(nc.maxpool2d(t)))
    assert t.grad.ravel().tolist() == [1.0, 0.0, 0.0, 0.0]


def test_relu_add_concat_upsample_examples():
    z = np.zeros((1, 2, 2, 2))
    assert np.all(nc.relu(Tensor(-np.ones((1, 1, 2, 2)))).data == 0)
    x = np.arange(8.0).reshape(1, 2, 2, 2)
    np.testing.assert_array_equal(nc.add(Tensor(x), Tensor(z)).data, x)
    cat = nc.concat_channels(Tensor(x), Tensor(z))
    assert cat.shape == (1, 4, 2, 2)
    np.testing.assert_array_equal(cat.data[:, :2], x)
    np.testing.assert_array_equal(nc.upsample_nearest(Tensor(x), 1).data, x)
    up = nc.upsample_nearest(Tensor(x), 2).data
    assert up.shape == (1, 2, 4, 4)
    assert up[0, 1, 3, 2] == x[0, 1, 1, 1]


# -- loss / backward -----------------------------------------------------------


def test_uniform_logits_give_log_c():
    for c in (2, 3, 6):
        loss = nc.softmax_ce_loss(Tensor(np.zeros((1, c, 3, 2))), np.zeros((3, 2), dtype=int))
        assert float(loss.data) == pytest.approx(math.log(c), abs=1e-15)


def test_confident_correct_logit_goes_to_zero():
    values = []
    for scale in (1.0, 10.0, 100.0):
        logits = np.zeros((1, 3, 1, 1))
        logits[0, 1] = scale
        values.append(float(nc.softmax_ce_loss(Tensor(logits), np.array([[1]])).data))
    assert values[0] > values[1] > values[2]
    assert values[2] < 1e-40


def test_cross_entropy_matches_per_pixel_formula():
    rng = np.random.default_rng(13)
    logits = rng.normal(size=(1, 2, 2, 2))
    target = rng.integers(0, 2, size=(2, 2))
    expected = []
    for i in range(2):
        for j in range(2):
            z0, z1 = logits[0, 0, i, j], logits[0, 1, i, j]
            zt = z1 if target[i, j] else z0
            expected.append(math.log(math.exp(z0) + math.exp(z1)) - zt)
    loss = nc.softmax_ce_loss(Tensor(logits), target)
    assert float(loss.data) == pytest.approx(sum(expected) / 4, abs=1e-14)


def test_cross_entropy_ignore_index():
    logits = np.zeros((1, 3, 1, 2))
    logits[0, 2, 0, 1] = 5.0
    loss = nc.softmax_ce_loss(Tensor(logits), np.array([[0, 2]]), ignore_index=0)
    assert float(loss.data) == pytest.approx(math.log(1 + 2 * math.exp(-5.0)))


def test_backward_simple_losses():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    nc.backward(nc.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    x.zero_grad()
    nc.backward(nc.sum(nc.mul(x, x)))
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_gradients_accumulate_across_uses():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    nc.backward(nc.sum(nc.add(nc.mul(x, x), x)))  # d/dx (x^2 + x)
    np.testing.assert_array_equal(x.grad, 2 * x.data + 1)
    nc.backward(nc.sum(x))
    np.testing.assert_array_equal(x.grad, 2 * x.data + 2)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        nc.backward(nc.mul(x, x))


def test_no_grad_records_nothing():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with nc.no_grad():
        y = nc.relu(x)
    assert not y.requires_grad and y.is_leaf


def test_forward_and_backward_are_deterministic():
    def run():
        rng = np.random.default_rng(99)
        x = Tensor(rng.normal(size=(1, 3, 8, 8)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
        out = nc.maxpool2d(nc.relu(nc.conv2d(x, w, padding="same")))
        loss = nc.softmax_ce_loss(out, rng.integers(0, 4, size=(4, 4)))
        nc.backward(loss)
        return loss.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()
