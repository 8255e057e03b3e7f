"""Autograd core: forward values, closed-form grads vs numeric oracle, tape rules."""

import numpy as np
import pytest

from bwssl import tensor as T
from bwssl.errors import ConfigurationError, ShapeError
from bwssl.tensor import Tensor, concat, conv2d, stop_gradient
from oracles import conv2d_reference, gradcheck, numeric_grad


# ---------------------------------------------------------------------------
# the oracles themselves get sanity-checked before anything relies on them

def test_numeric_grad_oracle_on_known_derivative():
    # d/dx sum(x^2) = 2x, checked at a hand-picked point
    g = numeric_grad(lambda x: float((x ** 2).sum()), np.array([3.0, -1.5]))
    assert np.allclose(g, [6.0, -3.0], atol=1e-8)


def test_conv_reference_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 4, 4))
    w = np.zeros((3, 3, 1, 1))
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    assert np.allclose(conv2d_reference(x, w), x, atol=1e-12)


def test_conv_reference_local_sums():
    x = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
    w = np.ones((1, 1, 2, 2))
    out = conv2d_reference(x, w)
    # each output cell is the sum of the 2x2 patch under it
    assert np.allclose(out[0, 0], [[0 + 1 + 3 + 4, 1 + 2 + 4 + 5],
                                   [3 + 4 + 6 + 7, 4 + 5 + 7 + 8]])


# ---------------------------------------------------------------------------
# elementwise ops

def test_add_mul_forward_and_grad():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    y = Tensor([4.0, 5.0, 6.0], requires_grad=True)
    z = (x * y + x).sum()
    z.backward()
    assert np.allclose(z.data, 4 + 10 + 18 + 6)
    assert np.allclose(x.grad, [5.0, 6.0, 7.0])  # y + 1
    assert np.allclose(y.grad, [1.0, 2.0, 3.0])  # x


def test_relu_subgradient_zero_at_kink():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    x.relu().sum().backward()
    assert np.array_equal(x.grad, [0.0, 0.0, 1.0])


def test_sqrt_derivative_at_four():
    x = Tensor([4.0], requires_grad=True)
    x.sqrt().sum().backward()
    assert np.allclose(x.grad, [0.25])


def test_square_derivative_at_three():
    x = Tensor([3.0], requires_grad=True)
    x.square().sum().backward()
    assert np.allclose(x.grad, [6.0])


def test_exp_log_roundtrip_grad():
    ok, worst = gradcheck(lambda a: (a.exp().log() * a).sum(), [np.array([0.5, 1.5, 2.5])])
    assert ok, worst


def test_division_clamps_tiny_denominator_and_counts_it():
    T.clamp_warnings.clear()
    num = Tensor([1.0, 1.0, 1.0])
    den = Tensor(np.array([1e-30, -1e-30, 2.0], dtype=np.float64))
    out = num / den
    # sign-preserving clamp to the epsilon floor
    assert out.data[0] == pytest.approx(1.0 / T.division_epsilon)
    assert out.data[1] == pytest.approx(-1.0 / T.division_epsilon)
    assert out.data[2] == pytest.approx(0.5)
    assert T.clamp_warnings["div"] == 2


def test_signed_sqrt_forward_and_finite_grad_at_zero():
    x = Tensor([4.0, -4.0, 0.0], requires_grad=True)
    y = x.signed_sqrt()
    assert np.allclose(y.data, [2.0, -2.0, 0.0])
    y.sum().backward()
    assert np.all(np.isfinite(x.grad))
    assert x.grad[0] == pytest.approx(0.25)
    assert x.grad[1] == pytest.approx(0.25)


def test_neg_sub_reflected_ops():
    x = Tensor([2.0], requires_grad=True)
    z = (5.0 - x) + (-x) + 1.0 * x + x * 2.0 + 8.0 / x
    z.sum().backward()
    # d/dx (5 - x - x + x + 2x + 8/x) = 1 - 8/x^2
    assert np.allclose(x.grad, [1.0 - 2.0])


# ---------------------------------------------------------------------------
# broadcasting

def test_broadcast_add_reduces_grad_to_operand_shape():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones((3,)), requires_grad=True)
    (a + b).sum().backward()
    assert a.grad.shape == (2, 3)
    assert b.grad.shape == (3,)
    assert np.array_equal(b.grad, [2.0, 2.0, 2.0])  # summed over the broadcast row


def test_broadcast_keepdim_column():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones((2, 1)), requires_grad=True)
    (a * b).sum().backward()
    assert b.grad.shape == (2, 1)
    assert np.array_equal(b.grad, [[3.0], [3.0]])


def test_incompatible_broadcast_raises():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


# ---------------------------------------------------------------------------
# matmul and shape ops

def test_matmul_identity_passthrough():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((3, 3))
    x = Tensor(a, requires_grad=True)
    y = x @ Tensor(np.eye(3))
    assert np.allclose(y.data, a)


def test_matmul_grads_match_numeric():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    ok, worst = gradcheck(lambda p, q: (p @ q).sum(), [a, b])
    assert ok, worst


def test_matmul_rejects_non_2d():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 2, 2))) @ Tensor(np.ones((2, 2)))
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_reshape_transpose_grad_roundtrip():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((2, 3, 4))
    ok, worst = gradcheck(
        lambda x: (x.transpose((2, 0, 1)).reshape(4, 6) * 2.0).sum(), [a])
    assert ok, worst


def test_transpose_default_reverses_axes():
    x = Tensor(np.ones((2, 3, 4)), requires_grad=True)
    y = x.transpose()
    assert y.shape == (4, 3, 2)
    y.sum().backward()
    assert x.grad.shape == (2, 3, 4)


def test_concat_backward_splits_by_segment():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones((3, 2)), requires_grad=True)
    out = concat([a, b], axis=0)
    assert out.shape == (5, 2)
    (out * Tensor(np.arange(10, dtype=np.float64).reshape(5, 2))).sum().backward()
    assert np.array_equal(a.grad, [[0, 1], [2, 3]])
    assert np.array_equal(b.grad, [[4, 5], [6, 7], [8, 9]])


# ---------------------------------------------------------------------------
# reductions

def test_sum_mean_grads():
    x = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((2, 3)))
    y = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3), requires_grad=True)
    y.mean().backward()
    assert np.allclose(y.grad, np.full((2, 3), 1.0 / 6.0))


def test_axis_reductions_keepdims():
    x = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3), requires_grad=True)
    m = x.mean(axis=0, keepdims=True)
    assert m.shape == (1, 3)
    m.sum().backward()
    assert np.allclose(x.grad, np.full((2, 3), 0.5))


def test_max_splits_gradient_equally_among_ties():
    x = Tensor([3.0, 1.0, 3.0], requires_grad=True)
    x.max().backward()
    assert np.allclose(x.grad, [0.5, 0.0, 0.5])


def test_max_axis_grad():
    x = Tensor([[1.0, 5.0], [7.0, 2.0]], requires_grad=True)
    x.max(axis=1).sum().backward()
    assert np.array_equal(x.grad, [[0.0, 1.0], [1.0, 0.0]])


def test_reduce_rejects_empty_axis_and_bad_axis():
    with pytest.raises(ShapeError):
        Tensor(np.ones((0, 3))).sum(axis=0)
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))).sum(axis=5)


# ---------------------------------------------------------------------------
# tape semantics

def test_backward_requires_scalar():
    with pytest.raises(ShapeError):
        Tensor(np.ones(3), requires_grad=True).backward()


def test_gradients_accumulate_across_backward_calls():
    x = Tensor([2.0], requires_grad=True)
    (x * x).sum().backward()
    first = x.grad.copy()
    (x * x).sum().backward()
    assert np.array_equal(x.grad, 2 * first)
    x.zero_grad()
    assert np.array_equal(x.grad, [0.0])


def test_diamond_graph_accumulates_through_shared_node():
    # z = (y + y*y) with y = 2x: dz/dx = 2 + 8x
    x = Tensor([3.0], requires_grad=True)
    y = x * 2.0
    z = (y + y * y).sum()
    z.backward()
    assert np.allclose(x.grad, [2.0 + 8.0 * 3.0])


def test_same_tensor_used_twice_in_one_op():
    x = Tensor([3.0], requires_grad=True)
    (x * x).sum().backward()
    assert np.allclose(x.grad, [6.0])


def test_no_grad_tracking_when_not_required():
    x = Tensor([1.0, 2.0])
    y = x * 3.0 + 1.0
    assert y._backward is None and y._prev == ()
    assert not y.requires_grad


# ---------------------------------------------------------------------------
# stop_gradient

def test_stop_gradient_forward_bitwise_identity():
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((5, 5)).astype(np.float32), requires_grad=True)
    s = stop_gradient(x)
    assert np.array_equal(s.data, x.data)
    assert not s.requires_grad


def test_stop_gradient_blocks_exactly():
    # d/dx [ stop(x) * x ] = stop(x) = x, not 2x
    x = Tensor([3.0], requires_grad=True)
    (stop_gradient(x) * x).sum().backward()
    assert np.array_equal(x.grad, [3.0])


def test_stop_gradient_upstream_contribution_is_exact_zero():
    x = Tensor([5.0], requires_grad=True)
    y = stop_gradient(x * 2.0)
    (y * y).sum().backward()
    assert x.grad is None or np.array_equal(x.grad, [0.0])


# ---------------------------------------------------------------------------
# convolution

def test_conv_identity_kernel_is_identity():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
    w = np.zeros((3, 3, 1, 1), dtype=np.float32)
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    out = conv2d(Tensor(x), Tensor(w))
    assert np.allclose(out.data, x, atol=1e-7)


def test_conv_local_sum_kernel():
    x = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
    w = np.ones((1, 1, 2, 2))
    out = conv2d(Tensor(x), Tensor(w))
    assert np.allclose(out.data, conv2d_reference(x, w), atol=1e-12)


@pytest.mark.parametrize("shape,kshape,stride,pad,groups", [
    ((2, 3, 8, 8), (4, 3, 3, 3), 1, 1, 1),
    ((1, 2, 7, 7), (3, 2, 3, 3), 2, 1, 1),
    ((2, 4, 6, 6), (4, 2, 3, 3), 1, 0, 2),
    ((1, 6, 5, 5), (6, 2, 1, 1), 1, 0, 3),
    ((2, 3, 9, 9), (2, 3, 5, 5), 2, 2, 1),
])
def test_conv_im2col_matches_loop_oracle(shape, kshape, stride, pad, groups):
    rng = np.random.default_rng(6)
    x = rng.standard_normal(shape)
    w = rng.standard_normal(kshape)
    fast = conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad, groups=groups)
    ref = conv2d_reference(x, w, stride=stride, padding=pad, groups=groups)
    assert np.allclose(fast.data, ref, atol=1e-10)


@pytest.mark.parametrize("stride,pad,groups", [(1, 0, 1), (2, 1, 1), (1, 1, 2)])
def test_conv_direct_method_matches_im2col(stride, pad, groups):
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 4, 6, 6))
    w = rng.standard_normal((4, 4 // groups, 3, 3))
    a = conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad, groups=groups, method="im2col")
    b = conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad, groups=groups, method="direct")
    assert np.allclose(a.data, b.data, atol=1e-10)


@pytest.mark.parametrize("stride,pad,groups,method", [
    (1, 0, 1, "im2col"),
    (2, 1, 1, "im2col"),
    (1, 1, 2, "im2col"),
    (1, 0, 1, "direct"),
])
def test_conv_grads_match_numeric(stride, pad, groups, method):
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 2, 5, 5))
    w = rng.standard_normal((2, 2 // groups, 3, 3))
    ok, worst = gradcheck(
        lambda a, b: (conv2d(a, b, stride=stride, padding=pad,
                             groups=groups, method=method) * 0.5).sum(),
        [x, w])
    assert ok, worst


def test_conv_rejects_bad_group_config():
    x = Tensor(np.ones((1, 3, 4, 4)))
    w = Tensor(np.ones((4, 1, 3, 3)))
    with pytest.raises(ConfigurationError):
        conv2d(x, w, groups=2)  # 3 channels not divisible by 2


def test_conv_rejects_kernel_larger_than_input():
    x = Tensor(np.ones((1, 1, 2, 2)))
    w = Tensor(np.ones((1, 1, 5, 5)))
    with pytest.raises(ConfigurationError):
        conv2d(x, w)


def test_conv_rejects_channel_mismatch():
    x = Tensor(np.ones((1, 4, 4, 4)))
    w = Tensor(np.ones((2, 3, 3, 3)))
    with pytest.raises(ShapeError):
        conv2d(x, w)


# ---------------------------------------------------------------------------
# composites and determinism

def test_gradcheck_small_mlp_chain():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((4, 3))
    w1 = rng.standard_normal((3, 5))
    w2 = rng.standard_normal((5, 2))
    ok, worst = gradcheck(
        lambda a, u, v: ((a @ u).relu() @ v).square().mean(), [x, w1, w2])
    assert ok, worst


def test_float32_graph_stays_float32():
    x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    y = ((x * 2.0 + 1.0) / 3.0).sum()
    y.backward()
    assert x.grad.dtype == np.float32


def test_repeated_runs_are_bitwise_identical():
    def run():
        rng = np.random.default_rng(10)
        x = Tensor(rng.standard_normal((4, 4)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 4)).astype(np.float32), requires_grad=True)
        loss = ((x @ w).relu().mean()).square()
        loss.backward()
        return loss.data.copy(), x.grad.copy(), w.grad.copy()

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert np.array_equal(l1, l2)
    assert np.array_equal(gx1, gx2)
    assert np.array_equal(gw1, gw2)
