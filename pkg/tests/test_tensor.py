import numpy as np
import pytest

from convmixer import nn
from convmixer.gradcheck import check_gradients, numerical_grad
from convmixer.tensor import ShapeError, Tensor, default_dtype, elementwise, matmul, no_grad, set_debug


def test_add_values():
    np.testing.assert_array_equal(elementwise("add", Tensor([1, 2]), Tensor([3, 4])).data, [4, 6])


def test_mul_by_zeros_kills_gradient():
    x = Tensor([1.5, -2.0, 3.0], requires_grad=True)
    out = x * Tensor(np.zeros(3))
    np.testing.assert_array_equal(out.data, 0)
    out.sum().backward()
    np.testing.assert_array_equal(x.grad, 0)


def test_fan_out_sums_adjoints():
    x = Tensor(np.arange(4.0), requires_grad=True)
    (x + x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2, 2, 2, 2])


def test_sub_gradients():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([5.0, 7.0], requires_grad=True)
    (a - b).sum().backward()
    np.testing.assert_array_equal(a.grad, [1, 1])
    np.testing.assert_array_equal(b.grad, [-1, -1])


def test_per_channel_broadcast_reduces_gradient():
    x = Tensor(np.ones((2, 3, 2, 2)), requires_grad=True)
    scale = Tensor(np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1, 1), requires_grad=True)
    out = x * scale
    assert out.shape == (2, 3, 2, 2)
    out.sum().backward()
    np.testing.assert_array_equal(scale.grad.reshape(-1), [8, 8, 8])
    np.testing.assert_array_equal(x.grad[:, 2], 3)


@pytest.mark.parametrize("a_shape,b_shape", [((2, 3), (3, 2)), ((2, 3), (2,)), ((2, 3), (2, 2))])
def test_elementwise_shape_mismatch(a_shape, b_shape):
    with pytest.raises(ShapeError):
        Tensor(np.ones(a_shape)) + Tensor(np.ones(b_shape))


def test_zero_extent_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 0)))


def test_matmul_identity_and_arithmetic():
    m = Tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), m).data, m.data)
    np.testing.assert_array_equal((Tensor([[1, 2]]) @ Tensor([[3], [4]])).data, [[11]])


def test_matmul_dimension_mismatch():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_matmul_gradient_matches_finite_differences(rng):
    with default_dtype(np.float64):
        a = Tensor(rng.uniform(-1, 1, (3, 3)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, (3, 3)), requires_grad=True)
        assert check_gradients(lambda: (a @ b).sum(), [a, b]) < 1e-3
    # closed form: d sum(ab)/da = 1 b^T
    np.testing.assert_allclose(a.grad, np.ones((3, 3)) @ b.data.T)


def test_square_gradient():
    x = Tensor([3.0], requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, [6.0])


def test_independent_loss_gives_zero_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([3.0, 4.0], requires_grad=True)
    loss = (y * y).sum() + (x * Tensor([0.0, 0.0])).sum()
    loss.backward()
    np.testing.assert_array_equal(x.grad, [0, 0])


def test_unused_leaf_keeps_no_grad():
    x = Tensor([1.0], requires_grad=True)
    y = Tensor([2.0], requires_grad=True)
    (y * y).sum().backward()
    assert x.grad is None


def test_gelu_of_conv_gradient(rng):
    with default_dtype(np.float64):
        x = Tensor(rng.uniform(-1, 1, (1, 2, 5, 5)), requires_grad=True)
        w = Tensor(rng.uniform(-1, 1, (3, 2, 3, 3)), requires_grad=True)
        proj = Tensor(rng.uniform(-1, 1, (1, 3, 5, 5)))
        spec = nn.ConvSpec(2, 3, 3, padding="same")
        assert check_gradients(lambda: (nn.gelu(nn.conv2d(x, w, None, spec)) * proj).sum(), [x, w]) < 1e-3


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        (x * x).backward()


def test_backward_twice_is_an_error():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(RuntimeError):
        loss.backward()


def test_gradients_accumulate_across_graphs_until_reset():
    x = Tensor([1.0], requires_grad=True)
    (x * x).sum().backward()
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, [4.0])
    x.zero_grad()
    (x * x).sum().backward()
    np.testing.assert_allclose(x.grad, [2.0])


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * x
    assert not y.requires_grad and y.op == "mul"


def test_ops_do_not_mutate_inputs(rng):
    a = Tensor(rng.uniform(-1, 1, (2, 3)), requires_grad=True)
    b = Tensor(rng.uniform(-1, 1, (3, 2)), requires_grad=True)
    before = a.data.copy(), b.data.copy()
    ((a @ b) * (a @ b)).sum().backward()
    np.testing.assert_array_equal(a.data, before[0])
    np.testing.assert_array_equal(b.data, before[1])


def test_default_dtype_is_float32():
    assert Tensor([1, 2]).data.dtype == np.float32
    with default_dtype(np.float64):
        assert Tensor([1, 2]).data.dtype == np.float64


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_debug_mode_surfaces_non_finite():
    set_debug(True)
    try:
        with pytest.raises(FloatingPointError):
            Tensor([1e30]) * Tensor([1e30])
    finally:
        set_debug(False)


def test_numerical_grad_restores_input(rng):
    x = Tensor(rng.uniform(-1, 1, 4))
    before = x.data.copy()
    numerical_grad(lambda: (x * x).sum(), x)
    np.testing.assert_array_equal(x.data, before)


def test_reshape_and_mean_gradients():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    x.reshape(3, 2).mean().backward()
    np.testing.assert_allclose(x.grad, np.full((2, 3), 1 / 6))
