import numpy as np
import pytest

from mfdplan.autodiff import Tensor, concat, gradcheck


def test_quadratic_gradient_is_identity():
    theta = Tensor(np.random.default_rng(0).standard_normal(7), requires_grad=True)
    loss = theta.square().sum() * 0.5
    loss.backward()
    assert theta.grad == pytest.approx(theta.data)


def test_constant_loss_zero_gradient():
    theta = Tensor(np.ones(5), requires_grad=True)
    loss = Tensor(np.array(3.0)) * 2.0
    # theta does not appear: gradient stays unset
    loss.backward()
    assert theta.grad is None


def test_matmul_backward_shapes():
    rng = np.random.default_rng(1)
    a = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    ((a @ b).square()).sum().backward()
    assert a.grad.shape == (4, 3)
    assert b.grad.shape == (3, 5)


def test_batched_matmul_backward():
    rng = np.random.default_rng(2)
    a = Tensor(rng.standard_normal((6, 4, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((6, 3, 2)), requires_grad=True)
    err = gradcheck(lambda ps: ((ps[0] @ ps[1]).square()).mean(), [a, b],
                    n_directions=30, rng=rng)
    assert err < 1e-6


def test_broadcast_matmul_shared_weight():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((5, 4, 3)))
    w = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    err = gradcheck(lambda ps: ((x @ ps[0]).silu()).sum(), [w], n_directions=20,
                    rng=rng)
    assert err < 1e-6


def test_take_rows_with_duplicates():
    x = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    y = x.take_rows([1, 1, 3])
    y.sum().backward()
    expected = np.zeros((4, 3))
    expected[1] = 2.0
    expected[3] = 1.0
    assert np.array_equal(x.grad, expected)


def test_concat_backward():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones((2, 2)), requires_grad=True)
    out = concat([a, b], axis=1)
    (out * np.arange(5.0)).sum().backward()
    assert np.array_equal(a.grad, np.tile([0, 1, 2.0], (2, 1)))
    assert np.array_equal(b.grad, np.tile([3, 4.0], (2, 1)))


def test_reduction_axis_gradcheck():
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((3, 4, 5)), requires_grad=True)
    err = gradcheck(lambda ps: ps[0].mean(axis=1).square().sum(), [x],
                    n_directions=20, rng=rng)
    assert err < 1e-6
    err = gradcheck(lambda ps: ps[0].sum(axis=2, keepdims=True).silu().mean(),
                    [x], n_directions=20, rng=rng)
    assert err < 1e-6


@pytest.mark.parametrize("op", ["tanh", "silu", "sigmoid", "softplus", "exp",
                                "square"])
def test_elementwise_ops_gradcheck(op):
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((4, 6)) * 0.7, requires_grad=True)
    err = gradcheck(lambda ps: getattr(ps[0], op)().mean(), [x],
                    n_directions=25, rng=rng)
    assert err < 1e-6


def test_division_and_pow():
    rng = np.random.default_rng(6)
    x = Tensor(rng.standard_normal((3, 3)) + 3.0, requires_grad=True)
    y = Tensor(rng.standard_normal((3, 3)) + 3.0, requires_grad=True)
    err = gradcheck(lambda ps: ((ps[0] / ps[1]) + ps[0] ** 2).mean(), [x, y],
                    n_directions=25, rng=rng)
    assert err < 1e-6


def test_two_layer_net_100_directions():
    # the canonical oracle check: random MLP vs central differences
    rng = np.random.default_rng(7)
    w0 = Tensor(rng.standard_normal((8, 16)) * 0.4, requires_grad=True)
    b0 = Tensor(np.zeros(16), requires_grad=True)
    w1 = Tensor(rng.standard_normal((16, 1)) * 0.4, requires_grad=True)
    x = rng.standard_normal((10, 8))

    def f(ps):
        h = (Tensor(x) @ ps[0] + ps[1]).tanh()
        return (h @ ps[2]).square().mean()

    err = gradcheck(f, [w0, b0, w1], n_directions=100, rng=rng)
    assert err < 1e-5
