import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from densetl.tensor import (
    GradientCheckError,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    add,
    backward,
    concat_channels,
    grad_check,
    matmul,
    mul,
    primitive_forward,
    reduce_mean,
    reduce_sum,
    reshape,
    scalar_mul,
    slice_channels,
    sub,
)

from conftest import weighted_sum


def test_default_dtype_is_float32():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert Tensor(np.zeros(2, dtype=np.float64)).dtype == np.float32
    assert Tensor([1.0], dtype=np.float64).dtype == np.float64


def test_add_mul_gradients_by_hand():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0, 5.0], requires_grad=True)
    loss = reduce_sum(mul(add(a, b), a))  # sum((a+b)*a)
    g = backward(loss, [a, b])
    np.testing.assert_allclose(g[a].data, 2 * a.data + b.data)
    np.testing.assert_allclose(g[b].data, a.data)


def test_broadcast_add_reduces_gradient():
    x = Tensor(np.ones((4, 3)), requires_grad=True)
    bias = Tensor(np.zeros(3), requires_grad=True)
    g = backward(reduce_sum(add(x, bias)), [bias])
    np.testing.assert_array_equal(g[bias].data, [4, 4, 4])


def test_shared_node_accumulates():
    x = Tensor([2.0], requires_grad=True)
    y = mul(x, x)
    loss = reduce_sum(add(y, y))  # 2x^2
    assert backward(loss, [x])[x].item() == pytest.approx(8.0)


def test_matmul_gradient():
    rng = np.random.default_rng(0)
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    g = backward(reduce_sum(matmul(a, b)), [a, b])
    np.testing.assert_allclose(g[a].data, np.ones((3, 2)) @ b.data.T, rtol=1e-6)
    np.testing.assert_allclose(g[b].data, a.data.T @ np.ones((3, 2)), rtol=1e-6)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_incompatible_broadcast_raises_shape_error():
    with pytest.raises(ShapeError):
        add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_backward_requires_scalar_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        backward(mul(x, x))


def test_backward_on_detached_loss():
    with pytest.raises(ValueError):
        backward(reduce_sum(Tensor([1.0])))


def test_unreachable_parameter_gets_zero_gradient():
    x = Tensor([1.0], requires_grad=True)
    unused = Tensor(np.ones((2, 2)), requires_grad=True)
    g = backward(reduce_sum(mul(x, x)), [x, unused])
    np.testing.assert_array_equal(g[unused].data, np.zeros((2, 2)))


def test_graph_released_unless_retained():
    x = Tensor([3.0], requires_grad=True)
    loss = reduce_sum(mul(x, x))
    g1 = backward(loss, [x], retain_graph=True)
    g2 = backward(loss, [x])
    assert g1[x].item() == g2[x].item() == pytest.approx(6.0)
    assert loss._backward is None
    # once released, the loss no longer reaches x
    assert backward(loss, [x])[x].item() == 0.0


def test_tape_is_topological():
    x = Tensor([1.0], requires_grad=True)
    y = mul(x, x)
    z = add(y, x)
    loss = reduce_sum(z)
    order = Tape.trace(loss).nodes
    pos = {id(n): i for i, n in enumerate(order)}
    for node in order:
        for parent in node._parents:
            assert pos[id(parent)] < pos[id(node)]


def test_deep_chain_does_not_recurse():
    x = Tensor([1.0], requires_grad=True)
    y = x
    for _ in range(5000):
        y = scalar_mul(y, 1.0)
    assert backward(reduce_sum(y), [x])[x].item() == 1.0


def test_non_finite_forward_raises():
    big = Tensor([3e38], requires_grad=True)
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        mul(big, big)


def test_reshape_and_reductions():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    loss = reduce_mean(reshape(x, (3, 2)))
    np.testing.assert_allclose(backward(loss, [x])[x].data, np.full((2, 3), 1 / 6))
    with pytest.raises(ShapeError):
        reshape(x, (4, 2))
    s = reduce_sum(x, axis=1, keepdims=True)
    assert s.shape == (2, 1)


def test_concat_and_slice_channels_roundtrip():
    rng = np.random.default_rng(1)
    a = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 5, 4, 4)), requires_grad=True)
    c = concat_channels([a, b])
    assert c.shape == (2, 8, 4, 4)
    np.testing.assert_array_equal(slice_channels(c, 3, 8).data, b.data)
    g = backward(weighted_sum(c), [a, b])
    r = np.random.default_rng(0).standard_normal(c.shape).astype(np.float32)
    np.testing.assert_allclose(g[a].data, r[:, :3], rtol=1e-6)
    np.testing.assert_allclose(g[b].data, r[:, 3:], rtol=1e-6)
    with pytest.raises(ShapeError):
        concat_channels([a, Tensor(np.zeros((2, 1, 3, 3)))])


def test_primitive_forward_dispatch():
    a, b = Tensor([1.0, 2.0]), Tensor([3.0, 4.0])
    np.testing.assert_array_equal(primitive_forward("add", [a, b]).data, [4, 6])
    np.testing.assert_array_equal(primitive_forward("sub", [a, b]).data, [-2, -2])
    with pytest.raises(ValueError):
        primitive_forward("nope", [a])


def test_grad_check_detects_wrong_gradient():
    from densetl.tensor import make_op

    def bad_square(x):
        return reduce_sum(make_op("bad", x.data ** 2, (x,), lambda g: (g * 3 * x.data,)))

    with pytest.raises(GradientCheckError):
        grad_check(bad_square, np.array([0.5, 1.5]), tol=1e-3)


def test_grad_check_exclude_mask_skips_coordinates():
    from densetl.tensor import make_op

    def half_wrong(x):
        wrong = x.data.copy()
        wrong[0] = 100.0
        return reduce_sum(make_op("hw", x.data ** 2 / 2, (x,), lambda g: (g * wrong,)))

    err = grad_check(half_wrong, np.array([1.0, 2.0]), exclude=np.array([True, False]))
    assert err < 1e-8


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
              elements=st.floats(-3, 3)))
def test_elementwise_grad_check_property(x):
    err = grad_check(lambda t: weighted_sum(sub(mul(t, t), scalar_mul(t, 0.5))), x)
    assert err < 1e-6


def test_worked_examples():
    np.testing.assert_array_equal(add(Tensor([1, 2]), Tensor([3, 4])).data, [4, 6])
    np.testing.assert_array_equal(matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2)))).data, np.full((2, 2), 3))
    c = concat_channels([Tensor(np.zeros((2, 4, 3, 3))), Tensor(np.zeros((2, 8, 3, 3)))])
    assert c.shape == (2, 12, 3, 3)
    x = Tensor(np.zeros(3), requires_grad=True)
    np.testing.assert_array_equal(backward(reduce_sum(x), [x])[x].data, [1, 1, 1])
    x = Tensor([1.0, 2.0], requires_grad=True)
    np.testing.assert_array_equal(backward(reduce_sum(mul(x, x)), [x])[x].data, [2, 4])


def test_grad_check_examples():
    rng = np.random.default_rng(3)
    assert grad_check(lambda t: reduce_sum(t), rng.standard_normal(5)) < 1e-6

    def chain(t):  # five primitives
        a = mul(t, t)
        b = sub(a, scalar_mul(t, 2.0))
        c = matmul(reshape(b, (2, 3)), Tensor(rng_w, dtype=t.dtype))
        return reduce_mean(c)

    rng_w = rng.standard_normal((3, 4))
    assert grad_check(chain, rng.standard_normal(6)) < 1e-3


def test_relu_kink_exclusion():
    from densetl.nn import relu

    x = np.array([-1.0, 0.0, 0.5, 2.0])
    # without the exclusion the coordinate at 0 sees a half slope from central differences
    assert grad_check(lambda t: reduce_sum(relu(t)), x) > 0.4
    assert grad_check(lambda t: reduce_sum(relu(t)), x, exclude=np.abs(x) <= 1e-3) < 1e-9
