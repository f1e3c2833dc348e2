import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from microdense.autograd import (
    Graph, Parameter, ShapeError, Tensor, backward, finite_diff_grad, forward, gradcheck,
    identity, no_grad, relative_error, zero_grad,
)
from microdense.layers import ConvSpec, conv2d, relu, softmax, softmax_cross_entropy

finite = st.floats(-3, 3, allow_nan=False, width=64)


def test_identity_graph_returns_input(rng):
    x = Tensor(rng.standard_normal((1, 3, 4, 4)))
    out = forward(Graph(lambda x: identity(x)), {"x": x})
    np.testing.assert_array_equal(out.data, x.data)
    assert out.data is not x.data


def test_add_self():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    g = Graph(lambda x: x + x)
    np.testing.assert_array_equal(g.forward(x=x).data, np.full((2, 2), 2.0))
    backward((g.output).sum())
    np.testing.assert_array_equal(x.grad, np.full((2, 2), 2.0))


def test_conv_relu_sum_matches_direct_evaluation(rng):
    spec = ConvSpec(2, 3, 3, padding=1)
    x = Tensor(rng.standard_normal((1, 2, 5, 5)))
    w = Parameter(rng.standard_normal(spec.weight_shape))
    g = Graph(lambda x, w: relu(conv2d(x, spec, w)).sum())
    out = g.forward(x=x, w=w)

    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    total = 0.0
    for o in range(3):
        for i in range(5):
            for j in range(5):
                v = (xp[0, :, i:i + 3, j:j + 3] * w.data[o]).sum()
                total += max(v, 0.0)
    assert out.item() == pytest.approx(total, rel=1e-12)
    assert g.parameters() == [w]
    assert len(g.nodes) >= 3


def test_sum_grad_is_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_square_grad():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x + x)


def test_zero_extent_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))


def test_leaf_grads_accumulate_until_zeroed():
    x = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    backward(x.sum())
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])
    zero_grad([x])
    assert x.grad is None


def test_no_grad_records_no_closure():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * x
    assert not y.requires_grad and y._backward is None


def test_fan_out_sums_branch_gradients(rng):
    data = rng.standard_normal((3, 4))
    w = rng.standard_normal((3, 4))
    x = Tensor(data, requires_grad=True)
    backward(((x * x) + (x * Tensor(w)) + x).sum())

    # same function with each branch on its own copy, summed by hand
    grads = []
    for branch in (lambda t: t * t, lambda t: t * Tensor(w), lambda t: t):
        t = Tensor(data.copy(), requires_grad=True)
        backward(branch(t).sum())
        grads.append(t.grad)
    np.testing.assert_allclose(x.grad, sum(grads), rtol=0, atol=1e-15)


def test_finite_diff_examples():
    g = finite_diff_grad(lambda a: float((a ** 2).sum()), np.array([3.0]))
    assert abs(g[0] - 6.0) < 1e-8
    np.testing.assert_array_equal(finite_diff_grad(lambda a: 4.0, np.ones((2, 2))), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        finite_diff_grad(lambda a: 0.0, np.ones(1), h=0)
    with pytest.raises(FloatingPointError):
        finite_diff_grad(lambda a: float("nan"), np.ones(1))


def test_finite_diff_restores_tensor():
    x = Tensor(np.array([0.5, 1.5]))
    before = x.data.copy()
    finite_diff_grad(lambda a: float(np.sin(a).sum()), x)
    np.testing.assert_array_equal(x.data, before)


def test_softmax_ce_finite_diff_matches_closed_form(rng):
    logits = rng.standard_normal(4)
    label = 2
    numeric = finite_diff_grad(
        lambda a: softmax_cross_entropy(Tensor(a[None]), [label]).item(), logits.copy())
    expected = softmax(logits) - np.eye(4)[label]
    np.testing.assert_allclose(numeric, expected, atol=1e-9)


def test_relative_error_floor():
    # large gradients: plain relative error
    assert relative_error(np.array([100.0]), np.array([101.0])) == pytest.approx(1 / 101)
    # tiny gradients are judged on absolute error
    assert relative_error(np.array([1e-9]), np.array([2e-9])) < 1e-4
    assert relative_error(np.array([]), np.array([])) == 0.0


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4)), elements=finite),
       hnp.arrays(np.float64, st.tuples(st.just(1), st.integers(1, 4)), elements=finite))
def test_gradcheck_random_elementwise_graph(a, b):
    if b.shape[1] != a.shape[1]:
        b = np.resize(b, (1, a.shape[1]))
    x = Tensor(a, requires_grad=True, name="x")
    y = Tensor(b, requires_grad=True, name="y")
    errs = gradcheck(lambda: ((x * y) - x * x + (y - x)).sum(), [x, y])
    assert max(errs.values()) < 1e-4


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 31 - 1))
def test_gradcheck_matmul(m, k, n, seed):
    r = np.random.default_rng(seed)
    a = Tensor(r.standard_normal((m, k)), requires_grad=True, name="a")
    b = Tensor(r.standard_normal((k, n)), requires_grad=True, name="b")
    proj = Tensor(r.standard_normal((m, n)))
    errs = gradcheck(lambda: ((a @ b) * proj).mean(), [a, b])
    assert max(errs.values()) < 1e-4


def test_reshape_and_mean_grads():
    x = Tensor(np.arange(6.0), requires_grad=True)
    backward(x.reshape(2, 3).mean())
    np.testing.assert_allclose(x.grad, np.full(6, 1 / 6))


def test_broadcast_grad_reduces_to_input_shape():
    x = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.ones((1, 4)), requires_grad=True)
    backward((x * b).sum())
    np.testing.assert_array_equal(b.grad, np.full((1, 4), 3.0))


def test_determinism_bitwise(rng):
    data = rng.standard_normal((2, 2, 5, 5))
    spec = ConvSpec(2, 4, 3, padding=1, groups=2)
    wdata = rng.standard_normal(spec.weight_shape)

    def run():
        x = Tensor(data, requires_grad=True)
        w = Parameter(wdata.copy())
        out = relu(conv2d(x, spec, w)).sum()
        backward(out)
        return out.item(), x.grad.copy(), w.grad.copy()

    a, b = run(), run()
    assert a[0] == b[0]
    np.testing.assert_array_equal(a[1], b[1])
    np.testing.assert_array_equal(a[2], b[2])


def test_parameter_value_and_flags():
    p = Parameter(np.zeros(3), name="bias", decay_exempt=True)
    assert p.requires_grad and p.decay_exempt
    np.testing.assert_array_equal(p.value, np.zeros(3))
    np.testing.assert_array_equal(p.momentum, np.zeros(3))
