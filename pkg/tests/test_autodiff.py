import numpy as np
import pytest

from gradfair import autodiff
from gradfair.autodiff import Graph, OpKind, backward, finite_difference, op_forward
from gradfair.types import ShapeError


def test_matmul_add_relu_sum_gradients():
    graph = Graph()
    x = graph.constant(np.array([[1.0, 2.0], [3.0, 4.0]]))
    w = graph.param(np.array([[1.0], [-1.0]]), "w")
    b = graph.param(np.array([0.5]), "b")
    loss = autodiff.sum(autodiff.relu(x @ w + b))
    # pre-activations are -0.5 and -0.5, nothing passes the relu
    assert loss.value == 0.0
    grads = backward(loss)
    assert np.array_equal(grads["w"], np.zeros((2, 1)))
    assert np.array_equal(grads["b"], np.zeros(1))


def test_sum_of_product_gradient():
    graph = Graph()
    a = graph.param(np.array([1.0, 2.0, 3.0]), "a")
    c = graph.constant(np.array([4.0, 5.0, 6.0]))
    grads = backward(autodiff.sum(a * c))
    assert np.array_equal(grads["a"], [4.0, 5.0, 6.0])


def test_shared_node_adjoints_accumulate():
    graph = Graph()
    a = graph.param(np.array([3.0]), "a")
    grads = backward(autodiff.sum(a * a + a))
    assert np.array_equal(grads["a"], [7.0])


def test_broadcast_bias_gradient_is_summed():
    graph = Graph()
    x = graph.constant(np.ones((4, 3)))
    b = graph.param(np.zeros(3), "b")
    grads = backward(autodiff.sum(x + b))
    assert np.array_equal(grads["b"], [4.0, 4.0, 4.0])


def test_gradient_reversal_negates_adjoint_only():
    graph = Graph()
    a = graph.param(np.array([1.5, -2.0]), "a")
    reversed_ = autodiff.gradient_reversal(a)
    assert np.array_equal(reversed_.value, a.value)
    grads = backward(autodiff.sum(autodiff.square(reversed_)))
    assert np.array_equal(grads["a"], [-3.0, 4.0])


def test_double_reversal_restores_gradient():
    graph = Graph()
    a = graph.param(np.array([0.3, -1.2]), "a")
    twice = autodiff.gradient_reversal(autodiff.gradient_reversal(a))
    grads = backward(autodiff.sum(twice))
    assert np.array_equal(grads["a"], [1.0, 1.0])


def test_reversal_of_weighted_sum():
    graph = Graph()
    a = graph.param(np.array([5.0, 7.0]), "a")
    c = graph.constant(np.array([2.0, -1.0]))
    grads = backward(autodiff.sum(autodiff.gradient_reversal(a) * c))
    assert np.array_equal(grads["a"], [-2.0, 1.0])


@pytest.mark.parametrize("weights", [(1.0, 1.0), (0.5, -3.0), (2.5, 0.0)])
def test_backward_is_linear_in_the_loss(weights):
    rng = np.random.default_rng(7)
    graph = Graph()
    x = graph.constant(rng.normal(size=(5, 3)))
    w = graph.param(rng.normal(size=(3, 2)), "w")
    b = graph.param(rng.normal(size=2), "b")
    h = autodiff.relu(x @ w + b)
    first = autodiff.mean(autodiff.softplus(h))
    second = autodiff.sum(autodiff.square(autodiff.gradient_reversal(h)))
    a1, a2 = weights
    combined = autodiff.add(autodiff.scale(first, a1), autodiff.scale(second, a2))
    grads = backward(combined)
    g1, g2 = backward(first), backward(second)
    for name in ["w", "b"]:
        assert np.allclose(grads[name], a1 * g1[name] + a2 * g2[name], rtol=0.0, atol=1e-12)


def test_identity_passes_adjoint():
    graph = Graph()
    a = graph.param(np.array([1.5, -2.0]), "a")
    grads = backward(autodiff.sum(autodiff.square(autodiff.identity(a))))
    assert np.array_equal(grads["a"], [3.0, -4.0])


def test_backward_is_repeatable():
    graph = Graph()
    a = graph.param(np.array([2.0]), "a")
    loss = autodiff.sum(autodiff.square(a))
    first = backward(loss)
    second = backward(loss)
    assert np.array_equal(first["a"], second["a"])


def test_backward_rejects_non_scalar():
    graph = Graph()
    a = graph.param(np.ones(3), "a")
    with pytest.raises(ValueError, match="scalar"):
        backward(a)


def test_matmul_shape_error_names_shapes():
    graph = Graph()
    a = graph.constant(np.ones((2, 3)))
    b = graph.constant(np.ones((2, 3)))
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        autodiff.matmul(a, b)


def test_add_shape_error():
    graph = Graph()
    with pytest.raises(ShapeError, match="add"):
        autodiff.add(graph.constant(np.ones((2, 3))), graph.constant(np.ones((2, 4))))


def test_nodes_from_another_graph_rejected():
    a = Graph().constant(np.ones(2))
    b = Graph().constant(np.ones(2))
    with pytest.raises(ValueError, match="another graph"):
        autodiff.add(a, b)


def test_softplus_is_overflow_safe():
    graph = Graph()
    x = graph.param(np.array([-1000.0, 0.0, 1000.0]), "x")
    out = autodiff.softplus(x)
    assert np.isfinite(out.value).all()
    assert out.value[2] == 1000.0
    assert out.value[1] == pytest.approx(np.log(2.0))
    grads = backward(autodiff.sum(out))
    assert np.allclose(grads["x"], [0.0, 0.5, 1.0])


def test_op_forward_dispatch():
    graph = Graph()
    x = graph.constant(np.array([[1.0, -2.0]]))
    assert np.array_equal(op_forward("relu", [x]).value, [[1.0, 0.0]])
    assert op_forward(OpKind.SCALE, [x], factor=2.0).value[0, 1] == -4.0
    assert np.array_equal(op_forward("sum", [x], axis=0).value, [1.0, -2.0])
    with pytest.raises(ValueError, match="leaf"):
        op_forward("param", [x])


@pytest.mark.parametrize("axis", [None, 0])
def test_mean_gradient(axis):
    graph = Graph()
    x = graph.param(np.arange(6.0).reshape(3, 2), "x")
    loss = autodiff.sum(autodiff.mean(x, axis=axis))
    grads = backward(loss)
    expected = 1.0 / 6.0 if axis is None else 1.0 / 3.0
    assert np.allclose(grads["x"], expected)


def test_invalid_axis():
    graph = Graph()
    with pytest.raises(ShapeError, match="axis"):
        autodiff.sum(graph.constant(np.ones((2, 2))), axis=1)


@pytest.mark.parametrize("seed", range(5))
def test_batch_norm_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(5, 3))
    gamma = rng.normal(size=3)
    beta = rng.normal(size=3)
    weights = rng.normal(size=(5, 3))

    def loss_node():
        graph = Graph()
        out = autodiff.batch_norm(
            graph.param(x, "x"), graph.param(gamma, "gamma"), graph.param(beta, "beta"), 1e-5
        )
        return autodiff.sum(out * graph.constant(weights))

    grads = backward(loss_node())
    for name, array in [("x", x), ("gamma", gamma), ("beta", beta)]:
        numeric = finite_difference(lambda: float(loss_node().value), array)
        assert np.allclose(grads[name], numeric, rtol=1e-5, atol=1e-7)


def test_sigmoid_and_softplus_match_finite_differences():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(4, 2))

    def loss_node():
        graph = Graph()
        p = graph.param(x, "x")
        return autodiff.sum(autodiff.sigmoid(p) + autodiff.softplus(autodiff.scale(p, -3.0)))

    grads = backward(loss_node())
    numeric = finite_difference(lambda: float(loss_node().value), x)
    assert np.allclose(grads["x"], numeric, rtol=1e-6, atol=1e-8)
