import numpy as np
import pytest

from gradfair import autodiff
from gradfair.autodiff import Graph
from gradfair.nn import (
    AdamState,
    BatchNormLayer,
    DenseLayer,
    adam_step,
    batchnorm_forward,
    init_params,
    minibatches,
)
from gradfair.types import Mode


def test_init_params_is_seeded():
    a = init_params(5, 3, rng_seed=11)
    b = init_params(5, 3, rng_seed=11)
    c = init_params(5, 3, rng_seed=12)
    assert np.array_equal(a.weights, b.weights)
    assert not np.array_equal(a.weights, c.weights)
    assert np.array_equal(a.bias, np.zeros(3))
    assert np.abs(a.weights).max() <= np.sqrt(6.0 / 8.0)


@pytest.mark.parametrize("dims", [(0, 3), (3, 0)])
def test_init_params_rejects_empty_dims(dims):
    with pytest.raises(ValueError, match="dims"):
        init_params(*dims, rng_seed=0)


def test_dense_layer_shape_validation():
    with pytest.raises(ValueError, match="shapes"):
        DenseLayer(weights=np.ones((3, 2)), bias=np.ones(3))


def test_dense_forward_matches_apply():
    layer = init_params(4, 2, rng_seed=0)
    x = np.random.default_rng(0).normal(size=(6, 4))
    graph = Graph()
    out = layer.forward(graph.constant(x), "dense")
    assert np.allclose(out.value, layer.apply(x))
    names = [node.name for node in graph.nodes if node.op is autodiff.OpKind.PARAM]
    assert names == ["dense.weights", "dense.bias"]


def test_batchnorm_train_normalises_and_updates_running_stats():
    layer = BatchNormLayer.create(2)
    x = np.array([[1.0, 10.0], [3.0, 20.0], [5.0, 30.0]])
    out = batchnorm_forward(layer, Graph().constant(x), Mode.TRAIN)
    assert np.allclose(out.value.mean(axis=0), 0.0)
    assert np.allclose(out.value.std(axis=0), 1.0, atol=1e-4)
    assert np.allclose(layer.running_mean, 0.1 * x.mean(axis=0))
    assert np.allclose(layer.running_var, 0.9 + 0.1 * x.var(axis=0, ddof=1))


def test_batchnorm_eval_uses_running_stats():
    layer = BatchNormLayer.create(2)
    layer.running_mean = np.array([1.0, 2.0])
    layer.running_var = np.array([4.0, 9.0])
    x = np.array([[3.0, 5.0]])
    out = batchnorm_forward(layer, Graph().constant(x), "eval")
    assert np.allclose(out.value, [[1.0, 1.0]], atol=1e-5)
    assert np.allclose(out.value, layer.apply(x))


def test_batchnorm_train_rejects_single_row():
    layer = BatchNormLayer.create(2)
    with pytest.raises(ValueError, match="at least 2 rows"):
        batchnorm_forward(layer, Graph().constant(np.ones((1, 2))), Mode.TRAIN)


def test_batch_norm_train_output_is_standardised():
    x = np.random.default_rng(4).normal(loc=50.0, scale=1000.0, size=(64, 3))
    graph = Graph()
    out = autodiff.batch_norm(
        graph.constant(x), graph.constant(np.ones(3)), graph.constant(np.zeros(3)), eps=1e-5
    )
    assert np.abs(out.value.mean(axis=0)).max() < 1e-9
    assert np.abs(out.value.var(axis=0) - 1.0).max() < 1e-6


def test_adam_first_step_moves_by_lr():
    params = {"w": np.array([1.0, -1.0])}
    state = AdamState(lr=0.1)
    adam_step(state, params, {"w": np.array([0.5, -2.0])})
    assert state.t == 1
    # the bias-corrected first step is lr * sign(grad)
    assert np.allclose(params["w"], [0.9, -0.9])


def test_adam_first_step_with_default_lr():
    params = {"w": np.array([0.0])}
    adam_step(AdamState(), params, {"w": np.array([1.0])})
    assert params["w"][0] == pytest.approx(-1e-3 / (1.0 + 1e-8), rel=1e-12)


def test_adam_constant_gradient_keeps_step_at_lr():
    params = {"w": np.array([0.0])}
    state = AdamState(lr=0.01)
    for _ in range(99):
        adam_step(state, params, {"w": np.array([3.0])})
    before = params["w"][0]
    adam_step(state, params, {"w": np.array([3.0])})
    assert state.t == 100
    assert abs(before - params["w"][0]) == pytest.approx(0.01, rel=0.01)


def test_adam_zero_gradient_leaves_params():
    params = {"w": np.array([1.0, 2.0])}
    adam_step(AdamState(), params, {"w": np.zeros(2)})
    assert np.array_equal(params["w"], [1.0, 2.0])


def test_adam_rejects_non_finite_without_mutating():
    params = {"a": np.array([1.0]), "b": np.array([2.0])}
    state = AdamState()
    with pytest.raises(ValueError, match="non-finite gradient for parameter 'b'"):
        adam_step(state, params, {"a": np.array([1.0]), "b": np.array([np.nan])})
    assert state.t == 0
    assert params["a"][0] == 1.0


def test_adam_rejects_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        adam_step(AdamState(), {"w": np.ones(2)}, {"w": np.ones(3)})


def test_minibatches_partition_rows():
    batches = minibatches(10, 4, rng_seed=3)
    rows = np.concatenate(batches)
    assert sorted(rows.tolist()) == list(range(10))
    assert [b.size for b in batches] == [4, 4, 2]
    assert all(np.array_equal(a, b) for a, b in zip(batches, minibatches(10, 4, rng_seed=3)))


def test_minibatches_merge_trailing_singleton():
    batches = minibatches(9, 4)
    assert [b.size for b in batches] == [4, 5]
    assert np.array_equal(np.concatenate(batches), np.arange(9))


def test_minibatches_enforce_min_batch():
    assert [b.size for b in minibatches(5, 2, rng_seed=0, min_batch=2)] == [2, 3]
    with pytest.raises(ValueError, match="batch_size must be >= 2"):
        minibatches(10, 1, min_batch=2)
    with pytest.raises(ValueError, match="1 rows"):
        minibatches(1, 4, min_batch=2)


def test_minibatches_single_row_batches_merge_the_tail():
    assert [b.size for b in minibatches(4, 1)] == [1, 1, 2]
