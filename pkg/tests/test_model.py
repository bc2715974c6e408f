import numpy as np
import pytest

from gradfair.autodiff import backward, finite_difference
from gradfair.model import (
    NetworkConfig,
    build_network,
    encode,
    fit_logistic_head,
    forward_loss,
    parameter_count,
    predict,
    to_signed,
)
from gradfair.types import Mode


def small_batch(seed: int, n: int, input_dim: int, n_protected: int):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, input_dim))
    y = rng.integers(0, 2, size=n)
    A = rng.integers(0, 2, size=(n, n_protected))
    return x, y, A


def test_parameter_count_reference_architecture():
    config = NetworkConfig(input_dim=10, hidden_width=40, layers_per_branch=2, n_protected=1)
    net = build_network(config, rng_seed=0)
    # trunk 10-40-40, target branch 40-40-1, attribute branch 40-40-1
    assert parameter_count(net) == 5442
    assert parameter_count(net, include_batchnorm=True) == 5442 + 2 * 40 * 4


def test_baseline_has_no_attribute_branch():
    net = build_network(NetworkConfig(input_dim=4, n_protected=0), rng_seed=0)
    assert net.attribute_branches == []
    assert not any(name.startswith("attribute") for name in net.parameters())


def test_shared_initialisation_across_branch_counts():
    nn = build_network(NetworkConfig(input_dim=4, hidden_width=6, n_protected=0), rng_seed=3)
    grad = build_network(NetworkConfig(input_dim=4, hidden_width=6, n_protected=2), rng_seed=3)
    for name, array in nn.parameters().items():
        assert np.array_equal(array, grad.parameters()[name])


def test_lambda_alias():
    config = NetworkConfig(**{"input_dim": 3, "lambda": 5.0})
    assert config.lambda_ == 5.0
    with pytest.raises(ValueError):
        NetworkConfig(input_dim=3, lambda_=-1.0)


def test_to_signed():
    assert np.array_equal(to_signed([0, 1, 1]), [-1.0, 1.0, 1.0])
    assert np.array_equal(to_signed([-1, 1]), [-1.0, 1.0])
    with pytest.raises(ValueError, match="labels"):
        to_signed([0, 2])


@pytest.mark.parametrize("seed", range(25))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(1000 + seed)
    input_dim = int(rng.integers(2, 9))
    width = int(rng.integers(2, 9))
    n_protected = int(rng.integers(1, 3))
    config = NetworkConfig(
        input_dim=input_dim,
        hidden_width=width,
        layers_per_branch=2,
        lambda_=float(rng.uniform(0.5, 3.0)),
        n_protected=n_protected,
    )
    net = build_network(config, rng_seed=seed)
    x, y, A = small_batch(seed, 6, input_dim, n_protected)

    def loss():
        return float(forward_loss(net, x, y, A, Mode.TRAIN, reversal=False).total.value)

    grads = backward(forward_loss(net, x, y, A, Mode.TRAIN, reversal=False).total)
    for name, array in net.parameters().items():
        numeric = finite_difference(loss, array, step=1e-6)
        assert np.allclose(grads[name], numeric, rtol=1e-4, atol=1e-7), name


def test_reversal_gradients_against_finite_differences():
    config = NetworkConfig(input_dim=4, hidden_width=5, lambda_=2.0, n_protected=1)
    net = build_network(config, rng_seed=1)
    x, y, A = small_batch(1, 8, 4, 1)
    grads = backward(forward_loss(net, x, y, A).total)

    def target():
        return forward_loss(net, x, y, A).target_loss

    def attribute():
        return sum(forward_loss(net, x, y, A).attr_losses)

    for name, array in net.parameters().items():
        numeric_target = finite_difference(target, array, step=1e-6)
        numeric_attr = finite_difference(attribute, array, step=1e-6)
        if name.startswith("trunk"):
            expected = numeric_target - config.lambda_ * numeric_attr
        elif name.startswith("target"):
            expected = numeric_target
        else:
            expected = config.lambda_ * numeric_attr
        assert np.allclose(grads[name], expected, rtol=1e-4, atol=1e-7), name


def test_reversal_semantics_exact():
    config = NetworkConfig(input_dim=5, hidden_width=6, lambda_=1.0, n_protected=2)
    net = build_network(config, rng_seed=4)
    control = build_network(config.model_copy(update=dict(lambda_=0.0)), rng_seed=4)
    x, y, A = small_batch(4, 10, 5, 2)

    reversed_ = backward(forward_loss(net, x, y, A, reversal=True).total)
    plain = backward(forward_loss(net, x, y, A, reversal=False).total)
    target_only = backward(forward_loss(control, x, y, A).total)
    for name in net.parameters():
        if name.startswith("trunk"):
            from_attr_reversed = reversed_[name] - target_only[name]
            from_attr_plain = plain[name] - target_only[name]
            assert np.allclose(from_attr_reversed, -from_attr_plain, rtol=0, atol=1e-12), name
        else:
            assert np.array_equal(reversed_[name], plain[name]), name


def test_zero_lambda_matches_baseline_gradients():
    grad = build_network(NetworkConfig(input_dim=3, hidden_width=4, lambda_=0.0, n_protected=1), 9)
    nn = build_network(NetworkConfig(input_dim=3, hidden_width=4, n_protected=0), 9)
    x, y, A = small_batch(9, 7, 3, 1)
    grad_terms = forward_loss(grad, x, y, A)
    nn_terms = forward_loss(nn, x, y)
    assert grad_terms.total.value == nn_terms.total.value
    grad_grads = backward(grad_terms.total)
    for name, value in backward(nn_terms.total).items():
        assert np.array_equal(grad_grads[name], value)
    assert not grad_grads["attribute.0.0.weights"].any()


def test_auto_variant_reconstruction_loss():
    net = build_network(NetworkConfig(variant="auto", input_dim=3, hidden_width=4), rng_seed=0)
    x = np.random.default_rng(0).normal(size=(5, 3))
    terms = forward_loss(net, x, mode="eval")
    h = encode(net, x)
    for block in net.target_branch:
        h = block.apply(h)
    assert terms.target_loss == pytest.approx(((h - x) ** 2).sum() / 5)
    with pytest.raises(ValueError, match="'pred'"):
        predict(net, x)


def test_forward_loss_input_validation():
    net = build_network(NetworkConfig(input_dim=3, hidden_width=4, n_protected=1), rng_seed=0)
    x, y, A = small_batch(0, 4, 3, 1)
    with pytest.raises(ValueError, match="x must have shape"):
        forward_loss(net, x[:, :2], y, A)
    with pytest.raises(ValueError, match="A must have shape"):
        forward_loss(net, x, y, None)
    with pytest.raises(ValueError, match="label"):
        forward_loss(net, x, None, A)


def test_predict_eval_is_deterministic_and_thresholded():
    net = build_network(NetworkConfig(input_dim=3, hidden_width=4), rng_seed=0)
    x = np.random.default_rng(1).normal(size=(9, 3))
    probability, yhat = predict(net, x)
    assert np.array_equal(yhat, (probability >= 0.5).astype(int))
    assert np.array_equal(predict(net, x)[0], probability)


def test_state_dict_round_trip():
    config = NetworkConfig(input_dim=3, hidden_width=4, n_protected=1)
    net = build_network(config, rng_seed=0)
    x, y, A = small_batch(0, 8, 3, 1)
    forward_loss(net, x, y, A, Mode.TRAIN)
    other = build_network(config, rng_seed=1)
    other.load_state_dict(net.state_dict())
    for name, array in net.state_dict().items():
        assert np.array_equal(other.state_dict()[name], array)
    state = net.state_dict()
    state.pop("trunk.0.weights")
    with pytest.raises(ValueError, match="missing"):
        other.load_state_dict(state)


def test_logistic_head_separates_classes():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, size=200)
    r = np.column_stack([2.0 * y - 1.0 + 0.3 * rng.normal(size=200), rng.normal(size=200)])
    head = fit_logistic_head(r, y, rng_seed=0, epochs=30, batch_size=32)
    assert (head.predict(r) == y).mean() > 0.95
    again = fit_logistic_head(r, y, rng_seed=0, epochs=30, batch_size=32)
    assert np.array_equal(head.weights, again.weights)


def test_logistic_head_single_class_warns(caplog):
    r = np.random.default_rng(0).normal(size=(10, 2))
    with caplog.at_level("WARNING"):
        fit_logistic_head(r, np.ones(10), rng_seed=0, epochs=1)
    assert "single class" in caplog.text


@pytest.mark.parametrize("label", [0, 1])
def test_logistic_head_single_class_predicts_that_class(label):
    r = np.random.default_rng(0).normal(size=(50, 40))
    head = fit_logistic_head(r, np.full(50, label), rng_seed=0, epochs=20, batch_size=256)
    assert np.all(head.predict(r) == label)
    assert np.all(head.weights == 0.0)


def test_logistic_head_rejects_empty_labels():
    with pytest.raises(ValueError, match="at least one"):
        fit_logistic_head(np.zeros((0, 3)), np.zeros(0), rng_seed=0)


def test_logistic_head_fits_two_separable_points():
    r = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
    y = np.array([1, 0])
    head = fit_logistic_head(r, y, rng_seed=0, epochs=200)
    assert (head.predict(r) == y).mean() == 1.0


def test_encode_batch_matches_single_rows():
    config = NetworkConfig(input_dim=3, hidden_width=4, n_protected=1)
    net = build_network(config, rng_seed=0)
    x, y, A = small_batch(0, 8, 3, 1)
    forward_loss(net, x, y, A, Mode.TRAIN)
    batch = encode(net, x)
    rows = np.vstack([encode(net, x[i : i + 1]) for i in range(len(x))])
    assert np.allclose(batch, rows, rtol=0.0, atol=1e-15)
