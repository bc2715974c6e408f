"""GRAD network: shared trunk, target branch and gradient-reversed attribute branches."""

import logging
from typing import Iterator, NamedTuple, Optional

import numpy as np
from pydantic import ConfigDict, Field, model_validator
from pydantic_numpy.typing import Np1DArray, Np2DArray
from scipy.special import expit

from gradfair import autodiff
from gradfair.autodiff import Graph, Node
from gradfair.nn import (
    AdamState,
    BatchNormLayer,
    DenseLayer,
    adam_step,
    batchnorm_forward,
    init_params,
    minibatches,
)
from gradfair.types import GradBaseModel, Mode, Variant


logger = logging.getLogger(__name__)


def to_signed(labels, name: str = "labels") -> np.ndarray:
    """Map binary labels onto {-1, +1}.

    Labels stored as {0, 1} are mapped 0 -> -1 and 1 -> +1, labels already in
    {-1, +1} are kept.

    """
    labels = np.asarray(labels, dtype=np.float64)
    values = set(np.unique(labels).tolist())
    if values <= {0.0, 1.0}:
        return 2.0 * labels - 1.0
    if values <= {-1.0, 1.0}:
        return labels
    raise ValueError(f"{name} must be in {{0, 1}} or {{-1, +1}}, got {sorted(values)}")


class NetworkConfig(GradBaseModel):
    """GRAD network architecture."""

    variant: Variant = Field(
        default=Variant.PRED,
        description="Target branch type, 'pred' classifies and 'auto' reconstructs",
    )
    input_dim: int = Field(
        description="Dimension of the unprotected feature vector",
        gt=0,
    )
    hidden_width: int = Field(
        default=40,
        description="Number of neurons of every hidden layer",
        ge=1,
    )
    layers_per_branch: int = Field(
        default=2,
        description="Number of fully-connected layers in the trunk and each branch",
        ge=1,
    )
    lambda_: float = Field(
        default=100.0,
        description="Weight of the attribute branch losses",
        ge=0.0,
        alias="lambda",
    )
    n_protected: int = Field(
        default=0,
        description="Number of attribute branches, zero gives the plain NN baseline",
        ge=0,
    )

    @property
    def target_dim(self) -> int:
        return 1 if self.variant == Variant.PRED else self.input_dim


class Block(GradBaseModel):
    """Dense layer followed by batch-norm and ReLU, or a bare affine output layer."""

    dense: DenseLayer = Field(description="Fully-connected layer")
    norm: Optional[BatchNormLayer] = Field(
        default=None,
        description="Batch-norm applied before the ReLU, None for an output layer",
    )

    def forward(self, x: Node, mode: Mode, name: str) -> Node:
        h = self.dense.forward(x, name)
        if self.norm is None:
            return h
        return autodiff.relu(batchnorm_forward(self.norm, h, mode, f"{name}.bn"))

    def apply(self, x: Np2DArray) -> Np2DArray:
        h = self.dense.apply(x)
        if self.norm is None:
            return h
        return np.maximum(self.norm.apply(h), 0.0)


class GradNetwork(GradBaseModel):
    """Trunk, target branch and one attribute branch per protected attribute."""

    config: NetworkConfig = Field(description="Network architecture")
    trunk: list[Block] = Field(description="Shared feature extractor")
    target_branch: list[Block] = Field(description="Label or reconstruction branch")
    attribute_branches: list[list[Block]] = Field(
        default_factory=list,
        description="Protected attribute branches, fed through gradient reversal",
    )
    model_config = ConfigDict(arbitrary_types_allowed=True)

    @model_validator(mode="after")
    def validate_branches(self) -> "GradNetwork":
        if len(self.attribute_branches) != self.config.n_protected:
            raise ValueError(
                f"{len(self.attribute_branches)} attribute branches for "
                f"n_protected={self.config.n_protected}"
            )
        for branch in [self.trunk, self.target_branch, *self.attribute_branches]:
            if len(branch) != self.config.layers_per_branch:
                raise ValueError(
                    f"Every branch needs {self.config.layers_per_branch} dense blocks"
                )
        return self

    def named_blocks(self) -> Iterator[tuple[str, Block]]:
        """Blocks keyed by their parameter prefix, e.g. 'attribute.1.0'."""
        for i, block in enumerate(self.trunk):
            yield f"trunk.{i}", block
        for i, block in enumerate(self.target_branch):
            yield f"target.{i}", block
        for j, branch in enumerate(self.attribute_branches):
            for i, block in enumerate(branch):
                yield f"attribute.{j}.{i}", block

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name, the arrays are the live layer arrays."""
        params = {}
        for name, block in self.named_blocks():
            params[f"{name}.weights"] = block.dense.weights
            params[f"{name}.bias"] = block.dense.bias
            if block.norm is not None:
                params[f"{name}.bn.gamma"] = block.norm.gamma
                params[f"{name}.bn.beta"] = block.norm.beta
        return params

    def state_dict(self) -> dict[str, np.ndarray]:
        """Copy of every parameter and running batch-norm statistic."""
        state = {name: array.copy() for name, array in self.parameters().items()}
        for name, block in self.named_blocks():
            if block.norm is not None:
                state[f"{name}.bn.running_mean"] = block.norm.running_mean.copy()
                state[f"{name}.bn.running_var"] = block.norm.running_var.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        """Restore arrays produced by :meth:`state_dict`."""
        expected = self.state_dict()
        if set(state) != set(expected):
            missing = sorted(set(expected) - set(state))
            unexpected = sorted(set(state) - set(expected))
            raise ValueError(
                f"State does not match the network, missing {missing}, "
                f"unexpected {unexpected}"
            )
        for name, block in self.named_blocks():
            block.dense.weights = _restore(state, expected, f"{name}.weights")
            block.dense.bias = _restore(state, expected, f"{name}.bias")
            if block.norm is not None:
                for field in ["gamma", "beta", "running_mean", "running_var"]:
                    setattr(block.norm, field, _restore(state, expected, f"{name}.bn.{field}"))


def _restore(state: dict, expected: dict, name: str) -> np.ndarray:
    array = np.array(state[name], dtype=np.float64)
    if array.shape != expected[name].shape:
        raise ValueError(
            f"'{name}' has shape {array.shape}, expected {expected[name].shape}"
        )
    return array


def _branch(
    in_dim: int, width: int, out_dim: int, n_layers: int, seeds: list[int], hidden_out: bool
) -> list[Block]:
    """Stack of ``n_layers`` blocks, the last one affine unless ``hidden_out``."""
    blocks = []
    dim = in_dim
    for i in range(n_layers):
        last = i == n_layers - 1
        out = width if (hidden_out or not last) else out_dim
        norm = BatchNormLayer.create(out) if (hidden_out or not last) else None
        blocks.append(Block(dense=init_params(dim, out, seeds[i]), norm=norm))
        dim = out
    return blocks


def build_network(config: NetworkConfig, rng_seed: int) -> GradNetwork:
    """Initialise a GRAD network.

    Parameters
    ----------
    config: NetworkConfig
        Architecture, the trunk maps input_dim -> width -> ... -> width and each
        branch maps width -> ... -> width -> output.
    rng_seed: int
        Seed of the weights. Layers are seeded trunk first, target branch next and
        attribute branches last, so networks differing only by their attribute
        branches share the trunk and target initialisation.

    Returns
    -------
    net: GradNetwork
        The initialised network.

    """
    n_layers = config.layers_per_branch
    children = np.random.SeedSequence(rng_seed).spawn(n_layers * (2 + config.n_protected))
    seeds = [int(child.generate_state(1)[0]) for child in children]
    width = config.hidden_width
    trunk = _branch(config.input_dim, width, width, n_layers, seeds[:n_layers], True)
    target = _branch(
        width, width, config.target_dim, n_layers, seeds[n_layers : 2 * n_layers], False
    )
    attributes = []
    for j in range(config.n_protected):
        start = (2 + j) * n_layers
        attributes.append(
            _branch(width, width, 1, n_layers, seeds[start : start + n_layers], False)
        )
    logger.debug(
        f"Built {config.variant.value} network with {config.n_protected} attribute branches"
    )
    return GradNetwork(
        config=config, trunk=trunk, target_branch=target, attribute_branches=attributes
    )


def parameter_count(net: GradNetwork, include_batchnorm: bool = False) -> int:
    """Number of dense weights and biases, plus gamma and beta if requested."""
    return sum(
        array.size
        for name, array in net.parameters().items()
        if include_batchnorm or ".bn." not in name
    )


class LossTerms(NamedTuple):
    """Joint loss node and its scalar components."""

    total: Node
    target_loss: float
    attr_losses: list[float]


def _run(blocks: list[Block], x: Node, mode: Mode, prefix: str) -> Node:
    for i, block in enumerate(blocks):
        x = block.forward(x, mode, f"{prefix}.{i}")
    return x


def _logistic_loss(graph: Graph, logits: Node, signed: np.ndarray) -> Node:
    """mean softplus(-y * h) for labels in {-1, +1}."""
    margin = autodiff.multiply(graph.constant(-signed.reshape(-1, 1)), logits)
    return autodiff.mean(autodiff.softplus(margin))


def forward_loss(
    net: GradNetwork,
    x: Np2DArray,
    y: Optional[Np1DArray] = None,
    A: Optional[Np2DArray] = None,
    mode: Mode | str = Mode.TRAIN,
    reversal: bool = True,
) -> LossTerms:
    """Joint GRAD loss on one batch.

    Parameters
    ----------
    net: GradNetwork
        The network.
    x: np.ndarray
        Batch of unprotected features, shape (n, input_dim).
    y: np.ndarray, optional
        Binary labels, required for the 'pred' variant.
    A: np.ndarray, optional
        Binary protected attributes, shape (n, n_protected).
    mode: Mode
        Batch-norm mode.
    reversal: bool
        Feed the attribute branches through gradient reversal, False swaps in a
        plain identity.

    Returns
    -------
    terms: LossTerms
        total = target_loss + lambda * sum(attr_losses).

    """
    mode = Mode(mode)
    config = net.config
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != config.input_dim:
        raise ValueError(f"x must have shape (n, {config.input_dim}), got {x.shape}")
    n = x.shape[0]

    graph = Graph()
    xn = graph.constant(x, "x")
    h = _run(net.trunk, xn, mode, "trunk")
    h_target = _run(net.target_branch, h, mode, "target")
    if config.variant == Variant.PRED:
        if y is None or len(y) != n:
            raise ValueError("'pred' variant needs one label per row")
        target = _logistic_loss(graph, h_target, to_signed(y, "y"))
    else:
        residual = autodiff.subtract(h_target, xn)
        target = autodiff.scale(autodiff.sum(autodiff.square(residual)), 1.0 / n)

    total = target
    attr_losses = []
    if config.n_protected:
        A = np.asarray(A, dtype=np.float64) if A is not None else None
        if A is None or A.shape != (n, config.n_protected):
            shape = None if A is None else A.shape
            raise ValueError(f"A must have shape ({n}, {config.n_protected}), got {shape}")
        link = autodiff.gradient_reversal if reversal else autodiff.identity
        for j, branch in enumerate(net.attribute_branches):
            h_attr = _run(branch, link(h), mode, f"attribute.{j}")
            loss = _logistic_loss(graph, h_attr, to_signed(A[:, j], f"A[:, {j}]"))
            attr_losses.append(float(loss.value))
            total = autodiff.add(total, autodiff.scale(loss, config.lambda_))
    return LossTerms(total, float(target.value), attr_losses)


def encode(net: GradNetwork, x: Np2DArray) -> Np2DArray:
    """Eval-mode trunk representation, shape (n, hidden_width)."""
    h = np.asarray(x, dtype=np.float64)
    for block in net.trunk:
        h = block.apply(h)
    return h


def predict(net: GradNetwork, x: Np2DArray) -> tuple[Np1DArray, Np1DArray]:
    """Eval-mode probability and label of the 'pred' target branch.

    Returns
    -------
    probability: np.ndarray
        sigmoid of the target branch output.
    yhat: np.ndarray
        1 where probability >= 0.5, else 0.

    """
    if net.config.variant != Variant.PRED:
        raise ValueError("predict needs a 'pred' network, use encode and a logistic head")
    h = encode(net, x)
    for block in net.target_branch:
        h = block.apply(h)
    probability = expit(h[:, 0])
    return probability, (probability >= 0.5).astype(int)


class LogisticHead(GradBaseModel):
    """Linear classifier applied through a sigmoid thresholded at 0.5."""

    weights: np.ndarray = Field(description="Weight vector")
    bias: float = Field(description="Intercept")
    model_config = ConfigDict(arbitrary_types_allowed=True)

    def predict_proba(self, representations: Np2DArray) -> Np1DArray:
        return expit(representations @ self.weights + self.bias)

    def predict(self, representations: Np2DArray) -> Np1DArray:
        return (self.predict_proba(representations) >= 0.5).astype(int)


def fit_logistic_head(
    representations: Np2DArray,
    y: Np1DArray,
    rng_seed: int,
    epochs: int = 100,
    batch_size: int = 64,
) -> LogisticHead:
    """Fit a logistic regression head by Adam on the logistic loss.

    Parameters
    ----------
    representations: np.ndarray
        Trunk outputs, shape (n, d).
    y: np.ndarray
        Binary labels.
    rng_seed: int
        Seed of the mini-batch order, weights start at zero.
    epochs: int
        Passes over the data.
    batch_size: int
        Mini-batch size.

    Returns
    -------
    head: LogisticHead
        The fitted classifier, a constant classifier of that class when ``y``
        holds a single class.

    """
    r = np.asarray(representations, dtype=np.float64)
    signed = to_signed(y, "y")
    if len(signed) != r.shape[0]:
        raise ValueError(f"{r.shape[0]} representations for {len(signed)} labels")
    if not len(signed):
        raise ValueError("Logistic head needs at least one labelled row")
    if np.unique(signed).size < 2:
        logger.warning(
            f"Logistic head trained on a single class, predicting {int(signed[0] > 0)}"
        )
        return LogisticHead(weights=np.zeros(r.shape[1]), bias=float(signed[0]))

    params = {"head.weights": np.zeros((r.shape[1], 1)), "head.bias": np.zeros(1)}
    state = AdamState()
    for epoch in range(epochs):
        for rows in minibatches(r.shape[0], batch_size, rng_seed + epoch):
            graph = Graph()
            w = graph.param(params["head.weights"], "head.weights")
            b = graph.param(params["head.bias"], "head.bias")
            logits = autodiff.add(autodiff.matmul(graph.constant(r[rows]), w), b)
            loss = _logistic_loss(graph, logits, signed[rows])
            adam_step(state, params, autodiff.backward(loss))
    return LogisticHead(
        weights=params["head.weights"][:, 0], bias=float(params["head.bias"][0])
    )
