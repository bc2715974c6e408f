"""Layer primitives, seeded parameter initialisation and the Adam optimizer."""

import logging
from typing import Optional

import numpy as np
from pydantic import ConfigDict, Field, field_validator, model_validator
from pydantic_numpy.typing import Np2DArray

from gradfair import autodiff
from gradfair.autodiff import Node, Tensor
from gradfair.types import GradBaseModel, Mode


logger = logging.getLogger(__name__)


def _float_array(v) -> np.ndarray:
    return np.array(v, dtype=np.float64)


class DenseLayer(GradBaseModel):
    """Fully-connected layer computing ``x @ weights + bias``."""

    weights: np.ndarray = Field(description="Weight matrix of shape (in_dim, out_dim)")
    bias: np.ndarray = Field(description="Bias vector of shape (out_dim,)")
    model_config = ConfigDict(arbitrary_types_allowed=True)

    _to_float = field_validator("weights", "bias", mode="before")(_float_array)

    @model_validator(mode="after")
    def validate_shapes(self) -> "DenseLayer":
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ValueError(
                f"Inconsistent dense layer shapes, weights {self.weights.shape} "
                f"and bias {self.bias.shape}"
            )
        return self

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]

    def forward(self, x: Node, name: str) -> Node:
        """Graph forward, the weights and bias become parameter nodes."""
        w = x.graph.param(self.weights, f"{name}.weights")
        b = x.graph.param(self.bias, f"{name}.bias")
        return autodiff.add(autodiff.matmul(x, w), b)

    def apply(self, x: Np2DArray) -> Np2DArray:
        """Plain numpy forward without gradient machinery."""
        return x @ self.weights + self.bias


class BatchNormLayer(GradBaseModel):
    """Batch normalisation over the rows of a batch."""

    gamma: np.ndarray = Field(description="Scale per feature")
    beta: np.ndarray = Field(description="Shift per feature")
    running_mean: np.ndarray = Field(description="Moving average of batch means")
    running_var: np.ndarray = Field(description="Moving average of batch variances")
    momentum: float = Field(
        default=0.9,
        description="Weight of the previous running statistics in the moving average",
        gt=0.0,
        lt=1.0,
    )
    eps: float = Field(
        default=1e-5,
        description="Added to the variance before taking the square root",
        gt=0.0,
    )
    model_config = ConfigDict(arbitrary_types_allowed=True)

    _to_float = field_validator(
        "gamma", "beta", "running_mean", "running_var", mode="before"
    )(_float_array)

    @model_validator(mode="after")
    def validate_stats(self) -> "BatchNormLayer":
        dim = self.gamma.shape
        for name in ["beta", "running_mean", "running_var"]:
            if getattr(self, name).shape != dim:
                raise ValueError(f"'{name}' shape must be {dim}")
        if (self.running_var < 0).any():
            raise ValueError("running_var must be non-negative")
        return self

    @classmethod
    def create(cls, dim: int, **kwargs) -> "BatchNormLayer":
        """Identity statistics, unit gamma and zero beta."""
        return cls(
            gamma=np.ones(dim),
            beta=np.zeros(dim),
            running_mean=np.zeros(dim),
            running_var=np.ones(dim),
            **kwargs,
        )

    @property
    def dim(self) -> int:
        return self.gamma.shape[0]

    def apply(self, x: Np2DArray) -> Np2DArray:
        """Eval-mode numpy forward using the running statistics only."""
        inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
        return (x - self.running_mean) * inv_std * self.gamma + self.beta


def init_params(in_dim: int, out_dim: int, rng_seed: int) -> DenseLayer:
    """Dense layer with Glorot uniform weights and zero bias.

    Parameters
    ----------
    in_dim: int
        Number of inputs.
    out_dim: int
        Number of outputs.
    rng_seed: int
        Seed for the weights, same seed gives identical layers.

    Returns
    -------
    layer: DenseLayer
        The initialised layer, weights drawn from U(-l, l) with l = sqrt(6 / (in + out)).

    """
    if in_dim < 1 or out_dim < 1:
        raise ValueError(f"Layer dims must be >= 1, got ({in_dim}, {out_dim})")
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    rng = np.random.default_rng(rng_seed)
    return DenseLayer(
        weights=rng.uniform(-limit, limit, size=(in_dim, out_dim)),
        bias=np.zeros(out_dim),
    )


def batchnorm_forward(
    layer: BatchNormLayer, x: Node, mode: Mode | str, name: str = "bn"
) -> Node:
    """Batch-norm graph forward.

    Parameters
    ----------
    layer: BatchNormLayer
        The layer, its running statistics are updated in train mode.
    x: Node
        Input batch of shape (n, dim).
    mode: Mode
        Train normalises with the batch statistics, eval with the running ones.
    name: str
        Prefix for the gamma and beta parameter names.

    Returns
    -------
    out: Node
        Normalised, scaled and shifted batch.

    """
    mode = Mode(mode)
    graph = x.graph
    gamma = graph.param(layer.gamma, f"{name}.gamma")
    beta = graph.param(layer.beta, f"{name}.beta")
    if mode == Mode.EVAL:
        centred = autodiff.subtract(x, graph.constant(layer.running_mean))
        inv_std = graph.constant(1.0 / np.sqrt(layer.running_var + layer.eps))
        normed = autodiff.multiply(centred, inv_std)
        return autodiff.add(autodiff.multiply(normed, gamma), beta)

    if x.value.ndim != 2 or x.shape[0] < 2:
        raise ValueError(
            f"batchnorm_forward: train mode needs a batch of at least 2 rows, "
            f"got shape {x.shape}"
        )
    out = autodiff.batch_norm(x, gamma, beta, layer.eps)
    batch_mean = x.value.mean(axis=0)
    batch_var = x.value.var(axis=0, ddof=1)
    layer.running_mean = layer.momentum * layer.running_mean + (1 - layer.momentum) * batch_mean
    layer.running_var = layer.momentum * layer.running_var + (1 - layer.momentum) * batch_var
    return out


class AdamState(GradBaseModel):
    """Adam optimizer state."""

    lr: float = Field(default=1e-3, description="Learning rate", gt=0.0)
    beta1: float = Field(
        default=0.9, description="Decay of the first moment", gt=0.0, lt=1.0
    )
    beta2: float = Field(
        default=0.999, description="Decay of the second moment", gt=0.0, lt=1.0
    )
    epsilon: float = Field(default=1e-8, description="Denominator offset", gt=0.0)
    t: int = Field(default=0, description="Number of steps taken", ge=0)
    m: dict[str, np.ndarray] = Field(
        default_factory=dict, description="First moment per parameter"
    )
    v: dict[str, np.ndarray] = Field(
        default_factory=dict, description="Second moment per parameter"
    )
    model_config = ConfigDict(arbitrary_types_allowed=True)


def adam_step(
    state: AdamState,
    params: dict[str, Tensor],
    grads: dict[str, Tensor],
    names: Optional[list[str]] = None,
) -> dict[str, Tensor]:
    """Apply one bias-corrected Adam update in place.

    Parameters
    ----------
    state: AdamState
        Optimizer state, the step counter is incremented once per call.
    params: dict[str, np.ndarray]
        Parameter arrays keyed by name, updated in place.
    grads: dict[str, np.ndarray]
        Gradient arrays keyed by parameter name.
    names: list[str], optional
        Restrict the update to these parameters, by default every gradient.

    Returns
    -------
    params: dict[str, np.ndarray]
        The updated parameters.

    """
    names = list(grads) if names is None else names
    for name in names:
        if name not in params:
            raise ValueError(f"adam_step: gradient for unknown parameter '{name}'")
        grad = grads[name]
        if grad.shape != params[name].shape:
            raise ValueError(
                f"adam_step: gradient shape {grad.shape} does not match parameter "
                f"'{name}' shape {params[name].shape}"
            )
        if not np.isfinite(grad).all():
            raise ValueError(f"adam_step: non-finite gradient for parameter '{name}'")

    state.t += 1
    correction1 = 1.0 - state.beta1**state.t
    correction2 = 1.0 - state.beta2**state.t
    for name in names:
        grad = grads[name]
        m = state.m.get(name, np.zeros_like(grad))
        v = state.v.get(name, np.zeros_like(grad))
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.m[name], state.v[name] = m, v
        params[name] -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
    return params


def minibatches(
    n: int, batch_size: int, rng_seed: Optional[int] = None, min_batch: int = 1
) -> list[np.ndarray]:
    """Row indices of the mini-batches for one epoch.

    Rows are shuffled when a seed is given. A trailing batch of a single row is merged
    into the previous batch so train-mode batch-norm always sees at least two rows.
    Batches feeding batch-norm pass ``min_batch=2``.

    """
    if batch_size < max(min_batch, 1):
        raise ValueError(f"batch_size must be >= {max(min_batch, 1)}, got {batch_size}")
    if 0 < n < min_batch:
        raise ValueError(f"{n} rows cannot fill a mini-batch of at least {min_batch} rows")
    order = np.arange(n)
    if rng_seed is not None:
        order = np.random.default_rng(rng_seed).permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and batches[-1].size == 1:
        last = batches.pop()
        batches[-1] = np.concatenate([batches[-1], last])
    return batches
