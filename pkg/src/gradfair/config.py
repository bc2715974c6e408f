"""Training configuration."""

import logging
from pathlib import Path
from typing import Optional

import yaml
from pydantic import Field, field_validator, model_validator

from gradfair.types import GradBaseModel, Variant


logger = logging.getLogger(__name__)


DEFAULT_LAMBDA = 100.0


def _split_names(v):
    if isinstance(v, str):
        return [name.strip() for name in v.split(",") if name.strip()]
    return v


class TrainConfig(GradBaseModel):
    """Configuration of one training run."""

    epochs: int = Field(default=50, description="Number of training epochs", ge=1)
    batch_size: int = Field(
        default=64, description="Mini-batch size, train-mode batch-norm needs two rows", ge=2
    )
    lambda_: float = Field(
        default=DEFAULT_LAMBDA,
        description="Weight of the attribute branch losses",
        ge=0.0,
        alias="lambda",
    )
    knn_k: int = Field(default=5, description="Neighbours of the consistency metric", ge=1)
    rng_seed: int = Field(default=0, description="Seed of weights, splits and batch order")
    variant: Variant = Field(default=Variant.PRED, description="GRAD variant")
    protected: list[str] = Field(
        default=[], description="Protected attributes audited by the metrics"
    )
    adversaries: Optional[list[str]] = Field(
        default=None,
        description=(
            "Protected attributes given a gradient-reversed branch, None for all of "
            "them and an empty list for the plain NN baseline"
        ),
    )
    hidden_width: int = Field(default=40, description="Neurons per hidden layer", ge=1)
    layers_per_branch: int = Field(
        default=2, description="Fully-connected layers in the trunk and each branch", ge=1
    )
    lr: float = Field(default=1e-3, description="Adam learning rate", gt=0.0)
    splits: tuple[float, float, float] = Field(
        default=(0.5, 0.2, 0.3), description="Train, validation and test fractions"
    )
    head_epochs: int = Field(
        default=20, description="Epochs of the logistic head of the 'auto' variant", ge=1
    )
    head_batch_size: int = Field(
        default=256, description="Mini-batch size of the logistic head", ge=1
    )
    dataset: str = Field(default="dataset", description="Dataset name used in reports")

    _names = field_validator("protected", "adversaries", mode="before")(_split_names)

    @model_validator(mode="after")
    def validate_attributes(self) -> "TrainConfig":
        if len(set(self.protected)) != len(self.protected):
            raise ValueError(f"Duplicate protected attributes in {self.protected}")
        if self.adversaries is not None:
            unknown = [name for name in self.adversaries if name not in self.protected]
            if unknown:
                raise ValueError(f"Adversaries {unknown} are not protected attributes")
        if abs(sum(self.splits) - 1.0) > 1e-9:
            raise ValueError(f"Split fractions must sum to 1, got {self.splits}")
        return self

    @property
    def branch_attributes(self) -> list[str]:
        """Attributes with a gradient-reversed branch, in protected order."""
        if self.adversaries is None:
            return list(self.protected)
        return [name for name in self.protected if name in self.adversaries]

    @property
    def selection_attributes(self) -> list[str]:
        """Attributes whose validation discrimination drives model selection."""
        return self.branch_attributes or list(self.protected)

    @property
    def is_baseline(self) -> bool:
        return not self.branch_attributes

    @property
    def algorithm(self) -> str:
        """Row label such as 'GRAD-Pred', 'NN-Auto' or 'GRAD-Pred-race'.

        The attribute suffix names the adversaries when only some of the protected
        attributes have a branch.
        """
        name = "NN" if self.is_baseline else "GRAD"
        label = f"{name}-{self.variant.value.capitalize()}"
        branches = self.branch_attributes
        if branches and len(branches) < len(self.protected):
            label += "-" + "+".join(branches)
        return label

    @classmethod
    def from_yaml(cls, filename: str | Path, **overrides) -> "TrainConfig":
        with open(filename) as stream:
            kwargs = yaml.safe_load(stream) or {}
        kwargs.update(overrides)
        return cls(**kwargs)

    def replace(self, **kwargs) -> "TrainConfig":
        """Validated copy with some fields changed."""
        return self.model_validate({**self.model_dump(), **kwargs})
