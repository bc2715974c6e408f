from enum import Enum
from pydantic import BaseModel, ConfigDict


class GradBaseModel(BaseModel):
    """Base class for all gradfair models."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class Variant(str, Enum):
    """Valid options for the GRAD target branch.

    Attributes
    ----------
    PRED: "pred"
        Target branch predicts the label with a logistic loss and is used as the
        classifier directly.
    AUTO: "auto"
        Target branch reconstructs the unprotected features, a logistic regression
        head fitted on the trunk output performs the classification.

    """

    PRED = "pred"
    AUTO = "auto"


class Mode(str, Enum):
    """Batch-norm mode, training uses batch statistics and eval the running ones."""

    TRAIN = "train"
    EVAL = "eval"


class ColumnKind(str, Enum):
    """Kind of a tabular column.

    Attributes
    ----------
    CATEGORICAL: "categorical"
        One-hot encoded using the categories seen in the training split.
    CONTINUOUS: "continuous"
        Z-scored using the training split statistics.
    BINARY: "binary"
        Mapped to {0, 1}.

    """

    CATEGORICAL = "categorical"
    CONTINUOUS = "continuous"
    BINARY = "binary"


class MissingPolicy(str, Enum):
    """Missing value handling.

    Attributes
    ----------
    IMPUTE: "impute"
        Continuous values imputed with the train mean, categorical values get a
        dedicated "missing" category.
    DROP: "drop"
        Rows holding any missing feature value are dropped.

    """

    IMPUTE = "impute"
    DROP = "drop"


class ShapeError(ValueError):
    """Operand shapes not legal for an operation."""


class DivergenceError(RuntimeError):
    """Non-finite loss during training."""


class CheckpointError(ValueError):
    """Unreadable, corrupt or mismatching checkpoint file."""
