"""Training loop, model selection, evaluation and experiment drivers."""

import logging
import time
from typing import Optional

import numpy as np
import pandas as pd
from pydantic import ConfigDict, Field, model_validator

from gradfair import autodiff
from gradfair.components.checkpoint import Snapshot, load_checkpoint, save_checkpoint
from gradfair.config import DEFAULT_LAMBDA, TrainConfig
from gradfair.data import EncodedDataset
from gradfair.metrics import (
    MetricsReport,
    PredictionSet,
    accuracy,
    consistency,
    discrimination,
    metrics_report,
)
from gradfair.model import (
    GradNetwork,
    NetworkConfig,
    build_network,
    encode,
    fit_logistic_head,
    forward_loss,
    predict,
)
from gradfair.nn import AdamState, adam_step, minibatches
from gradfair.types import DivergenceError, GradBaseModel, Mode, Variant


logger = logging.getLogger(__name__)

__all__ = [
    "EpochRecord",
    "ExperimentResult",
    "compare_models",
    "evaluate",
    "lambda_sweep",
    "load_checkpoint",
    "run_experiment",
    "save_checkpoint",
    "select_model",
    "train",
]

TIE_TOLERANCE = 1e-12


class EpochRecord(GradBaseModel):
    """Validation metrics at the end of one epoch."""

    epoch: int = Field(description="Epoch number, starting at 1", ge=1)
    val_accuracy: float = Field(description="Validation accuracy")
    val_discrimination: dict[str, float] = Field(
        description="Validation discrimination per audited attribute"
    )
    val_consistency: float = Field(
        description="Validation consistency, reported but not used for selection"
    )
    train_loss: float = Field(description="Mean joint loss over the epoch's mini-batches")
    digest: str = Field(description="sha256 of the epoch snapshot")

    def mean_discrimination(self, attributes: Optional[list[str]] = None) -> float:
        names = list(self.val_discrimination) if attributes is None else attributes
        if not names:
            return 0.0
        return float(np.mean([self.val_discrimination[name] for name in names]))


class ExperimentResult(GradBaseModel):
    """One trained, selected and evaluated model."""

    algorithm: str = Field(description="Row label, e.g. 'GRAD-Pred'")
    config: TrainConfig = Field(description="Configuration of the run")
    epoch_selected: int = Field(description="Selected epoch, starting at 1", ge=1)
    test: MetricsReport = Field(description="Test metrics of the selected snapshot")
    history: list[EpochRecord] = Field(description="One record per epoch")
    digest: str = Field(description="sha256 of the evaluated snapshot")
    wall_clock: float = Field(description="Run time in seconds", ge=0.0)
    snapshot: Snapshot = Field(description="Selected snapshot", exclude=True)
    model_config = ConfigDict(arbitrary_types_allowed=True)

    @model_validator(mode="after")
    def validate_selection(self) -> "ExperimentResult":
        if self.epoch_selected > len(self.history):
            raise ValueError(
                f"Selected epoch {self.epoch_selected} not in a history of "
                f"{len(self.history)} epochs"
            )
        return self


def _check_dims(net: GradNetwork, ds: EncodedDataset, attributes: list[str]):
    if ds.n_features != net.config.input_dim:
        raise ValueError(
            f"Dataset has {ds.n_features} features, network expects {net.config.input_dim}"
        )
    if len(attributes) != net.config.n_protected:
        raise ValueError(
            f"{len(attributes)} branch attributes for {net.config.n_protected} branches"
        )


def _predict_labels(
    net: GradNetwork, ds: EncodedDataset, cfg: TrainConfig, train: Optional[EncodedDataset]
) -> np.ndarray:
    """Eval-mode labels, through a logistic head on trunk encodings for 'auto'."""
    if net.config.variant == Variant.PRED:
        return predict(net, ds.X)[1]
    if train is None:
        raise ValueError("The 'auto' variant needs the train split to fit its logistic head")
    head = fit_logistic_head(
        encode(net, train.X),
        train.y,
        rng_seed=cfg.rng_seed,
        epochs=cfg.head_epochs,
        batch_size=cfg.head_batch_size,
    )
    return head.predict(encode(net, ds.X))


def train(
    net: GradNetwork,
    train_ds: EncodedDataset,
    val_ds: EncodedDataset,
    cfg: TrainConfig,
) -> tuple[list[EpochRecord], list[Snapshot]]:
    """Train ``net`` in place for ``cfg.epochs`` epochs.

    Parameters
    ----------
    net: GradNetwork
        Network with one attribute branch per ``cfg.branch_attributes``.
    train_ds: EncodedDataset
        Training split.
    val_ds: EncodedDataset
        Validation split, evaluated in eval mode after every epoch.
    cfg: TrainConfig
        Run configuration, batches of epoch ``e`` are shuffled with seed ``rng_seed + e``.

    Returns
    -------
    records: list[EpochRecord]
        One record per epoch.
    snapshots: list[Snapshot]
        The network state after every epoch.

    Raises
    ------
    DivergenceError
        The joint loss of a mini-batch is not finite.

    """
    attributes = cfg.branch_attributes
    _check_dims(net, train_ds, attributes)
    _check_dims(net, val_ds, attributes)
    A = train_ds.attributes(attributes) if attributes else None
    audited = val_ds.attributes(cfg.protected)
    state = AdamState(lr=cfg.lr)

    records, snapshots = [], []
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        batches = minibatches(len(train_ds), cfg.batch_size, cfg.rng_seed + epoch, min_batch=2)
        for batch, rows in enumerate(batches):
            terms = forward_loss(
                net,
                train_ds.X[rows],
                train_ds.y[rows],
                None if A is None else A[rows],
                mode=Mode.TRAIN,
            )
            loss = float(terms.total.value)
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"Non-finite loss {loss} at epoch {epoch}, batch {batch}"
                )
            losses.append(loss)
            adam_step(state, net.parameters(), autodiff.backward(terms.total))

        snapshot = Snapshot.take(net, cfg.rng_seed, epoch, attributes)
        yhat = _predict_labels(net, val_ds, cfg, train_ds)
        record = EpochRecord(
            epoch=epoch,
            val_accuracy=accuracy(yhat, val_ds.y),
            val_discrimination={
                name: discrimination(yhat, audited[:, j]) for j, name in enumerate(cfg.protected)
            },
            val_consistency=consistency(yhat, val_ds.X, cfg.knn_k),
            train_loss=float(np.mean(losses)),
            digest=snapshot.digest(),
        )
        logger.info(
            f"epoch {epoch}/{cfg.epochs}: loss {record.train_loss:.4f}, "
            f"val acc {record.val_accuracy:.4f}, "
            f"val discr {record.mean_discrimination():.4f}"
        )
        records.append(record)
        snapshots.append(snapshot)
    return records, snapshots


def select_model(records: list[EpochRecord], attributes: Optional[list[str]] = None) -> int:
    """Epoch with the lowest mean validation discrimination.

    Ties within 1e-12 go to the highest validation accuracy, then to the earliest epoch.

    Parameters
    ----------
    records: list[EpochRecord]
        Training history.
    attributes: list[str], optional
        Attributes averaged, by default every audited attribute.

    Returns
    -------
    epoch: int
        The selected epoch number (1-based).

    """
    if not records:
        raise ValueError("select_model needs at least one epoch record")
    scores = [record.mean_discrimination(attributes) for record in records]
    lowest = min(scores)
    tied = [r for r, score in zip(records, scores) if score - lowest <= TIE_TOLERANCE]
    best = max(r.val_accuracy for r in tied)
    return next(r.epoch for r in tied if best - r.val_accuracy <= TIE_TOLERANCE)


def evaluate(
    model: GradNetwork | Snapshot,
    test: EncodedDataset,
    cfg: TrainConfig,
    train: Optional[EncodedDataset] = None,
) -> MetricsReport:
    """Test metrics of a network or snapshot, audited on ``cfg.protected``."""
    net = model.restore() if isinstance(model, Snapshot) else model
    if net.config.variant != cfg.variant:
        raise ValueError(
            f"Cannot evaluate a '{net.config.variant.value}' network as '{cfg.variant.value}'"
        )
    yhat = _predict_labels(net, test, cfg, train)
    preds = PredictionSet(
        yhat=yhat, y=test.y, A=test.attributes(cfg.protected), X=test.X, protected=cfg.protected
    )
    return metrics_report(preds, k=cfg.knn_k)


def run_experiment(
    cfg: TrainConfig, train_ds: EncodedDataset, val_ds: EncodedDataset, test_ds: EncodedDataset
) -> ExperimentResult:
    """Build, train, select and evaluate one model."""
    start = time.perf_counter()
    net_config = NetworkConfig(
        variant=cfg.variant,
        input_dim=train_ds.n_features,
        hidden_width=cfg.hidden_width,
        layers_per_branch=cfg.layers_per_branch,
        lambda_=cfg.lambda_,
        n_protected=len(cfg.branch_attributes),
    )
    logger.info(
        f"Running {cfg.algorithm} on '{cfg.dataset}' with lambda={cfg.lambda_:g}, "
        f"seed={cfg.rng_seed}"
    )
    net = build_network(net_config, cfg.rng_seed)
    records, snapshots = train(net, train_ds, val_ds, cfg)
    epoch = select_model(records, cfg.selection_attributes)
    snapshot = snapshots[epoch - 1]
    digest = snapshot.digest()
    if digest != records[epoch - 1].digest:
        raise RuntimeError(f"Snapshot of epoch {epoch} does not match its record")
    report = evaluate(snapshot, test_ds, cfg, train_ds)
    logger.info(
        f"{cfg.algorithm}: epoch {epoch} selected, test acc {report.accuracy:.4f}, "
        f"discr {report.mean_discrimination:.4f}, cons {report.consistency:.4f}"
    )
    return ExperimentResult(
        algorithm=cfg.algorithm,
        config=cfg,
        epoch_selected=epoch,
        test=report,
        history=records,
        digest=digest,
        wall_clock=time.perf_counter() - start,
        snapshot=snapshot,
    )


def lambda_sweep(
    cfg: TrainConfig,
    lambdas: list[float],
    train_ds: EncodedDataset,
    val_ds: EncodedDataset,
    test_ds: EncodedDataset,
) -> pd.DataFrame:
    """One run per lambda on the same splits and seed.

    Returns
    -------
    sweep: pd.DataFrame
        Columns lambda, epoch_selected, acc, discr (mean over audited attributes),
        cons and is_default, True on the lambda=100 row.

    """
    if not lambdas:
        raise ValueError("lambda_sweep needs at least one lambda")
    rows = []
    for value in lambdas:
        result = run_experiment(cfg.replace(lambda_=value), train_ds, val_ds, test_ds)
        rows.append(
            dict(
                **{"lambda": float(value)},
                epoch_selected=result.epoch_selected,
                acc=result.test.accuracy,
                discr=result.test.mean_discrimination,
                cons=result.test.consistency,
                is_default=float(value) == DEFAULT_LAMBDA,
            )
        )
    return pd.DataFrame(rows)


def compare_models(
    cfg: TrainConfig,
    train_ds: EncodedDataset,
    val_ds: EncodedDataset,
    test_ds: EncodedDataset,
    ablate: bool = False,
) -> list[ExperimentResult]:
    """NN-Auto, GRAD-Auto, NN-Pred and GRAD-Pred on identical splits and seed.

    With ``ablate`` and two or more protected attributes, GRAD rows protecting one
    attribute at a time follow, audited on every protected attribute.

    """
    if not cfg.protected:
        raise ValueError("compare_models needs at least one protected attribute")
    configs = []
    for variant in [Variant.AUTO, Variant.PRED]:
        configs.append(cfg.replace(variant=variant, adversaries=[]))
        configs.append(cfg.replace(variant=variant, adversaries=None))
    if ablate and len(cfg.protected) > 1:
        for variant in [Variant.AUTO, Variant.PRED]:
            for name in cfg.protected:
                configs.append(cfg.replace(variant=variant, adversaries=[name]))
    return [run_experiment(c, train_ds, val_ds, test_ds) for c in configs]
