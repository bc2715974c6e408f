"""Result tables: the CSV contract and their console rendering."""

import logging
from pathlib import Path
from typing import TYPE_CHECKING

import pandas as pd
from rich.table import Table

if TYPE_CHECKING:
    from gradfair.harness import ExperimentResult


logger = logging.getLogger(__name__)

LEADING_COLUMNS = ["algorithm", "dataset", "lambda", "seed", "epoch_selected", "acc", "delta"]

# Direction of "best" per metric column, discrimination columns are minimised.
HIGHER_IS_BETTER = {"acc": True, "delta": True, "cons": True, "discr": False}


def results_frame(results: list["ExperimentResult"]) -> pd.DataFrame:
    """One row per result with the fixed results header.

    The header is algorithm, dataset, lambda, seed, epoch_selected, acc, delta, one
    discr_<attr> column per audited attribute and cons.

    """
    attributes = []
    for result in results:
        attributes += [a for a in result.config.protected if a not in attributes]
    rows = []
    for result in results:
        row = dict(
            algorithm=result.algorithm,
            dataset=result.config.dataset,
            **{"lambda": result.config.lambda_},
            seed=result.config.rng_seed,
            epoch_selected=result.epoch_selected,
            acc=result.test.accuracy,
            delta=result.test.delta,
        )
        for name in attributes:
            row[f"discr_{name}"] = result.test.discrimination.get(name)
        row["cons"] = result.test.consistency
        rows.append(row)
    columns = LEADING_COLUMNS + [f"discr_{name}" for name in attributes] + ["cons"]
    return pd.DataFrame(rows, columns=columns)


def write_results(df: pd.DataFrame, path: str | Path, float_format: str = "%.6f") -> Path:
    """Write a result table as UTF-8 CSV."""
    path = Path(path)
    df.to_csv(path, index=False, float_format=float_format, encoding="utf-8")
    logger.debug(f"Wrote {len(df)} rows to {path}")
    return path


def _direction(column: str):
    for prefix, higher in HIGHER_IS_BETTER.items():
        if column == prefix or column.startswith(f"{prefix}_"):
            return higher
    return None


def best_rows(df: pd.DataFrame) -> dict[str, int]:
    """Position of the best row of every metric column, missing values never win."""
    best = {}
    for column in df.columns:
        higher = _direction(column)
        values = pd.to_numeric(df[column], errors="coerce").reset_index(drop=True)
        if higher is None or values.isna().all():
            continue
        best[column] = int(values.idxmax() if higher else values.idxmin())
    return best


def render_table(df: pd.DataFrame, title: str = "", digits: int = 4) -> Table:
    """Rich table of ``df`` with the best value of every metric column in bold."""
    table = Table(title=title or None)
    for column in df.columns:
        table.add_column(str(column), justify="left" if df[column].dtype == object else "right")
    best = best_rows(df)
    for i, (_, row) in enumerate(df.iterrows()):
        cells = []
        for column in df.columns:
            value = row[column]
            if value is None or (isinstance(value, float) and pd.isna(value)):
                text = ""
            elif isinstance(value, float):
                text = f"{value:.{digits}f}"
            else:
                text = str(value)
            if best.get(column) == i:
                text = f"[bold]{text}*[/bold]"
            cells.append(text)
        table.add_row(*cells)
    return table


def history_frame(result: "ExperimentResult") -> pd.DataFrame:
    """Per-epoch validation history, the selected epoch flagged."""
    rows = []
    for record in result.history:
        row = dict(epoch=record.epoch, train_loss=record.train_loss, val_acc=record.val_accuracy)
        row.update({f"val_discr_{k}": v for k, v in record.val_discrimination.items()})
        row.update(
            val_cons=record.val_consistency,
            selected=record.epoch == result.epoch_selected,
            digest=record.digest,
        )
        rows.append(row)
    return pd.DataFrame(rows)
