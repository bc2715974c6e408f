"""Tabular dataset ingestion, encoding, splits and a synthetic biased generator."""

import logging
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
import yaml
from pydantic import ConfigDict, Field, field_validator, model_validator
from pydantic_numpy.typing import Np1DArray

from gradfair.types import ColumnKind, GradBaseModel, MissingPolicy


logger = logging.getLogger(__name__)

HERE = Path(__file__).parent

MISSING = "missing"
DEFAULT_FRACTIONS = (0.5, 0.2, 0.3)


class ColumnSpec(GradBaseModel):
    """Schema of one column."""

    name: str = Field(description="Column name")
    kind: ColumnKind = Field(description="Column kind")
    positive: Optional[list[str]] = Field(
        default=None,
        description="Binary columns only, raw values mapped to 1, others map to 0",
    )
    negative: Optional[list[str]] = Field(
        default=None,
        description=(
            "Binary columns only, raw values mapped to 0 alongside 'positive', values in "
            "neither list are unparseable"
        ),
    )
    threshold: Optional[float] = Field(
        default=None,
        description="Binary columns only, numeric values above it map to 1",
    )

    @field_validator("positive", "negative", mode="before")
    @classmethod
    def validate_positive(cls, v) -> Optional[list[str]]:
        if v is None:
            return v
        if not isinstance(v, (list, tuple)):
            v = [v]
        return [str(value) for value in v]

    @model_validator(mode="after")
    def validate_mapping(self) -> "ColumnSpec":
        mapped = self.positive is not None or self.threshold is not None
        if mapped and self.kind != ColumnKind.BINARY:
            raise ValueError(f"'{self.name}': only binary columns take positive/threshold")
        if self.positive is not None and self.threshold is not None:
            raise ValueError(f"'{self.name}': set either positive or threshold, not both")
        if self.negative is not None:
            if self.positive is None:
                raise ValueError(f"'{self.name}': negative values need positive values")
            overlap = sorted(set(self.positive) & set(self.negative))
            if overlap:
                raise ValueError(f"'{self.name}': {overlap} are both positive and negative")
        return self

    def to_binary(self, values: pd.Series, strict: bool = False) -> pd.Series:
        """Map raw string values onto 1.0 / 0.0, missing values stay NaN.

        With ``strict`` unparseable values become NaN instead of raising: non-numeric
        values, numbers other than 0/1 and values outside 'positive' and 'negative'.

        """
        missing = values.isna()
        if self.threshold is not None:
            numeric = pd.to_numeric(values, errors="coerce")
            if not strict:
                _check_numeric(self.name, values, numeric)
            mapped = (numeric > self.threshold).astype(float).mask(numeric.isna())
        elif self.positive is not None:
            mapped = values.isin(self.positive).astype(float)
            if self.negative is not None:
                mapped = mapped.mask(~values.isin(self.positive + self.negative))
        else:
            numeric = pd.to_numeric(values, errors="coerce")
            if strict:
                return numeric.where(numeric.isin([0, 1])).astype(float)
            _check_numeric(self.name, values, numeric)
            bad = ~numeric.isin([0, 1]) & ~missing
            if bad.any():
                raise ValueError(
                    f"Column '{self.name}' is binary but holds values other than 0/1 "
                    f"at rows {_rows(bad)}"
                )
            mapped = numeric.astype(float)
        return mapped.mask(missing)


def _rows(mask: pd.Series, limit: int = 10) -> list[int]:
    """Data row numbers (1-based, header excluded) flagged by ``mask``."""
    return [int(i) + 1 for i in np.flatnonzero(mask.to_numpy())[:limit]]


def _check_numeric(name: str, raw: pd.Series, numeric: pd.Series):
    bad = numeric.isna() & raw.notna()
    if bad.any():
        raise ValueError(f"Column '{name}' has non-numeric values at rows {_rows(bad)}")


class DatasetSpec(GradBaseModel):
    """Description of a delimited tabular dataset."""

    name: str = Field(description="Dataset name used in reports")
    source: Path = Field(description="Path to the delimited text file")
    delimiter: str = Field(default=",", description="Field delimiter")
    header: bool = Field(
        default=True,
        description="The first row holds column names, otherwise 'columns' gives them in file order",
    )
    columns: list[ColumnSpec] = Field(description="Column schema")
    target: str = Field(description="Binary target column")
    protected: list[str] = Field(
        default=[], description="Binary protected columns, routed to A and kept out of X"
    )
    missing: MissingPolicy = Field(
        default=MissingPolicy.IMPUTE, description="Missing feature value policy"
    )
    na_values: list[str] = Field(
        default=["?", ""], description="Raw strings read as missing values"
    )

    @model_validator(mode="after")
    def validate_columns(self) -> "DatasetSpec":
        kinds = {column.name: column for column in self.columns}
        if len(kinds) != len(self.columns):
            raise ValueError(f"Duplicate column names in dataset spec '{self.name}'")
        for name in [self.target, *self.protected]:
            if name not in kinds:
                raise ValueError(f"Column '{name}' is not in the schema of '{self.name}'")
            if kinds[name].kind != ColumnKind.BINARY:
                raise ValueError(f"Target and protected column '{name}' must be binary")
        if self.target in self.protected:
            raise ValueError(f"Target '{self.target}' cannot also be protected")
        return self

    @property
    def features(self) -> list[ColumnSpec]:
        """Columns that make up the unprotected feature vector."""
        excluded = {self.target, *self.protected}
        return [column for column in self.columns if column.name not in excluded]

    def column(self, name: str) -> ColumnSpec:
        return next(column for column in self.columns if column.name == name)

    @classmethod
    def from_yaml(cls, filename: str | Path, **overrides) -> "DatasetSpec":
        """Read a spec file, a relative source is taken relative to the spec file."""
        filename = Path(filename)
        with open(filename) as stream:
            kwargs = yaml.safe_load(stream)
        kwargs.update(overrides)
        source = Path(kwargs["source"])
        if not source.is_absolute():
            kwargs["source"] = filename.parent / source
        return cls(**kwargs)

    def write_yaml(self, filename: str | Path) -> Path:
        filename = Path(filename)
        with open(filename, "w") as stream:
            yaml.safe_dump(self.model_dump(mode="json", exclude_none=True), stream, sort_keys=False)
        return filename


def packaged_spec(name: str) -> Path:
    """Path of a dataset spec shipped with the package, e.g. 'adult'."""
    filename = HERE / "specs" / f"{name}.yml"
    if not filename.is_file():
        available = sorted(path.stem for path in (HERE / "specs").glob("*.yml"))
        raise ValueError(f"No packaged spec '{name}', available specs are {available}")
    return filename


def load_table(spec: DatasetSpec) -> pd.DataFrame:
    """Read and type the table described by ``spec``.

    Continuous columns become floats, binary columns 0.0/1.0 and categorical columns
    strings, missing values are NaN. Rows with a missing target or protected value
    are dropped, so are rows with missing features under the 'drop' policy.

    """
    if not Path(spec.source).is_file():
        raise FileNotFoundError(f"Data file {spec.source} for '{spec.name}' not found")
    names = [column.name for column in spec.columns]
    df = pd.read_csv(
        spec.source,
        sep=spec.delimiter,
        header=0 if spec.header else None,
        names=None if spec.header else names,
        dtype=str,
        na_values=spec.na_values,
        skipinitialspace=True,
        engine="python" if len(spec.delimiter) > 1 else "c",
    )
    df.columns = [str(column).strip() for column in df.columns]
    missing = [name for name in names if name not in df.columns]
    if missing:
        raise ValueError(
            f"Column(s) {missing} missing from {spec.source}, got {list(df.columns)}"
        )
    df = df[names].apply(lambda s: s.str.strip())

    required_names = [spec.target, *spec.protected]
    table = {}
    for column in spec.columns:
        raw = df[column.name]
        if column.kind == ColumnKind.CONTINUOUS:
            numeric = pd.to_numeric(raw, errors="coerce")
            _check_numeric(column.name, raw, numeric)
            table[column.name] = numeric.astype(float)
        elif column.kind == ColumnKind.BINARY:
            table[column.name] = column.to_binary(raw, strict=column.name in required_names)
        else:
            table[column.name] = raw
    table = pd.DataFrame(table)

    required = table[required_names].isna().any(axis=1)
    if required.any():
        logger.warning(
            f"Dropping {int(required.sum())} rows of '{spec.name}' with a missing or "
            "unparseable target or protected value"
        )
    table = table[~required]
    if spec.missing == MissingPolicy.DROP:
        incomplete = table[[column.name for column in spec.features]].isna().any(axis=1)
        if incomplete.any():
            logger.info(f"Dropping {int(incomplete.sum())} rows with missing features")
        table = table[~incomplete]
    logger.info(f"Loaded {len(table)} rows of '{spec.name}' from {spec.source}")
    return table.reset_index(drop=True)


class EncodingStats(GradBaseModel):
    """Encoding statistics learned on a training table."""

    means: dict[str, float] = Field(description="Mean of continuous and binary columns")
    stds: dict[str, float] = Field(description="Standard deviation of continuous columns")
    categories: dict[str, list[str]] = Field(description="Categories of categorical columns")


def fit_stats(table: pd.DataFrame, spec: DatasetSpec) -> EncodingStats:
    """Learn the encoding statistics of the feature columns of ``table``."""
    means, stds, categories = {}, {}, {}
    for column in spec.features:
        values = table[column.name]
        if column.kind == ColumnKind.CATEGORICAL:
            categories[column.name] = sorted(values.fillna(MISSING).unique().tolist())
            continue
        mean = float(values.mean()) if values.notna().any() else 0.0
        means[column.name] = mean
        if column.kind == ColumnKind.CONTINUOUS:
            std = float(values.std(ddof=0)) if values.notna().any() else 0.0
            stds[column.name] = std if std > 0 else 1.0
    return EncodingStats(means=means, stds=stds, categories=categories)


class EncodedDataset(GradBaseModel):
    """Numeric dataset with the protected attributes kept out of the features."""

    name: str = Field(default="dataset", description="Dataset name")
    X: np.ndarray = Field(description="Unprotected features, shape (n, d)")
    y: np.ndarray = Field(description="Binary target, shape (n,)")
    A: np.ndarray = Field(description="Binary protected attributes, shape (n, m)")
    feature_names: list[str] = Field(description="Names of the columns of X")
    protected: list[str] = Field(description="Names of the columns of A")
    continuous: list[bool] = Field(description="Columns of X that are standardised")
    stats: Optional[EncodingStats] = Field(
        default=None, description="Statistics the features were encoded with"
    )
    spec: Optional[DatasetSpec] = Field(default=None, description="Source schema")
    table: Optional[pd.DataFrame] = Field(
        default=None, description="Typed source rows, used to re-encode splits", exclude=True
    )
    model_config = ConfigDict(arbitrary_types_allowed=True)

    @model_validator(mode="after")
    def validate_arrays(self) -> "EncodedDataset":
        self.X = np.asarray(self.X, dtype=np.float64).reshape(len(self.X), -1)
        self.y = np.asarray(self.y).astype(int)
        self.A = np.asarray(self.A).astype(int).reshape(len(self.A), -1)
        n = self.X.shape[0]
        if self.y.shape != (n,) or self.A.shape[0] != n:
            raise ValueError(
                f"X {self.X.shape}, y {self.y.shape} and A {self.A.shape} row counts differ"
            )
        if self.X.shape[1] != len(self.feature_names) or len(self.continuous) != len(self.feature_names):
            raise ValueError("feature_names and continuous must describe every column of X")
        if self.A.shape[1] != len(self.protected):
            raise ValueError(f"A has {self.A.shape[1]} columns for {self.protected}")
        leaked = [name for name in self.protected if name in self.feature_names]
        if leaked:
            raise ValueError(f"Protected column(s) {leaked} found in the features")
        if not np.isfinite(self.X).all():
            raise ValueError("Features must be finite")
        return self

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def attributes(self, names: Optional[list[str]] = None) -> np.ndarray:
        """Protected attribute columns in the order of ``names``."""
        names = self.protected if names is None else names
        unknown = [name for name in names if name not in self.protected]
        if unknown:
            raise ValueError(f"Unknown protected attribute(s) {unknown}, have {self.protected}")
        return self.A[:, [self.protected.index(name) for name in names]]

    def audit(self) -> list[tuple[str, str]]:
        """Feature/protected column pairs holding identical values."""
        return [
            (feature, name)
            for i, feature in enumerate(self.feature_names)
            for j, name in enumerate(self.protected)
            if np.array_equal(self.X[:, i], self.A[:, j])
        ]

    def subset(self, rows: Np1DArray) -> "EncodedDataset":
        """Rows of the dataset, encoding unchanged."""
        return self.model_copy(
            update=dict(
                X=self.X[rows],
                y=self.y[rows],
                A=self.A[rows],
                table=None if self.table is None else self.table.iloc[rows].reset_index(drop=True),
            )
        )

    def to_frame(self) -> pd.DataFrame:
        """Features, protected attributes and the target 'y' as one table."""
        df = pd.DataFrame(self.X, columns=self.feature_names)
        for j, name in enumerate(self.protected):
            df[name] = self.A[:, j]
        df["y"] = self.y
        return df


def encode(
    table: pd.DataFrame, spec: DatasetSpec, train_stats: Optional[EncodingStats] = None
) -> EncodedDataset:
    """Encode a typed table.

    Parameters
    ----------
    table: pd.DataFrame
        Output of :func:`load_table`.
    spec: DatasetSpec
        The dataset schema.
    train_stats: EncodingStats, optional
        Statistics learned on the training rows, learned from ``table`` if not given.

    Returns
    -------
    dataset: EncodedDataset
        Categorical columns one-hot encoded, continuous columns z-scored, binary
        columns in {0, 1}, protected columns in A.

    """
    stats = fit_stats(table, spec) if train_stats is None else train_stats
    blocks, names, continuous = [], [], []
    for column in spec.features:
        values = table[column.name]
        if column.kind == ColumnKind.CATEGORICAL:
            categories = stats.categories[column.name]
            values = values.fillna(MISSING).to_numpy(dtype=str)
            onehot = (values[:, None] == np.array(categories, dtype=str)[None, :]).astype(float)
            unseen = int((onehot.sum(axis=1) == 0).sum())
            if unseen:
                logger.warning(
                    f"{unseen} rows of '{column.name}' hold categories unseen in training, "
                    "encoded as all zeros"
                )
            blocks.append(onehot)
            names.extend(f"{column.name}={category}" for category in categories)
            continuous.extend([False] * len(categories))
        else:
            filled = values.fillna(stats.means[column.name]).to_numpy(dtype=float)
            if column.kind == ColumnKind.CONTINUOUS:
                filled = (filled - stats.means[column.name]) / stats.stds[column.name]
            blocks.append(filled[:, None])
            names.append(column.name)
            continuous.append(column.kind == ColumnKind.CONTINUOUS)

    n = len(table)
    dataset = EncodedDataset(
        name=spec.name,
        X=np.hstack(blocks) if blocks else np.zeros((n, 0)),
        y=table[spec.target].to_numpy(),
        A=table[spec.protected].to_numpy().reshape(n, len(spec.protected)),
        feature_names=names,
        protected=list(spec.protected),
        continuous=continuous,
        stats=stats,
        spec=spec,
        table=table.reset_index(drop=True),
    )
    duplicates = dataset.audit()
    if duplicates:
        logger.warning(f"Features duplicating protected columns: {duplicates}")
    return dataset


def split_indices(
    n: int, fractions: tuple[float, float, float] = DEFAULT_FRACTIONS, rng_seed: int = 0
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sorted train, validation and test row indices partitioning ``range(n)``."""
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError(f"Split fractions must be three positive values, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"Split fractions must sum to 1, got {sum(fractions)}")
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) <= 0:
        raise ValueError(
            f"Splitting {n} rows with {fractions} leaves an empty split "
            f"({n_train}/{n_val}/{n_test})"
        )
    order = np.random.default_rng(rng_seed).permutation(n)
    return (
        np.sort(order[:n_train]),
        np.sort(order[n_train : n_train + n_val]),
        np.sort(order[n_train + n_val :]),
    )


def split(
    ds: EncodedDataset,
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS,
    rng_seed: int = 0,
) -> tuple[EncodedDataset, EncodedDataset, EncodedDataset]:
    """Split into train, validation and test sets standardised on the train part.

    Datasets that carry their source table are re-encoded with statistics learned on
    the train rows, so imputation and categories come from the train split too. The
    others have their standardised columns re-standardised on the train rows.

    """
    parts = split_indices(len(ds), fractions, rng_seed)
    if ds.table is not None and ds.spec is not None:
        tables = [ds.table.iloc[rows].reset_index(drop=True) for rows in parts]
        stats = fit_stats(tables[0], ds.spec)
        return tuple(encode(table, ds.spec, stats) for table in tables)

    mask = np.array(ds.continuous, dtype=bool)
    train = ds.X[parts[0]][:, mask]
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    std[std == 0] = 1.0
    datasets = []
    for rows in parts:
        X = ds.X[rows].copy()
        X[:, mask] = (X[:, mask] - mean) / std
        datasets.append(ds.subset(rows).model_copy(update=dict(X=X)))
    return tuple(datasets)


def synth_biased(
    n: int, d: int, bias: list[float], rng_seed: int = 0
) -> EncodedDataset:
    """Synthetic dataset whose labels are biased towards the protected attributes.

    Each row draws its protected attributes and an independent merit label from
    Bernoulli(0.5). One attribute ``j`` is picked uniformly per row and the label
    copies ``a_j`` with probability ``bias[j]``, otherwise it is the merit label. The
    features are a noisy merit channel ``x0``, one leakage channel per attribute
    (``x1`` to ``xm``) from which the attribute is recoverable, and pure noise
    channels up to ``d`` columns.

    Parameters
    ----------
    n: int
        Number of rows, at least 100.
    d: int
        Number of features, at least one more than the number of attributes.
    bias: list[float]
        Label/attribute mixing strength in [0, 1], one per protected attribute.
    rng_seed: int
        Seed, same seed gives an identical dataset.

    Returns
    -------
    dataset: EncodedDataset
        Standardised features, attributes named a0, a1, ...

    """
    if n < 100:
        raise ValueError(f"synth_biased needs n >= 100, got {n}")
    if not bias:
        raise ValueError("synth_biased needs at least one bias value")
    if any(not 0.0 <= b <= 1.0 for b in bias):
        raise ValueError(f"Bias values must be in [0, 1], got {bias}")
    m = len(bias)
    if d < m + 1:
        raise ValueError(f"d must be at least {m + 1} for {m} protected attributes")

    rng = np.random.default_rng(rng_seed)
    A = rng.integers(0, 2, size=(n, m))
    merit = rng.integers(0, 2, size=n)
    pick = rng.integers(0, m, size=n)
    copies = rng.random(n) < np.asarray(bias)[pick]
    y = np.where(copies, A[np.arange(n), pick], merit)

    X = rng.normal(size=(n, d))
    X[:, 0] += 2.0 * merit - 1.0
    X[:, 1 : m + 1] = (2.0 * A - 1.0) + 0.25 * X[:, 1 : m + 1]
    X = (X - X.mean(axis=0)) / X.std(axis=0)
    return EncodedDataset(
        name="synthetic",
        X=X,
        y=y,
        A=A,
        feature_names=[f"x{i}" for i in range(d)],
        protected=[f"a{j}" for j in range(m)],
        continuous=[True] * d,
    )


def frame_spec(ds: EncodedDataset, source: str | Path, name: Optional[str] = None) -> DatasetSpec:
    """Dataset spec describing the table written from :meth:`EncodedDataset.to_frame`."""
    columns = [ColumnSpec(name=feature, kind=ColumnKind.CONTINUOUS) for feature in ds.feature_names]
    columns += [
        ColumnSpec(name=column, kind=ColumnKind.BINARY, positive=["1"], negative=["0"])
        for column in [*ds.protected, "y"]
    ]
    return DatasetSpec(
        name=name or ds.name,
        source=Path(source),
        columns=columns,
        target="y",
        protected=list(ds.protected),
    )
