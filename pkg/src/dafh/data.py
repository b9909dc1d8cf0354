"""Tabular datasets: the synthetic generator, CSV loading, z-scoring, splits."""

import hashlib
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import pandas as pd

from .errors import DataError, InvalidArgument
from .rng import Stream

log = logging.getLogger(__name__)

MISSING_TOKENS = ["", "?", "NA"]
SYNTHETIC_COLUMNS = ["x1", "x2", "s1", "s2", "y"]


@dataclass(frozen=True)
class Schema:
    """Column bookkeeping for a Dataset.

    ``column_kinds`` tags each original feature column ``numeric`` or
    ``categorical``. ``categories`` holds the category list of every
    categorical column (fixed at load time so all splits encode alike), and
    ``numeric_stats`` holds the (mean, population std) pair for each numeric
    feature column once :func:`standardize` has seen a training split.
    """

    feature_names: tuple
    label_name: str = "y"
    sensitive_names: tuple = ()
    column_kinds: dict = field(default_factory=dict)
    categories: dict = field(default_factory=dict)
    numeric_stats: dict = field(default_factory=dict)

    @property
    def numeric_features(self):
        return [c for c in self.feature_names if self.column_kinds.get(c) == "numeric"]

    def onehot_source(self, feature_name):
        """Map a one-hot output column back to its (column, category) pair."""
        for col, cats in self.categories.items():
            for cat in cats:
                if onehot_name(col, cat) == feature_name:
                    return col, cat
        raise KeyError(feature_name)

    def fingerprint(self):
        text = "\x1f".join(self.feature_names)
        return hashlib.sha256(f"{len(self.feature_names)}|{text}".encode()).hexdigest()[:16]


def onehot_name(column, category):
    return f"{column}={category}"


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    sensitive: Optional[pd.DataFrame]
    schema: Schema

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels).astype(np.int64)
        if x.ndim != 2:
            raise InvalidArgument(f"features must be 2-D, got shape {x.shape}")
        n, d = x.shape
        if n < 1:
            raise InvalidArgument("dataset must have at least one row")
        if y.shape != (n,):
            raise InvalidArgument(f"labels shape {y.shape} does not match {n} rows")
        if not np.all((y == 1) | (y == -1)):
            raise InvalidArgument("labels must be +1 or -1")
        if d != len(self.schema.feature_names):
            raise InvalidArgument(
                f"{d} feature columns but schema names {len(self.schema.feature_names)}")
        if not np.all(np.isfinite(x)):
            raise InvalidArgument("features contain missing or non-finite values")
        if self.sensitive is not None and len(self.sensitive) != n:
            raise InvalidArgument("sensitive table row count does not match features")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        if self.sensitive is not None:
            object.__setattr__(self, "sensitive", self.sensitive.reset_index(drop=True))

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        sens = None if self.sensitive is None else self.sensitive.iloc[idx]
        return Dataset(self.features[idx], self.labels[idx], sens, self.schema)

    def sensitive_column(self, name):
        if self.sensitive is None or name not in self.sensitive.columns:
            raise DataError(f"sensitive attribute {name!r} not available")
        return self.sensitive[name].to_numpy()

    def to_frame(self):
        df = pd.DataFrame(self.features, columns=list(self.schema.feature_names))
        if self.sensitive is not None:
            for c in self.sensitive.columns:
                df[c] = self.sensitive[c].to_numpy()
        df[self.schema.label_name] = self.labels
        return df


# -- synthetic ---------------------------------------------------------------

def gen_synthetic(n=20000, delta=0.4, sigma=0.3, seed=0):
    """Two-attribute Gaussian mixture where the label shifts both features.

    s1, s2, y are fair signs; x1 ~ N(s1 + delta*s1*s2*y, sigma) and
    x2 ~ N(s2 + delta*s1*s2*y, sigma), with sigma the standard deviation.
    Draw layout on the stream: n signs each for s1, s2, y, then 2n normals
    (x1 noise, then x2 noise).
    """
    if int(n) != n or n < 1:
        raise InvalidArgument(f"n must be a positive integer, got {n}")
    if not sigma > 0:
        raise InvalidArgument(f"sigma must be positive, got {sigma}")
    n = int(n)
    stream = Stream(seed)
    s1 = stream.signs(n)
    s2 = stream.signs(n)
    y = stream.signs(n)
    noise = stream.normal(2 * n)
    shift = delta * s1 * s2 * y
    x1 = s1 + shift + sigma * noise[:n]
    x2 = s2 + shift + sigma * noise[n:]
    schema = Schema(
        feature_names=("x1", "x2"),
        label_name="y",
        sensitive_names=("s1", "s2"),
        column_kinds={"x1": "numeric", "x2": "numeric"},
    )
    sens = pd.DataFrame({"s1": s1, "s2": s2})
    return Dataset(np.column_stack([x1, x2]), y, sens, schema)


def write_synthetic_csv(data, path):
    df = data.to_frame()[SYNTHETIC_COLUMNS]
    df.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


# -- CSV loading -------------------------------------------------------------

def _map_labels(values, label_name):
    """{0,1} and {-1,+1} map 1 to +1; otherwise the first-sorted value is -1."""
    if values.nunique() > 2:
        raise DataError(f"label not binary: column {label_name!r} has {values.nunique()} values")
    numeric = pd.to_numeric(values, errors="coerce")
    if not numeric.isna().any():
        vals = numeric.to_numpy(dtype=np.float64)
        present = set(np.unique(vals).tolist())
        if present <= {0.0, 1.0} or present <= {-1.0, 1.0}:
            return np.where(vals == 1.0, 1, -1)
        return np.where(vals == vals.min(), -1, 1)
    text = values.astype(str).str.strip().to_numpy()
    return np.where(text == sorted(set(text))[0], -1, 1)


def load_csv(path, label_name, sensitive_names=(), drop=()):
    """Read a headed CSV into a Dataset.

    Sensitive columns go to the side table, categorical columns are one-hot
    encoded (category lists fixed here), numeric columns stay raw until
    :func:`standardize`. Columns in ``drop`` (ids, free text) are discarded
    first. Rows with any missing value are dropped.
    """
    sensitive_names = list(sensitive_names)
    if not os.path.exists(path):
        raise DataError(f"missing file: {path}")
    try:
        df = pd.read_csv(path, na_values=MISSING_TOKENS, keep_default_na=False,
                         skipinitialspace=True, encoding="utf-8", float_precision="round_trip")
    except pd.errors.EmptyDataError:
        raise DataError(f"empty file: {path}") from None
    df.columns = [str(c).strip() for c in df.columns]
    df = df.drop(columns=[c for c in drop if c in df.columns])
    if len(df) == 0:
        raise DataError(f"empty file: {path}")
    for col in [label_name, *sensitive_names]:
        if col not in df.columns:
            raise DataError(f"missing column {col!r} in {path}")

    before = len(df)
    df = df.dropna(axis=0, how="any").reset_index(drop=True)
    dropped = before - len(df)
    if dropped:
        log.info("dropped %d of %d rows with missing values from %s", dropped, before, path)
    if len(df) == 0:
        raise DataError(f"no complete rows in {path}")

    labels = _map_labels(df[label_name], label_name)

    kinds, categories, blocks, names = {}, {}, [], []
    for col in df.columns:
        if col == label_name or col in sensitive_names:
            continue
        series = df[col]
        if pd.api.types.is_numeric_dtype(series) and not pd.api.types.is_bool_dtype(series):
            kinds[col] = "numeric"
            blocks.append(series.to_numpy(dtype=np.float64)[:, None])
            names.append(col)
        else:
            kinds[col] = "categorical"
            text = series.astype(str).str.strip()
            cats = sorted(text.unique())
            categories[col] = tuple(cats)
            onehot = (text.to_numpy()[:, None] == np.array(cats, dtype=object)[None, :])
            blocks.append(onehot.astype(np.float64))
            names.extend(onehot_name(col, c) for c in cats)
    features = np.hstack(blocks) if blocks else np.zeros((len(df), 0))
    schema = Schema(
        feature_names=tuple(names),
        label_name=label_name,
        sensitive_names=tuple(sensitive_names),
        column_kinds=kinds,
        categories=categories,
    )
    sens = df[sensitive_names].copy() if sensitive_names else None
    return Dataset(features, labels, sens, schema)


def decode_onehot(data, column):
    """Recover the original category of every row for one categorical column."""
    cats = data.schema.categories[column]
    idx = [data.schema.feature_names.index(onehot_name(column, c)) for c in cats]
    block = data.features[:, idx]
    return np.array(cats, dtype=object)[np.argmax(block, axis=1)]


# -- standardization and splitting -------------------------------------------

def _check_same_schema(a, b):
    if tuple(a.schema.feature_names) != tuple(b.schema.feature_names):
        raise InvalidArgument("schema mismatch between datasets")


def standardize(train, others=()):
    """Z-score numeric feature columns with training statistics.

    Uses the population standard deviation; a column whose training std is
    below 1e-12 is only centered. One-hot columns are left untouched.
    Returns ``(train', [others'], schema')``.
    """
    others = list(others)
    for o in others:
        _check_same_schema(train, o)
    names = list(train.schema.feature_names)
    kinds = dict(train.schema.column_kinds)
    num_idx = [i for i, c in enumerate(names) if kinds.get(c) == "numeric"]
    mean = np.zeros(len(names))
    scale = np.ones(len(names))
    stats = {}
    for i in num_idx:
        col = train.features[:, i]
        mu = float(np.mean(col))
        sd = float(np.std(col))
        mean[i] = mu
        scale[i] = sd if sd >= 1e-12 else 1.0
        stats[names[i]] = (mu, sd)
    schema = replace(train.schema, numeric_stats=stats)

    def apply(ds):
        x = (ds.features - mean) / scale
        return Dataset(x, ds.labels, ds.sensitive, schema)

    return apply(train), [apply(o) for o in others], schema


def apply_stats(data, schema):
    """Apply the numeric stats recorded in ``schema`` to another dataset."""
    _check_same_schema(data, Dataset(np.zeros((1, len(schema.feature_names))),
                                     np.ones(1), None, schema))
    x = data.features.copy()
    for i, c in enumerate(schema.feature_names):
        if c in schema.numeric_stats:
            mu, sd = schema.numeric_stats[c]
            x[:, i] = (x[:, i] - mu) / (sd if sd >= 1e-12 else 1.0)
    return Dataset(x, data.labels, data.sensitive, schema)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.75
    seed: int = 0
    repeat_index: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise InvalidArgument(f"train_fraction must lie in (0, 1), got {self.train_fraction}")


def split_indices(n, spec):
    if n < 2:
        raise InvalidArgument(f"need at least 2 rows to split, got {n}")
    perm = Stream(spec.seed, spec.repeat_index).permutation(n)
    n_train = math.ceil(spec.train_fraction * n)
    n_train = min(max(n_train, 1), n - 1)  # both sides nonempty
    return perm[:n_train], perm[n_train:]


def split(data, spec=SplitSpec()):
    tr, te = split_indices(data.n, spec)
    return data.take(tr), data.take(te)
