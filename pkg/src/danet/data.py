"""Dataset loading, preprocessing, splitting, and synthetic generators.

CSV input follows RFC 4180 with a header row (stdlib csv module). A schema
file assigns every column a kind: ``name=continuous``, ``name=categorical``,
or ``name=target`` (exactly one target). Categorical columns are leave-one-out
encoded against the training targets; continuous columns are z-scored with
training statistics. Near-constant columns (std below 1e-12) become zeros
rather than dividing by noise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng


class DataError(ValueError):
    """Malformed data, schema, or split request."""


@dataclass
class Dataset:
    """Feature matrix plus targets and per-column metadata.

    ``cat_raw`` holds the raw string values of categorical columns until the
    leave-one-out encoder replaces them with numeric codes; ``encoded`` flips
    to True once every column is numeric and finite.
    """

    features: np.ndarray
    targets: np.ndarray
    names: list
    kinds: list
    task: str
    cat_raw: dict = field(default_factory=dict)
    encoded: bool = True

    def __post_init__(self):
        if self.features.ndim != 2:
            raise DataError(f"Dataset: features must be 2-D, got {self.features.shape}")
        if self.features.shape[0] != self.targets.shape[0]:
            raise DataError("Dataset: features and targets row counts differ")
        if len(self.names) != self.features.shape[1] or len(self.kinds) != self.features.shape[1]:
            raise DataError("Dataset: names/kinds do not match feature count")
        if self.task not in ("class", "rank"):
            raise DataError(f"Dataset: task must be 'class' or 'rank', got {self.task!r}")

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            features=self.features[idx].copy(),
            targets=self.targets[idx].copy(),
            names=list(self.names),
            kinds=list(self.kinds),
            task=self.task,
            cat_raw={j: [vals[i] for i in idx] for j, vals in self.cat_raw.items()},
            encoded=self.encoded,
        )


SCHEMA_KINDS = ("continuous", "categorical", "target")


def read_schema(path) -> dict:
    """Parse a schema file into an ordered {column: kind} mapping."""
    schema = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"schema line {lineno}: expected 'column=kind', got {line!r}")
            name, kind = line.split("=", 1)
            name, kind = name.strip(), kind.strip()
            if kind not in SCHEMA_KINDS:
                raise DataError(
                    f"schema line {lineno}: kind must be one of {SCHEMA_KINDS}, got {kind!r}"
                )
            if name in schema:
                raise DataError(f"schema line {lineno}: duplicate column {name!r}")
            schema[name] = kind
    targets = [n for n, k in schema.items() if k == "target"]
    if len(targets) != 1:
        raise DataError(f"schema must name exactly one target column, found {len(targets)}")
    return schema


def _parse_float(cell: str, row: int, col: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise DataError(f"row {row}: non-numeric value {cell!r} in continuous column {col!r}") from None
    if not np.isfinite(v):
        raise DataError(f"row {row}: non-finite value {cell!r} in continuous column {col!r}")
    return v


def load_csv(path, schema: dict, task: str = "class") -> Dataset:
    """Load an RFC 4180 CSV with header against a schema.

    Row numbers in error messages are 1-based data rows (the header is row 0).
    Classification targets must be non-negative integers.
    """
    if task not in ("class", "rank"):
        raise DataError(f"load_csv: task must be 'class' or 'rank', got {task!r}")
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected a header row") from None
        rows = list(reader)
    if not rows:
        raise DataError(f"{path}: no data rows")

    missing = [c for c in schema if c not in header]
    if missing:
        raise DataError(f"{path}: schema column(s) missing from CSV header: {missing}")
    extra = [c for c in header if c not in schema]
    if extra:
        raise DataError(f"{path}: CSV column(s) not named in schema: {extra}")
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate CSV header columns")

    target_col = next(n for n, k in schema.items() if k == "target")
    target_idx = header.index(target_col)
    feat_cols = [(i, name) for i, name in enumerate(header) if name != target_col]
    names = [name for _, name in feat_cols]
    kinds = [schema[name] for name in names]

    n = len(rows)
    features = np.zeros((n, len(feat_cols)))
    cat_raw = {j: [None] * n for j, (_, name) in enumerate(feat_cols)
               if schema[name] == "categorical"}
    targets_f = np.zeros(n)

    for r, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise DataError(f"row {r}: expected {len(header)} cells, got {len(row)}")
        for j, (i, name) in enumerate(feat_cols):
            if schema[name] == "continuous":
                features[r - 1, j] = _parse_float(row[i], r, name)
            else:
                cat_raw[j][r - 1] = row[i]
        targets_f[r - 1] = _parse_float(row[target_idx], r, target_col)

    if task == "class":
        if np.any(targets_f < 0) or np.any(targets_f != np.round(targets_f)):
            bad = int(np.argmax((targets_f < 0) | (targets_f != np.round(targets_f)))) + 1
            raise DataError(
                f"row {bad}: classification target must be a non-negative integer, "
                f"got {targets_f[bad - 1]!r}"
            )
        targets = targets_f.astype(np.int64)
    else:
        targets = targets_f

    return Dataset(features=features, targets=targets, names=names, kinds=kinds,
                   task=task, cat_raw=cat_raw, encoded=not cat_raw)


@dataclass
class LooTable:
    """Per-category target means plus the global fallback mean."""

    means: dict
    global_mean: float


def loo_encode(values, targets=None, mode: str = "fit", table: LooTable | None = None):
    """Leave-one-out encode one categorical column.

    fit:   code for a row is the mean target of the other rows sharing its
           category ((sum - own) / (count - 1)); singleton categories fall
           back to the global target mean. Returns (codes, table) where the
           table maps each category to its full in-sample mean.
    apply: codes come straight from the table; unseen categories get the
           global mean. Returns (codes, table).
    """
    values = list(values)
    if mode == "fit":
        if targets is None:
            raise DataError("loo_encode: fit mode needs targets")
        t = np.asarray(targets, dtype=np.float64)
        if len(values) != t.shape[0]:
            raise DataError("loo_encode: values and targets lengths differ")
        sums: dict = {}
        counts: dict = {}
        for v, y in zip(values, t):
            sums[v] = sums.get(v, 0.0) + float(y)
            counts[v] = counts.get(v, 0) + 1
        global_mean = float(t.mean())
        codes = np.empty(len(values))
        for r, (v, y) in enumerate(zip(values, t)):
            c = counts[v]
            codes[r] = (sums[v] - float(y)) / (c - 1) if c > 1 else global_mean
        table = LooTable(means={v: sums[v] / counts[v] for v in sums},
                         global_mean=global_mean)
        return codes, table
    if mode == "apply":
        if table is None:
            raise DataError("loo_encode: apply mode needs a fitted table")
        codes = np.array([table.means.get(v, table.global_mean) for v in values])
        return codes, table
    raise DataError(f"loo_encode: mode must be 'fit' or 'apply', got {mode!r}")


@dataclass
class ZscoreStats:
    mean: np.ndarray
    std: np.ndarray
    cols: np.ndarray  # indices of the columns the stats apply to


def zscore(features: np.ndarray, cols, mode: str = "fit",
           stats: ZscoreStats | None = None):
    """Normalize the given columns to zero mean / unit variance.

    Columns whose training std falls below 1e-12 are mapped to zero instead
    of being divided by noise. Returns (normalized copy, stats).
    """
    x = np.array(features, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.int64)
    if mode == "fit":
        mean = x[:, cols].mean(axis=0)
        std = x[:, cols].std(axis=0)
        stats = ZscoreStats(mean=mean, std=std, cols=cols)
    elif mode != "apply":
        raise DataError(f"zscore: mode must be 'fit' or 'apply', got {mode!r}")
    if stats is None:
        raise DataError("zscore: apply mode needs fitted stats")
    live = stats.std >= 1e-12
    centered = x[:, stats.cols] - stats.mean
    x[:, stats.cols] = np.where(live, centered / np.where(live, stats.std, 1.0), 0.0)
    return x, stats


@dataclass
class PreprocessState:
    """Fitted leave-one-out tables and z-score statistics, applied as one step."""

    loo_tables: dict = field(default_factory=dict)  # column index -> LooTable
    zstats: ZscoreStats | None = None
    fitted: bool = False

    def fit(self, ds: Dataset) -> Dataset:
        """Fit on a training split and return its preprocessed copy."""
        x = np.array(ds.features)
        self.loo_tables = {}
        for j, vals in ds.cat_raw.items():
            codes, table = loo_encode(vals, ds.targets, mode="fit")
            x[:, j] = codes
            self.loo_tables[j] = table
        cont = [j for j, k in enumerate(ds.kinds) if k == "continuous"]
        x, self.zstats = zscore(x, cont, mode="fit")
        self.fitted = True
        return self._finish(ds, x)

    def apply(self, ds: Dataset) -> Dataset:
        if not self.fitted:
            raise DataError("PreprocessState: fit before apply")
        if sorted(self.loo_tables) != sorted(ds.cat_raw):
            raise DataError("PreprocessState: categorical columns differ from the fitted ones")
        x = np.array(ds.features)
        for j, table in self.loo_tables.items():
            codes, _ = loo_encode(ds.cat_raw[j], mode="apply", table=table)
            x[:, j] = codes
        x, _ = zscore(x, self.zstats.cols, mode="apply", stats=self.zstats)
        return self._finish(ds, x)

    @staticmethod
    def _finish(ds: Dataset, x: np.ndarray) -> Dataset:
        if not np.all(np.isfinite(x)):
            raise DataError("preprocessing produced non-finite values")
        return Dataset(features=x, targets=ds.targets.copy(), names=list(ds.names),
                       kinds=list(ds.kinds), task=ds.task, cat_raw={}, encoded=True)


def stratified_split(ds: Dataset, frac: float = 0.2, seed: int = 0):
    """Split off a validation fraction; per-class proportional for classification.

    Returns (train, valid). Classes with fewer than 2 rows are an error. Row
    order inside each split follows the original dataset order.
    """
    if not 0.0 < frac < 1.0:
        raise DataError(f"stratified_split: frac must be in (0, 1), got {frac}")
    n = ds.n_rows
    if n < 2:
        raise DataError("stratified_split: need at least 2 rows")
    rng = Rng(seed)
    if ds.task == "class":
        valid_idx = []
        for label in np.unique(ds.targets):
            rows = np.flatnonzero(ds.targets == label)
            if rows.size < 2:
                raise DataError(f"stratified_split: class {label} has only {rows.size} row(s)")
            k = int(round(rows.size * frac))
            picked = rows[rng.permutation(rows.size)[:k]]
            valid_idx.append(picked)
        valid_idx = np.sort(np.concatenate(valid_idx)) if valid_idx else np.array([], dtype=int)
    else:
        k = int(round(n * frac))
        valid_idx = np.sort(rng.permutation(n)[:k])
    mask = np.zeros(n, dtype=bool)
    mask[valid_idx] = True
    train_idx = np.flatnonzero(~mask)
    return ds.subset(train_idx), ds.subset(valid_idx)


N_SYNTH_FEATURES = 11


def _formula1(x: np.ndarray) -> np.ndarray:
    return (x[:, 2:6] ** 2).sum(axis=1)


def _formula2(x: np.ndarray) -> np.ndarray:
    return np.abs(np.log(np.abs(x[:, 0] - x[:, 2]))
                  + np.cos(x[:, 5] + np.sin(x[:, 6]))
                  - 1e-8 * x[:, 10])


def _formula3(x: np.ndarray) -> np.ndarray:
    y = np.zeros(x.shape[0])
    for i, j in ((6, 7), (5, 8)):
        s = x[:, i] + x[:, j]
        y += -10.0 * np.sin(s / 10.0) + s * s
    return y


def _formula4(x: np.ndarray) -> np.ndarray:
    return np.where(x[:, 1] < 0.0, _formula1(x), _formula2(x))


FORMULAS = {1: _formula1, 2: _formula2, 3: _formula3, 4: _formula4}


def synth_generate(formula: int, n: int = 7000, seed: int = 0,
                   task: str = "rank") -> Dataset:
    """Draw n rows of 11 iid standard-normal features and label them.

    Formulas 2 and 4 take a logarithm of |v0 - v2|; rows where that gap is
    below 1e-300 are redrawn so the label stays finite. Classification
    binarizes at the sample median (label 1 strictly above).
    """
    if formula not in FORMULAS:
        raise DataError(f"synth_generate: formula must be in {sorted(FORMULAS)}, got {formula}")
    if n < 1:
        raise DataError(f"synth_generate: n must be >= 1, got {n}")
    if task not in ("class", "rank"):
        raise DataError(f"synth_generate: task must be 'class' or 'rank', got {task!r}")
    rng = Rng(seed)
    x = rng.standard_normal((n, N_SYNTH_FEATURES))
    if formula in (2, 4):
        bad = np.abs(x[:, 0] - x[:, 2]) < 1e-300
        while np.any(bad):
            x[bad] = rng.standard_normal((int(bad.sum()), N_SYNTH_FEATURES))
            bad = np.abs(x[:, 0] - x[:, 2]) < 1e-300
    y = FORMULAS[formula](x)
    names = [f"v{i}" for i in range(N_SYNTH_FEATURES)]
    kinds = ["continuous"] * N_SYNTH_FEATURES
    if task == "class":
        targets = (y > np.median(y)).astype(np.int64)
    else:
        targets = y
    return Dataset(features=x, targets=targets, names=names, kinds=kinds, task=task)


def write_csv(ds: Dataset, path, target_name: str = "target") -> None:
    """Write a dataset as CSV (features then target). Floats use repr so a
    round-trip through load_csv is value-exact."""
    if target_name in ds.names:
        raise DataError(f"write_csv: target name {target_name!r} collides with a feature")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(ds.names) + [target_name])
        for r in range(ds.n_rows):
            row = []
            for j in range(ds.n_features):
                if j in ds.cat_raw:
                    row.append(ds.cat_raw[j][r])
                else:
                    row.append(repr(float(ds.features[r, j])))
            t = ds.targets[r]
            row.append(str(int(t)) if ds.task == "class" else repr(float(t)))
            writer.writerow(row)
