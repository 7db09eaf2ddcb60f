"""NetFlow table ingestion, preprocessing, splitting and per-silo rescaling."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

BENIGN = 0
DDOS = 1
LABEL_NAMES = {BENIGN: "benign", DDOS: "ddos"}

FLAG_BITS = 8
SPLIT_FRACTIONS = (0.80, 0.18, 0.02)  # train, test, validation
MIN_BENIGN_FOR_SPLIT = 100
DEFAULT_IQR_K = 3.0


class SchemaError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class FlowSchema:
    feature_names: tuple[str, ...]
    label_column: str
    benign_label_value: str | float = "benign"
    flag_columns: tuple[str, ...] = ()
    drop_columns: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "flag_columns", tuple(self.flag_columns))
        object.__setattr__(self, "drop_columns", tuple(self.drop_columns))
        if not self.feature_names:
            raise SchemaError("feature_names is empty")
        for name, cols in (("feature_names", self.feature_names),
                           ("flag_columns", self.flag_columns),
                           ("drop_columns", self.drop_columns)):
            dup = sorted({c for c in cols if cols.count(c) > 1})
            if dup:
                raise SchemaError(f"duplicate entries in {name}: {dup}")
        both = set(self.flag_columns) & set(self.drop_columns)
        if both:
            raise SchemaError(f"columns both flagged and dropped: {sorted(both)}")
        if self.label_column in self.feature_names or self.label_column in self.drop_columns:
            raise SchemaError(f"label column {self.label_column!r} listed as a feature")
        missing = set(self.flag_columns) - set(self.feature_names)
        if missing:
            raise SchemaError(f"flag columns not among features: {sorted(missing)}")

    @property
    def csv_columns(self) -> set[str]:
        return set(self.feature_names) | set(self.drop_columns) | {self.label_column}

    def to_dict(self) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "label_column": self.label_column,
            "benign_label_value": self.benign_label_value,
            "flag_columns": list(self.flag_columns),
            "drop_columns": list(self.drop_columns),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FlowSchema":
        return cls(
            feature_names=tuple(d["feature_names"]),
            label_column=d["label_column"],
            benign_label_value=d.get("benign_label_value", "benign"),
            flag_columns=tuple(d.get("flag_columns", ())),
            drop_columns=tuple(d.get("drop_columns", ())),
        )

    @classmethod
    def load(cls, path: str | Path) -> "FlowSchema":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class FlowTable:
    """Numeric feature matrix with labels and provenance.

    ``features`` and ``labels`` are made read-only on construction.
    ``passthrough`` carries non-numeric columns (addresses, ports) until they are dropped.
    """

    features: np.ndarray
    labels: np.ndarray
    column_names: tuple[str, ...]
    source: str = ""
    provenance: dict = field(default_factory=dict)
    passthrough: dict = field(default_factory=dict)

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64, copy=True)
        if feats.ndim != 2:
            feats = feats.reshape(len(feats), -1)
        labels = np.array(self.labels, dtype=np.int8, copy=True).reshape(-1)
        if labels.shape[0] != feats.shape[0]:
            raise DataError(f"{labels.shape[0]} labels for {feats.shape[0]} rows")
        if feats.shape[1] != len(self.column_names):
            raise DataError(f"{len(self.column_names)} column names for {feats.shape[1]} columns")
        if not np.isin(labels, (BENIGN, DDOS)).all():
            raise DataError("labels must be 0 (benign) or 1 (ddos)")
        feats.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "column_names", tuple(self.column_names))

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_benign(self) -> int:
        return int(np.sum(self.labels == BENIGN))

    @property
    def n_ddos(self) -> int:
        return int(np.sum(self.labels == DDOS))

    def column(self, name: str) -> np.ndarray:
        return self.features[:, self.column_names.index(name)]

    def take(self, rows, **provenance) -> "FlowTable":
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        passthrough = {k: [v[i] for i in rows] for k, v in self.passthrough.items()}
        prov = dict(self.provenance)
        prov.update(provenance)
        return FlowTable(self.features[rows], self.labels[rows], self.column_names,
                         self.source, prov, passthrough)

    def with_features(self, features: np.ndarray, column_names: Sequence[str] | None = None,
                      **provenance) -> "FlowTable":
        prov = dict(self.provenance)
        prov.update(provenance)
        return FlowTable(features, self.labels,
                         self.column_names if column_names is None else tuple(column_names),
                         self.source, prov, dict(self.passthrough))

    def fingerprint(self) -> str:
        """SHA-256 over column names, labels and little-endian float64 values."""
        h = hashlib.sha256()
        h.update(json.dumps(list(self.column_names)).encode())
        h.update(np.ascontiguousarray(self.labels, dtype="<i1").tobytes())
        h.update(np.ascontiguousarray(self.features, dtype="<f8").tobytes())
        return h.hexdigest()


def concat_tables(tables: Sequence[FlowTable], source: str = "") -> FlowTable:
    names = tables[0].column_names
    for t in tables[1:]:
        if t.column_names != names:
            raise SchemaError(f"column mismatch between {tables[0].source!r} and {t.source!r}")
    return FlowTable(np.vstack([t.features for t in tables]),
                     np.concatenate([t.labels for t in tables]), names,
                     source or "+".join(t.source for t in tables),
                     {"parts": [t.source for t in tables]})


# ---------------------------------------------------------------- loading

def _label_of(raw: str, benign_value) -> int:
    raw = raw.strip()
    if isinstance(benign_value, str):
        return BENIGN if raw == benign_value else DDOS
    try:
        return BENIGN if float(raw) == float(benign_value) else DDOS
    except ValueError:
        return DDOS


def load_csv(path: str | Path, schema: FlowSchema) -> FlowTable:
    """Read a raw dataset CSV.

    Feature columns are parsed as float; rows with an unparseable feature value
    are dropped and counted under ``provenance["unparseable_rows"]``. Drop columns
    are kept as text in ``passthrough`` until :func:`drop_bias_features` runs.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such dataset file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        missing = sorted(schema.csv_columns - set(header))
        extra = sorted(set(header) - schema.csv_columns)
        if missing or extra:
            raise SchemaError(f"header mismatch in {path}: missing={missing} extra={extra}")
        feat_idx = [header.index(c) for c in schema.feature_names]
        drop_idx = [header.index(c) for c in schema.drop_columns]
        label_idx = header.index(schema.label_column)
        rows, labels, passthrough = [], [], {c: [] for c in schema.drop_columns}
        bad = 0
        for record in reader:
            if not record:
                continue
            try:
                values = [float(record[i]) for i in feat_idx]
            except (ValueError, IndexError):
                bad += 1
                continue
            rows.append(values)
            labels.append(_label_of(record[label_idx], schema.benign_label_value))
            for c, i in zip(schema.drop_columns, drop_idx):
                passthrough[c].append(record[i])
    if not rows:
        raise DataError(f"no parseable rows in {path}")
    return FlowTable(np.array(rows, dtype=np.float64), np.array(labels), schema.feature_names,
                     source=path.stem,
                     provenance={"file": str(path), "rows_read": len(rows) + bad,
                                 "unparseable_rows": bad},
                     passthrough=passthrough)


# ---------------------------------------------------------------- preprocessing

def expand_flags(table: FlowTable, schema: FlowSchema) -> FlowTable:
    """Replace every flag column by eight ``<col>_bit<k>`` columns.

    Values that are not integers in [0, 255] yield NaN bits so :func:`clean` drops the row.
    """
    cols, names = [], []
    invalid = np.zeros(len(table), dtype=bool)
    for j, name in enumerate(table.column_names):
        x = table.features[:, j]
        if name not in schema.flag_columns:
            cols.append(x[:, None])
            names.append(name)
            continue
        ok = np.isfinite(x) & (x >= 0) & (x < 2 ** FLAG_BITS) & (x == np.round(x))
        invalid |= ~ok
        ints = np.where(ok, x, 0).astype(np.int64)
        bits = ((ints[:, None] >> np.arange(FLAG_BITS)) & 1).astype(np.float64)
        bits[~ok] = np.nan
        cols.append(bits)
        names.extend(f"{name}_bit{k}" for k in range(FLAG_BITS))
    return table.with_features(np.hstack(cols), names, invalid_flag_rows=int(invalid.sum()))


def processed_columns(schema: FlowSchema) -> tuple[str, ...]:
    """Feature names after flag expansion and bias-column removal."""
    names = []
    for c in schema.feature_names:
        if c in schema.drop_columns:
            continue
        if c in schema.flag_columns:
            names.extend(f"{c}_bit{k}" for k in range(FLAG_BITS))
        else:
            names.append(c)
    return tuple(names)


def drop_bias_features(table: FlowTable, schema: FlowSchema) -> FlowTable:
    """Remove address/port/identifier columns."""
    absent = [c for c in schema.drop_columns
              if c not in table.column_names and c not in table.passthrough]
    if absent:
        raise SchemaError(f"drop columns not present: {absent}")
    keep = [j for j, c in enumerate(table.column_names) if c not in schema.drop_columns]
    passthrough = {k: v for k, v in table.passthrough.items() if k not in schema.drop_columns}
    out = table.with_features(table.features[:, keep], [table.column_names[j] for j in keep])
    object.__setattr__(out, "passthrough", passthrough)
    return out


def iqr_bounds(x: np.ndarray, k: float = DEFAULT_IQR_K) -> tuple[float, float] | None:
    """Tukey fences, or ``None`` when the spread is zero."""
    q1, q3 = np.percentile(x, [25, 75])
    iqr = q3 - q1
    if iqr <= 0:
        return None
    return q1 - k * iqr, q3 + k * iqr


def _outlier_mask(feats: np.ndarray, benign: np.ndarray, k: float) -> np.ndarray:
    out = np.zeros(feats.shape[0], dtype=bool)
    for j in range(feats.shape[1]):
        bounds = iqr_bounds(feats[benign, j], k)
        if bounds is not None:
            out |= (feats[:, j] < bounds[0]) | (feats[:, j] > bounds[1])
    return out & benign


def clean(table: FlowTable, k: float = DEFAULT_IQR_K) -> FlowTable:
    """Drop rows with NaN/inf, then benign rows outside the IQR fences of any feature.

    Fences come from benign rows and are re-fitted until no further row falls
    outside them, so the result is a fixed point. DDoS rows are only checked for
    missing values. Zero-IQR features are skipped.
    """
    finite = np.all(np.isfinite(table.features), axis=1)
    rows = np.flatnonzero(finite)
    n_outliers = 0
    while rows.size:
        benign = table.labels[rows] == BENIGN
        if not benign.any():
            break
        out = _outlier_mask(table.features[rows], benign, k)
        if not out.any():
            break
        n_outliers += int(out.sum())
        rows = rows[~out]
    if rows.size == 0:
        raise DataError(f"cleaning removed every row of {table.source!r}")
    prev_null = table.provenance.get("null_rows_removed", 0)
    prev_out = table.provenance.get("outlier_rows_removed", 0)
    return table.take(rows,
                      null_rows_removed=prev_null + int((~finite).sum()),
                      outlier_rows_removed=prev_out + n_outliers,
                      iqr_k=k)


def preprocess(table: FlowTable, schema: FlowSchema, k: float = DEFAULT_IQR_K) -> FlowTable:
    return clean(drop_bias_features(expand_flags(table, schema), schema), k)


@dataclass(frozen=True)
class SplitSet:
    train: FlowTable
    test: FlowTable
    validation: FlowTable
    split_seed: int


def split(table: FlowTable, seed: int) -> SplitSet:
    """Benign rows go 80/18/2 to train/test/validation; every DDoS row goes to test."""
    benign = np.flatnonzero(table.labels == BENIGN)
    ddos = np.flatnonzero(table.labels == DDOS)
    n = benign.size
    if n < MIN_BENIGN_FOR_SPLIT:
        raise DataError(f"need at least {MIN_BENIGN_FOR_SPLIT} benign rows, have {n}")
    perm = benign[np.random.default_rng(seed).permutation(n)]
    n_train = int(round(n * SPLIT_FRACTIONS[0]))
    n_val = int(round(n * SPLIT_FRACTIONS[2]))
    train_rows = np.sort(perm[:n_train])
    val_rows = np.sort(perm[n_train:n_train + n_val])
    test_rows = np.sort(np.concatenate([perm[n_train + n_val:], ddos]))
    meta = {"split_seed": seed}
    return SplitSet(
        train=table.take(train_rows, split="train", **meta),
        test=table.take(test_rows, split="test", **meta),
        validation=table.take(val_rows, split="validation", **meta),
        split_seed=seed,
    )


# ---------------------------------------------------------------- scaling

@dataclass(frozen=True)
class ScalerParams:
    minimum: np.ndarray
    maximum: np.ndarray
    column_names: tuple[str, ...]
    fitted_on: str = ""

    def __post_init__(self):
        if np.any(self.minimum > self.maximum):
            raise ValueError("scaler min exceeds max")

    def to_dict(self) -> dict:
        return {"min": self.minimum.tolist(), "max": self.maximum.tolist(),
                "column_names": list(self.column_names), "fitted_on": self.fitted_on}

    @classmethod
    def from_dict(cls, d: dict) -> "ScalerParams":
        return cls(np.asarray(d["min"], dtype=np.float64), np.asarray(d["max"], dtype=np.float64),
                   tuple(d["column_names"]), d.get("fitted_on", ""))


def fit_scaler(train: FlowTable) -> ScalerParams:
    if train.n_ddos:
        raise DataError("scaler must be fitted on benign training rows only")
    return ScalerParams(train.features.min(axis=0).copy(), train.features.max(axis=0).copy(),
                        train.column_names, train.fingerprint())


def _check_columns(table: FlowTable, params: ScalerParams) -> None:
    if table.column_names != params.column_names:
        raise SchemaError("table columns do not match scaler columns")


def scale_array(x: np.ndarray, params: ScalerParams) -> np.ndarray:
    span = params.maximum - params.minimum
    degenerate = span == 0
    out = (x - params.minimum) / np.where(degenerate, 1.0, span)
    out[:, degenerate] = 0.0
    return out


def unscale_array(x: np.ndarray, params: ScalerParams) -> np.ndarray:
    return x * (params.maximum - params.minimum) + params.minimum


def apply_scaler(table: FlowTable, params: ScalerParams) -> FlowTable:
    """Min-max to [0, 1] by the training range, without clipping."""
    _check_columns(table, params)
    return table.with_features(scale_array(table.features, params), scaled=True)


def invert_scaler(table: FlowTable, params: ScalerParams) -> FlowTable:
    _check_columns(table, params)
    return table.with_features(unscale_array(table.features, params), scaled=False)


# ---------------------------------------------------------------- persistence

def write_table(table: FlowTable, path: str | Path, extra: dict | None = None) -> dict:
    """Write ``path`` as CSV (``label`` column last) and ``path.json`` provenance."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(table.column_names) + ["label"])
        for row, lab in zip(table.features, table.labels):
            writer.writerow([repr(float(v)) for v in row] + [LABEL_NAMES[int(lab)]])
    prov = {
        "source": table.source,
        "rows": len(table),
        "benign_rows": table.n_benign,
        "ddos_rows": table.n_ddos,
        "columns": list(table.column_names),
        "fingerprint": table.fingerprint(),
        "provenance": _jsonable(table.provenance),
    }
    prov.update(extra or {})
    Path(str(path) + ".json").write_text(json.dumps(prov, indent=2, sort_keys=True))
    return prov


def read_table(path: str | Path) -> FlowTable:
    """Read a table written by :func:`write_table`; verifies the stored fingerprint."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such table: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = [r for r in reader if r]
    names = header[:-1]
    feats = np.array([[float(v) for v in r[:-1]] for r in data], dtype=np.float64).reshape(
        len(data), len(names))
    labels = np.array([BENIGN if r[-1] == "benign" else DDOS for r in data])
    sidecar = Path(str(path) + ".json")
    prov = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    table = FlowTable(feats, labels, names, prov.get("source", path.stem),
                      prov.get("provenance", {}))
    if prov and prov.get("fingerprint") != table.fingerprint():
        raise DataError(f"{path} does not match the fingerprint in its sidecar")
    return table


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def labeled_holdout(table: FlowTable, seed: int, test_fraction: float = 0.3
                    ) -> tuple[FlowTable, FlowTable]:
    """Stratified (local, test) split of a labeled table for an external party."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    test_rows = []
    for lab in (BENIGN, DDOS):
        idx = np.flatnonzero(table.labels == lab)
        idx = idx[rng.permutation(idx.size)]
        test_rows.append(idx[:int(round(idx.size * test_fraction))])
    test = np.sort(np.concatenate(test_rows))
    local = np.setdiff1d(np.arange(len(table)), test)
    return (table.take(local, split="local", split_seed=seed),
            table.take(test, split="test", split_seed=seed))
