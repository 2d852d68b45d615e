"""Tabular schema, dataset container, CSV ingestion, and split machinery.

Datasets are columnar: numerical features live in one float matrix plus an
explicit missing mask (never NaN-as-data), categorical features as integer
codes with -1 marking missing.  Row ids survive row and feature subsetting so
downstream caches keyed by row id stay valid.

File formats:

* data CSV: UTF-8, header row, comma separated, empty field means MISSING,
  dates are ISO ``YYYY-MM-DD``.
* schema JSON: ``{"features": [{"name", "kind", "vocab"?}, ...],
  "label": {"name", "kind"}?, "timestamp": <column name>?}``.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IngestionError, ProtocolError, UndefinedMetricError

NUMERICAL = "numerical"
CATEGORICAL = "categorical"
LABEL_KINDS = ("binary", "n-way", "regression")


@dataclass(frozen=True)
class Feature:
    name: str
    kind: str
    vocab: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in (NUMERICAL, CATEGORICAL):
            raise ProtocolError(f"feature {self.name!r} has unknown kind {self.kind!r}")
        if self.kind == CATEGORICAL:
            if not self.vocab:
                raise ProtocolError(f"categorical feature {self.name!r} needs a vocabulary")
            if len(set(self.vocab)) != len(self.vocab):
                raise ProtocolError(f"feature {self.name!r} has duplicate vocabulary entries")
        elif self.vocab:
            raise ProtocolError(f"numerical feature {self.name!r} must not declare a vocabulary")


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[Feature, ...]
    label_name: str | None = None
    label_kind: str | None = None
    timestamp_name: str | None = None

    def __post_init__(self):
        if not self.features:
            raise ProtocolError("schema must declare at least one feature")
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ProtocolError("duplicate feature names in schema")
        if (self.label_name is None) != (self.label_kind is None):
            raise ProtocolError("label name and kind must be declared together")
        if self.label_kind is not None and self.label_kind not in LABEL_KINDS:
            raise ProtocolError(f"unknown label kind {self.label_kind!r}")
        reserved = {n for n in (self.label_name, self.timestamp_name) if n is not None}
        if reserved & set(names):
            raise ProtocolError("label/timestamp column names collide with feature names")

    @property
    def feature_names(self) -> list[str]:
        return [f.name for f in self.features]

    @property
    def d(self) -> int:
        return len(self.features)

    def feature(self, name: str) -> Feature:
        for f in self.features:
            if f.name == name:
                return f
        raise ProtocolError(f"schema has no feature named {name!r}")

    def to_json(self) -> dict:
        doc: dict = {"features": []}
        for f in self.features:
            entry: dict = {"name": f.name, "kind": f.kind}
            if f.kind == CATEGORICAL:
                entry["vocab"] = list(f.vocab)
            doc["features"].append(entry)
        if self.label_name is not None:
            doc["label"] = {"name": self.label_name, "kind": self.label_kind}
        if self.timestamp_name is not None:
            doc["timestamp"] = self.timestamp_name
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "FeatureSchema":
        if not isinstance(doc, dict) or "features" not in doc:
            raise IngestionError("schema document must be an object with a 'features' list")
        unknown = set(doc) - {"features", "label", "timestamp"}
        if unknown:
            raise IngestionError(f"schema document has unknown keys: {sorted(unknown)}")
        feats = []
        for i, entry in enumerate(doc["features"]):
            extra = set(entry) - {"name", "kind", "vocab"}
            if extra:
                raise IngestionError(f"feature #{i} has unknown keys: {sorted(extra)}")
            feats.append(
                Feature(entry["name"], entry["kind"], tuple(entry.get("vocab", ())))
            )
        label = doc.get("label")
        label_name = label_kind = None
        if label is not None:
            if set(label) != {"name", "kind"}:
                raise IngestionError("schema label must have exactly 'name' and 'kind'")
            label_name, label_kind = label["name"], label["kind"]
        return cls(tuple(feats), label_name, label_kind, doc.get("timestamp"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "FeatureSchema":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise IngestionError(f"schema file {path} is not valid JSON: {exc}") from exc
        return cls.from_json(doc)


@dataclass
class Dataset:
    """Columnar rows under a schema; missing cells are explicit."""

    schema: FeatureSchema
    num_values: np.ndarray  # (n, d_num) float64; entries under the mask are 0.0
    num_missing: np.ndarray  # (n, d_num) bool
    cat_codes: np.ndarray  # (n, d_cat) int64; -1 where missing
    labels: np.ndarray | None = None
    timestamps: np.ndarray | None = None  # datetime64[D]
    row_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        if self.row_ids.size == 0 and self.n_rows:
            self.row_ids = np.arange(self.n_rows, dtype=np.int64)

    @property
    def n_rows(self) -> int:
        return max(self.num_values.shape[0], self.cat_codes.shape[0])

    @property
    def d(self) -> int:
        return self.schema.d

    # positions of numerical / categorical features within schema order
    def _kind_index(self) -> tuple[list[int], list[int]]:
        num, cat = [], []
        for k, f in enumerate(self.schema.features):
            (num if f.kind == NUMERICAL else cat).append(k)
        return num, cat

    def missing_matrix(self) -> np.ndarray:
        """(n, d) bool in schema feature order."""
        n = self.n_rows
        out = np.zeros((n, self.d), dtype=bool)
        num_pos, cat_pos = self._kind_index()
        if num_pos:
            out[:, num_pos] = self.num_missing
        if cat_pos:
            out[:, cat_pos] = self.cat_codes < 0
        return out

    def select_rows(self, idx: np.ndarray) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            self.schema,
            self.num_values[idx],
            self.num_missing[idx],
            self.cat_codes[idx],
            None if self.labels is None else self.labels[idx],
            None if self.timestamps is None else self.timestamps[idx],
            self.row_ids[idx],
        )

    def select_features(self, names: list[str]) -> "Dataset":
        """Project onto a feature subset; row ids and labels are preserved."""
        for n in names:
            self.schema.feature(n)
        feats = tuple(f for f in self.schema.features if f.name in set(names))
        # keep schema order for retained features
        sub_schema = FeatureSchema(
            feats, self.schema.label_name, self.schema.label_kind, self.schema.timestamp_name
        )
        num_pos, cat_pos = self._kind_index()
        num_names = [self.schema.features[k].name for k in num_pos]
        cat_names = [self.schema.features[k].name for k in cat_pos]
        keep_num = [i for i, n in enumerate(num_names) if n in set(names)]
        keep_cat = [i for i, n in enumerate(cat_names) if n in set(names)]
        return Dataset(
            sub_schema,
            self.num_values[:, keep_num],
            self.num_missing[:, keep_num],
            self.cat_codes[:, keep_cat],
            self.labels,
            self.timestamps,
            self.row_ids,
        )

    def cell(self, row: int, feature: str):
        """Return the raw value of one cell, or None when missing (for tests)."""
        num_pos, cat_pos = self._kind_index()
        for j, k in enumerate(num_pos):
            if self.schema.features[k].name == feature:
                return None if self.num_missing[row, j] else float(self.num_values[row, j])
        for j, k in enumerate(cat_pos):
            if self.schema.features[k].name == feature:
                code = self.cat_codes[row, j]
                return None if code < 0 else self.schema.features[k].vocab[code]
        raise ProtocolError(f"no feature named {feature!r}")


# ---------------------------------------------------------------------------
# CSV ingestion / serialization
# ---------------------------------------------------------------------------

def load_csv(path: str | Path, schema: FeatureSchema) -> Dataset:
    """Parse a delimited file into a Dataset, validating against ``schema``.

    Every schema feature must appear in the header (any column order).  The
    label and timestamp columns are optional; unknown columns are rejected.
    """
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: file is empty, expected a header row")
        rows = list(reader)

    if len(set(header)) != len(header):
        raise IngestionError(f"{path}: duplicate column names in header")
    allowed = set(schema.feature_names)
    if schema.label_name:
        allowed.add(schema.label_name)
    if schema.timestamp_name:
        allowed.add(schema.timestamp_name)
    unknown = [c for c in header if c not in allowed]
    if unknown:
        raise IngestionError(f"{path}: unknown columns {unknown}")
    missing_cols = [n for n in schema.feature_names if n not in header]
    if missing_cols:
        raise IngestionError(f"{path}: feature columns missing from header: {missing_cols}")

    col_of = {name: i for i, name in enumerate(header)}
    has_label = schema.label_name in col_of if schema.label_name else False
    has_ts = schema.timestamp_name in col_of if schema.timestamp_name else False

    n = len(rows)
    num_feats = [f for f in schema.features if f.kind == NUMERICAL]
    cat_feats = [f for f in schema.features if f.kind == CATEGORICAL]
    num_values = np.zeros((n, len(num_feats)), dtype=np.float64)
    num_missing = np.zeros((n, len(num_feats)), dtype=bool)
    cat_codes = np.full((n, len(cat_feats)), -1, dtype=np.int64)
    labels = None
    if has_label:
        labels = np.zeros(n, dtype=np.float64 if schema.label_kind == "regression" else np.int64)
    timestamps = np.full(n, np.datetime64("NaT"), dtype="datetime64[D]") if has_ts else None
    code_of = {f.name: {v: c for c, v in enumerate(f.vocab)} for f in cat_feats}

    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise IngestionError(f"{path}: row {i + 2} has {len(row)} fields, expected {len(header)}")
        for j, f in enumerate(num_feats):
            text = row[col_of[f.name]]
            if text == "":
                num_missing[i, j] = True
                continue
            try:
                num_values[i, j] = float(text)
            except ValueError:
                raise IngestionError(
                    f"{path}: row {i + 2}, column {f.name!r}: {text!r} is not numeric"
                )
        for j, f in enumerate(cat_feats):
            text = row[col_of[f.name]]
            if text == "":
                continue
            code = code_of[f.name].get(text)
            if code is None:
                raise IngestionError(
                    f"{path}: row {i + 2}, column {f.name!r}: {text!r} not in vocabulary"
                )
            cat_codes[i, j] = code
        if has_label:
            text = row[col_of[schema.label_name]]
            if text == "":
                raise IngestionError(f"{path}: row {i + 2}: label value is missing")
            try:
                if schema.label_kind == "regression":
                    labels[i] = float(text)
                else:
                    value = int(text)
                    if schema.label_kind == "binary" and value not in (0, 1):
                        raise ValueError
                    if value < 0:
                        raise ValueError
                    labels[i] = value
            except ValueError:
                raise IngestionError(
                    f"{path}: row {i + 2}: label {text!r} invalid for kind {schema.label_kind!r}"
                )
        if has_ts:
            text = row[col_of[schema.timestamp_name]]
            if text != "":
                try:
                    ts = np.datetime64(_parse_iso_date(text), "D")
                except ValueError:
                    raise IngestionError(
                        f"{path}: row {i + 2}: timestamp {text!r} is not YYYY-MM-DD"
                    )
                timestamps[i] = ts

    return Dataset(schema, num_values, num_missing, cat_codes, labels, timestamps)


def _parse_iso_date(text: str) -> str:
    parts = text.split("-")
    if len(parts) != 3 or [len(p) for p in parts] != [4, 2, 2]:
        raise ValueError(text)
    int(parts[0]), int(parts[1]), int(parts[2])
    return text


def write_csv(ds: Dataset, path: str | Path) -> None:
    """Serialize a Dataset; numeric text round-trips exactly via repr."""
    path = Path(path)
    header = list(ds.schema.feature_names)
    if ds.labels is not None and ds.schema.label_name:
        header.append(ds.schema.label_name)
    if ds.timestamps is not None and ds.schema.timestamp_name:
        header.append(ds.schema.timestamp_name)
    num_pos, cat_pos = ds._kind_index()
    num_at = {k: j for j, k in enumerate(num_pos)}
    cat_at = {k: j for j, k in enumerate(cat_pos)}

    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(ds.n_rows):
            row = []
            for k, f in enumerate(ds.schema.features):
                if f.kind == NUMERICAL:
                    j = num_at[k]
                    row.append("" if ds.num_missing[i, j] else repr(float(ds.num_values[i, j])))
                else:
                    code = ds.cat_codes[i, cat_at[k]]
                    row.append("" if code < 0 else f.vocab[code])
            if ds.labels is not None and ds.schema.label_name:
                v = ds.labels[i]
                row.append(repr(float(v)) if ds.schema.label_kind == "regression" else str(int(v)))
            if ds.timestamps is not None and ds.schema.timestamp_name:
                row.append("" if np.isnat(ds.timestamps[i]) else str(ds.timestamps[i]))
            writer.writerow(row)


# ---------------------------------------------------------------------------
# missingness statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MissingnessStats:
    per_feature: dict[str, float]  # eta_k, schema order
    per_row: np.ndarray  # eta(x) for each row
    eta_max: float  # max per-row ratio over the reference split


def missingness_stats(ds: Dataset) -> MissingnessStats:
    mm = ds.missing_matrix()
    per_feature = {
        f.name: float(mm[:, k].mean()) if ds.n_rows else 0.0
        for k, f in enumerate(ds.schema.features)
    }
    per_row = mm.mean(axis=1) if ds.n_rows else np.zeros(0)
    eta_max = float(per_row.max()) if ds.n_rows else 0.0
    return MissingnessStats(per_feature, per_row, eta_max)


# ---------------------------------------------------------------------------
# information value
# ---------------------------------------------------------------------------

def _bin_assignments(ds: Dataset, feature: str, n_bins: int) -> np.ndarray:
    """Bin ids per row: -1 for MISSING, else category code or equal-frequency bin.

    Numerical ties are resolved by (value, row id) order so that any strictly
    monotone transform of the values yields identical assignments.
    """
    f = ds.schema.feature(feature)
    num_pos, cat_pos = ds._kind_index()
    if f.kind == CATEGORICAL:
        j = [ds.schema.features[k].name for k in cat_pos].index(feature)
        return ds.cat_codes[:, j].copy()
    j = [ds.schema.features[k].name for k in num_pos].index(feature)
    values = ds.num_values[:, j]
    observed = ~ds.num_missing[:, j]
    bins = np.full(ds.n_rows, -1, dtype=np.int64)
    obs_idx = np.nonzero(observed)[0]
    n_obs = obs_idx.size
    if n_obs:
        # position of each observed row in (value, row id) sorted order
        positions = np.empty(n_obs, dtype=np.int64)
        positions[np.argsort(values[obs_idx], kind="stable")] = np.arange(n_obs)
        bins[obs_idx] = positions * n_bins // n_obs
    return bins


def information_value(ds: Dataset, feature: str, n_bins: int = 10) -> float:
    """Binned IV of one feature against a binary label.

    Equal-frequency bins for numericals (MISSING is its own bin), categories
    as bins, additive smoothing of 0.5 per bin count; the result is clamped
    at zero.
    """
    if ds.labels is None or ds.schema.label_kind != "binary":
        raise ProtocolError("information_value requires a binary-labeled dataset")
    y = ds.labels.astype(np.int64)
    if y.min() == y.max():
        raise UndefinedMetricError("information_value is undefined for single-class labels")
    bins = _bin_assignments(ds, feature, n_bins)
    uniq = np.unique(bins)
    goods = np.array([(y[bins == b] == 0).sum() for b in uniq], dtype=np.float64) + 0.5
    bads = np.array([(y[bins == b] == 1).sum() for b in uniq], dtype=np.float64) + 0.5
    pg = goods / goods.sum()
    pb = bads / bads.sum()
    value = float(((pg - pb) * np.log(pg / pb)).sum())
    return max(0.0, value)


@dataclass(frozen=True)
class FeatureRanking:
    """Features ordered by descending IV; ties fall back to ascending name."""

    ordered: tuple[tuple[str, float], ...]

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.ordered]

    def score(self, name: str) -> float:
        for n, s in self.ordered:
            if n == name:
                return s
        raise ProtocolError(f"no feature named {name!r} in ranking")


def rank_features(ds: Dataset, n_bins: int = 10) -> FeatureRanking:
    scored = [(f.name, information_value(ds, f.name, n_bins)) for f in ds.schema.features]
    scored.sort(key=lambda item: (-item[1], item[0]))
    return FeatureRanking(tuple(scored))


def feature_groups(ranking: FeatureRanking, group_size: int, m: int) -> list[list[str]]:
    """Nested top-k prefixes: group i holds the top ``min(i*group_size, d)``."""
    if m < 1:
        raise ProtocolError(f"number of groups must be >= 1, got {m}")
    if group_size < 1:
        raise ProtocolError(f"group size must be >= 1, got {group_size}")
    names = ranking.names
    return [names[: min(i * group_size, len(names))] for i in range(1, m + 1)]


# ---------------------------------------------------------------------------
# temporal splitting
# ---------------------------------------------------------------------------

@dataclass
class TemporalSplit:
    train: Dataset
    val: Dataset
    test: Dataset
    monthly: dict[str, Dataset]  # YYYY-MM -> test rows of that calendar month


def temporal_split(ds: Dataset, boundaries) -> TemporalSplit:
    """Split by two date boundaries into half-open segments.

    ``train = [-inf, b0)``, ``val = [b0, b1)``, ``test = [b1, +inf)``; the test
    segment is additionally bucketed by calendar month.
    """
    if len(boundaries) != 2:
        raise ProtocolError("temporal_split expects exactly two boundary dates")
    try:
        b = [np.datetime64(_parse_iso_date(str(x)), "D") for x in boundaries]
    except ValueError:
        raise ProtocolError(f"split boundaries must be YYYY-MM-DD dates, got {boundaries}")
    if not b[0] < b[1]:
        raise ProtocolError("split boundaries must be strictly increasing")
    if ds.timestamps is None:
        raise IngestionError("temporal_split requires a timestamp column")
    if np.isnat(ds.timestamps).any():
        bad = int(np.nonzero(np.isnat(ds.timestamps))[0][0])
        raise IngestionError(f"row id {ds.row_ids[bad]} has no timestamp")

    ts = ds.timestamps
    train = ds.select_rows(np.nonzero(ts < b[0])[0])
    val = ds.select_rows(np.nonzero((ts >= b[0]) & (ts < b[1]))[0])
    test = ds.select_rows(np.nonzero(ts >= b[1])[0])
    for name, part in (("val", val), ("test", test)):
        if part.n_rows == 0:
            warnings.warn(f"temporal_split produced an empty {name} segment", RuntimeWarning)

    monthly: dict[str, Dataset] = {}
    if test.n_rows:
        months = test.timestamps.astype("datetime64[M]")
        for mo in np.unique(months):
            monthly[str(mo)] = test.select_rows(np.nonzero(months == mo)[0])
    return TemporalSplit(train, val, test, monthly)
