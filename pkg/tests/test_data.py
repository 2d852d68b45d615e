"""Tests for schema handling, CSV ingestion, missingness stats, IV, splits."""

from __future__ import annotations

import math

import numpy as np
import pytest

from masktab import data as D
from masktab.errors import IngestionError, ProtocolError, UndefinedMetricError


def small_schema():
    return D.FeatureSchema(
        (
            D.Feature("age", "numerical"),
            D.Feature("city", "categorical", ("ber", "muc", "ham")),
            D.Feature("income", "numerical"),
        ),
        label_name="y",
        label_kind="binary",
        timestamp_name="date",
    )


CSV_TEXT = """age,city,income,y,date
34.0,ber,51000.0,0,2024-01-15
,muc,42000.0,1,2024-02-03
51.5,,,0,2024-07-21
29.0,ham,38500.5,1,2024-11-02
"""


def write(tmp_path, text, name="data.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


class TestSchema:
    def test_json_round_trip(self):
        s = small_schema()
        assert D.FeatureSchema.from_json(s.to_json()) == s

    def test_duplicate_feature_names_rejected(self):
        with pytest.raises(ProtocolError):
            D.FeatureSchema((D.Feature("a", "numerical"), D.Feature("a", "numerical")))

    def test_categorical_requires_vocab(self):
        with pytest.raises(ProtocolError):
            D.Feature("c", "categorical")

    def test_unknown_label_kind_rejected(self):
        with pytest.raises(ProtocolError):
            D.FeatureSchema((D.Feature("a", "numerical"),), "y", "ordinal")

    def test_unknown_schema_keys_rejected(self):
        doc = small_schema().to_json()
        doc["extra"] = 1
        with pytest.raises(IngestionError):
            D.FeatureSchema.from_json(doc)


class TestLoadCsv:
    def test_parses_cells_and_missing(self, tmp_path):
        csv_text = CSV_TEXT
        ds = D.load_csv(write(tmp_path, csv_text), small_schema())
        assert ds.n_rows == 4
        assert ds.cell(0, "age") == 34.0
        assert ds.cell(1, "age") is None
        assert ds.cell(1, "city") == "muc"
        assert ds.cell(2, "city") is None
        assert ds.cell(2, "income") is None
        assert list(ds.labels) == [0, 1, 0, 1]
        assert str(ds.timestamps[3]) == "2024-11-02"
        assert list(ds.row_ids) == [0, 1, 2, 3]

    def test_column_order_free(self, tmp_path):
        text = "y,income,date,city,age\n1,10.0,2024-01-01,ber,1.0\n"
        ds = D.load_csv(write(tmp_path, text), small_schema())
        assert ds.cell(0, "age") == 1.0 and ds.labels[0] == 1

    def test_unknown_column_rejected(self, tmp_path):
        text = "age,city,income,y,date,bogus\n1.0,ber,2.0,0,2024-01-01,x\n"
        with pytest.raises(IngestionError, match="bogus"):
            D.load_csv(write(tmp_path, text), small_schema())

    def test_missing_feature_column_rejected(self, tmp_path):
        text = "age,city,y,date\n1.0,ber,0,2024-01-01\n"
        with pytest.raises(IngestionError, match="income"):
            D.load_csv(write(tmp_path, text), small_schema())

    def test_bad_numeric_names_row_and_column(self, tmp_path):
        text = "age,city,income,y,date\nabc,ber,2.0,0,2024-01-01\n"
        with pytest.raises(IngestionError, match=r"row 2.*age"):
            D.load_csv(write(tmp_path, text), small_schema())

    def test_out_of_vocabulary_category(self, tmp_path):
        text = "age,city,income,y,date\n1.0,paris,2.0,0,2024-01-01\n"
        with pytest.raises(IngestionError, match="paris"):
            D.load_csv(write(tmp_path, text), small_schema())

    def test_bad_binary_label(self, tmp_path):
        text = "age,city,income,y,date\n1.0,ber,2.0,2,2024-01-01\n"
        with pytest.raises(IngestionError, match="label"):
            D.load_csv(write(tmp_path, text), small_schema())

    def test_bad_date(self, tmp_path):
        text = "age,city,income,y,date\n1.0,ber,2.0,0,01/02/2024\n"
        with pytest.raises(IngestionError, match="timestamp"):
            D.load_csv(write(tmp_path, text), small_schema())

    def test_ragged_row_rejected(self, tmp_path):
        text = "age,city,income,y,date\n1.0,ber,2.0,0\n"
        with pytest.raises(IngestionError, match="row 2"):
            D.load_csv(write(tmp_path, text), small_schema())

    def test_label_column_optional(self, tmp_path):
        text = "age,city,income,date\n1.0,ber,2.0,2024-01-01\n"
        ds = D.load_csv(write(tmp_path, text), small_schema())
        assert ds.labels is None


class TestRoundTrip:
    def test_write_then_load_preserves_everything(self, tmp_path):
        csv_text = CSV_TEXT
        ds = D.load_csv(write(tmp_path, csv_text), small_schema())
        out = tmp_path / "rt.csv"
        D.write_csv(ds, out)
        ds2 = D.load_csv(out, small_schema())
        assert ds2.num_values.tobytes() == ds.num_values.tobytes()
        assert ds2.num_missing.tobytes() == ds.num_missing.tobytes()
        assert ds2.cat_codes.tobytes() == ds.cat_codes.tobytes()
        assert ds2.labels.tobytes() == ds.labels.tobytes()
        assert np.array_equal(ds2.timestamps, ds.timestamps)

    def test_rewrite_is_byte_identical(self, tmp_path):
        csv_text = CSV_TEXT
        ds = D.load_csv(write(tmp_path, csv_text), small_schema())
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        D.write_csv(ds, a)
        D.write_csv(D.load_csv(a, small_schema()), b)
        assert a.read_bytes() == b.read_bytes()


class TestMissingness:
    def test_column_rate(self):
        schema = D.FeatureSchema((D.Feature("x", "numerical"),))
        values = np.zeros((10, 1))
        missing = np.zeros((10, 1), dtype=bool)
        missing[:3] = True
        ds = D.Dataset(schema, values, missing, np.zeros((10, 0), dtype=np.int64))
        stats = D.missingness_stats(ds)
        assert stats.per_feature["x"] == pytest.approx(0.3, abs=0)

    def test_row_ratio_and_eta_max(self):
        schema = D.FeatureSchema(tuple(D.Feature(f"x{i}", "numerical") for i in range(8)))
        missing = np.zeros((2, 8), dtype=bool)
        missing[0, :2] = True  # 2 of 8 -> 0.25
        missing[1, :4] = True
        ds = D.Dataset(schema, np.zeros((2, 8)), missing, np.zeros((2, 0), dtype=np.int64))
        stats = D.missingness_stats(ds)
        assert stats.per_row[0] == pytest.approx(0.25, abs=0)
        assert stats.eta_max == pytest.approx(0.5, abs=0)


def binary_dataset(values, missing, labels):
    schema = D.FeatureSchema((D.Feature("x", "numerical"),), "y", "binary")
    v = np.asarray(values, dtype=float)[:, None]
    m = np.asarray(missing, dtype=bool)[:, None]
    return D.Dataset(schema, v, m, np.zeros((len(values), 0), dtype=np.int64), np.asarray(labels))


class TestInformationValue:
    def test_perfect_two_category_predictor_matches_hand_value(self):
        # 600 negatives coded "a", 400 positives coded "b"; smoothing 0.5/bin.
        schema = D.FeatureSchema((D.Feature("f", "categorical", ("a", "b")),), "y", "binary")
        codes = np.array([0] * 600 + [1] * 400, dtype=np.int64)[:, None]
        labels = np.array([0] * 600 + [1] * 400, dtype=np.int64)
        ds = D.Dataset(schema, np.zeros((1000, 0)), np.zeros((1000, 0), dtype=bool), codes, labels)
        # hand computation with explicit smoothed masses
        g = [600 + 0.5, 0 + 0.5]
        b = [0 + 0.5, 400 + 0.5]
        pg = [x / sum(g) for x in g]
        pb = [x / sum(b) for x in b]
        expected = sum((pg[i] - pb[i]) * math.log(pg[i] / pb[i]) for i in range(2))
        assert D.information_value(ds, "f") == pytest.approx(expected, abs=1e-12)

    def test_independent_feature_is_near_zero(self):
        rng = np.random.default_rng(5)
        n = 10_000
        ds = binary_dataset(rng.standard_normal(n), np.zeros(n, bool), rng.integers(0, 2, n))
        assert D.information_value(ds, "x") < 0.02

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(6)
        n = 500
        x = rng.standard_normal(n)
        y = (rng.uniform(size=n) < 1 / (1 + np.exp(-2 * x))).astype(int)
        a = D.information_value(binary_dataset(x, np.zeros(n, bool), y), "x")
        b = D.information_value(binary_dataset(np.exp(x), np.zeros(n, bool), y), "x")
        assert a == pytest.approx(b, abs=1e-12)

    def test_missing_bin_carries_signal(self):
        rng = np.random.default_rng(7)
        n = 4000
        y = rng.integers(0, 2, n)
        x = rng.standard_normal(n)
        missing = (rng.uniform(size=n) < 0.05 + 0.6 * y).astype(bool)  # missing mostly when y=1
        iv = D.information_value(binary_dataset(x, missing, y), "x")
        assert iv > 0.5

    def test_single_class_labels_rejected(self):
        ds = binary_dataset([1.0, 2.0], [False, False], [1, 1])
        with pytest.raises(UndefinedMetricError):
            D.information_value(ds, "x")

    def test_clamped_at_zero(self):
        ds = binary_dataset([1.0, 2.0, 3.0, 4.0], [False] * 4, [0, 1, 0, 1])
        assert D.information_value(ds, "x") >= 0.0


class TestRankingAndGroups:
    def _ranked(self):
        return D.FeatureRanking((("a", 0.9), ("b", 0.5), ("c", 0.5), ("d", 0.1), ("e", 0.05), ("f", 0.01)))

    def test_rank_features_orders_by_iv_then_name(self):
        rng = np.random.default_rng(8)
        n = 3000
        strong = rng.standard_normal(n)
        y = (rng.uniform(size=n) < 1 / (1 + np.exp(-3 * strong))).astype(int)
        weak = rng.standard_normal(n)
        schema = D.FeatureSchema(
            (D.Feature("strong", "numerical"), D.Feature("weak", "numerical")), "y", "binary"
        )
        ds = D.Dataset(
            schema,
            np.column_stack([strong, weak]),
            np.zeros((n, 2), dtype=bool),
            np.zeros((n, 0), dtype=np.int64),
            y,
        )
        ranking = D.rank_features(ds)
        assert ranking.names == ["strong", "weak"]

    def test_groups_are_nested_prefixes(self):
        groups = D.feature_groups(self._ranked(), group_size=2, m=3)
        assert [len(g) for g in groups] == [2, 4, 6]
        assert groups[0] == ["a", "b"]
        assert groups[1][:2] == groups[0]

    def test_groups_truncate_at_d(self):
        groups = D.feature_groups(self._ranked(), group_size=4, m=3)
        assert [len(g) for g in groups] == [4, 6, 6]

    def test_m_below_one_rejected(self):
        with pytest.raises(ProtocolError):
            D.feature_groups(self._ranked(), group_size=2, m=0)


def dated_dataset(dates, labels=None):
    schema = D.FeatureSchema((D.Feature("x", "numerical"),), "y", "binary", "date")
    n = len(dates)
    ts = np.array(dates, dtype="datetime64[D]")
    return D.Dataset(
        schema,
        np.zeros((n, 1)),
        np.zeros((n, 1), dtype=bool),
        np.zeros((n, 0), dtype=np.int64),
        np.zeros(n, dtype=np.int64) if labels is None else np.asarray(labels),
        ts,
    )


class TestTemporalSplit:
    def test_half_open_segments_and_monthly_buckets(self):
        ds = dated_dataset(
            ["2024-01-10", "2024-06-30", "2024-07-01", "2024-09-30", "2024-10-01", "2024-12-25"]
        )
        split = D.temporal_split(ds, ("2024-07-01", "2024-10-01"))
        assert list(split.train.row_ids) == [0, 1]
        assert list(split.val.row_ids) == [2, 3]
        assert list(split.test.row_ids) == [4, 5]
        assert list(split.monthly) == ["2024-10", "2024-12"]
        assert split.monthly["2024-10"].n_rows == 1

    def test_everything_before_first_boundary_warns(self):
        ds = dated_dataset(["2024-01-01", "2024-02-01"])
        with pytest.warns(RuntimeWarning):
            split = D.temporal_split(ds, ("2024-07-01", "2024-10-01"))
        assert split.val.n_rows == 0 and split.test.n_rows == 0

    def test_missing_timestamp_is_ingestion_error(self):
        ds = dated_dataset(["2024-01-01", "2024-02-01"])
        ds.timestamps[1] = np.datetime64("NaT")
        with pytest.raises(IngestionError):
            D.temporal_split(ds, ("2024-07-01", "2024-10-01"))

    def test_non_increasing_boundaries_rejected(self):
        ds = dated_dataset(["2024-01-01"])
        with pytest.raises(ProtocolError):
            D.temporal_split(ds, ("2024-10-01", "2024-07-01"))

    def test_wrong_boundary_count_rejected(self):
        ds = dated_dataset(["2024-01-01"])
        with pytest.raises(ProtocolError):
            D.temporal_split(ds, ("2024-10-01",))


class TestSubsetting:
    def test_select_features_keeps_rows_labels_ids(self, tmp_path):
        ds = D.load_csv(write(tmp_path, CSV_TEXT), small_schema())
        sub = ds.select_features(["city", "income"])
        assert sub.schema.feature_names == ["city", "income"]
        assert list(sub.row_ids) == [0, 1, 2, 3]
        assert list(sub.labels) == [0, 1, 0, 1]
        assert sub.cell(1, "city") == "muc"
        assert sub.cell(2, "income") is None

    def test_select_rows_preserves_original_ids(self, tmp_path):
        ds = D.load_csv(write(tmp_path, CSV_TEXT), small_schema())
        sub = ds.select_rows(np.array([2, 3]))
        assert list(sub.row_ids) == [2, 3]
