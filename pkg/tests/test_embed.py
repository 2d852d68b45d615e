"""Tests for tokenization, mask-token semantics, and masking policy."""

from __future__ import annotations

import numpy as np
import pytest

from masktab import data as D
from masktab import embed as E
from masktab.errors import EncodingError, ProtocolError


def make_dataset(n=6, seed=0, missing_rate=0.3):
    rng = np.random.default_rng(seed)
    schema = D.FeatureSchema(
        (
            D.Feature("amount", "numerical"),
            D.Feature("region", "categorical", ("north", "south", "west")),
            D.Feature("age", "numerical"),
        ),
        "y",
        "binary",
    )
    num = rng.standard_normal((n, 2)) * 3.0 + 1.0
    num_missing = rng.uniform(size=(n, 2)) < missing_rate
    cat = rng.integers(0, 3, size=(n, 1))
    cat = np.where(rng.uniform(size=(n, 1)) < missing_rate, -1, cat)
    return D.Dataset(schema, num, num_missing, cat, rng.integers(0, 2, n))


def make_embedder(ds, width=8, seed=3, **kw):
    stats = E.compute_feature_stats(ds)
    return E.Embedder(ds.schema, width, seed, stats, **kw)


class TestNameEmbedding:
    def test_unit_norm_and_deterministic(self):
        a = E.name_embedding("credit_limit", 64, 9)
        b = E.name_embedding("credit_limit", 64, 9)
        assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-12)
        assert a.tobytes() == b.tobytes()

    def test_seed_changes_vector(self):
        assert not np.allclose(E.name_embedding("x", 16, 1), E.name_embedding("x", 16, 2))

    def test_distinct_names_nearly_orthogonal(self):
        vs = [E.name_embedding(f"feat_{i}", 64, 0) for i in range(40)]
        worst = max(
            abs(float(vs[i] @ vs[j])) for i in range(40) for j in range(i + 1, 40)
        )
        assert worst < 0.5


class TestFeatureStats:
    def test_mean_std_from_observed_cells_only(self):
        schema = D.FeatureSchema((D.Feature("x", "numerical"),))
        values = np.array([[1.0], [3.0], [999.0]])
        missing = np.array([[False], [False], [True]])
        ds = D.Dataset(schema, values, missing, np.zeros((3, 0), dtype=np.int64))
        stats = E.compute_feature_stats(ds)
        assert stats.means[0] == pytest.approx(2.0)
        assert stats.stds[0] == pytest.approx(1.0)  # population std of [1, 3]

    def test_std_floor(self):
        schema = D.FeatureSchema((D.Feature("x", "numerical"),))
        ds = D.Dataset(schema, np.ones((5, 1)), np.zeros((5, 1), bool), np.zeros((5, 0), dtype=np.int64))
        assert E.compute_feature_stats(ds).stds[0] == E.STD_FLOOR

    def test_json_round_trip(self):
        stats = E.compute_feature_stats(make_dataset())
        again = E.FeatureStats.from_json(stats.to_json())
        assert again.means.tobytes() == stats.means.tobytes()
        assert again.eta_max == stats.eta_max


class TestEncodeValue:
    def test_numerical_affine_map(self):
        ds = make_dataset(missing_rate=0.0)
        emb = make_embedder(ds)
        j = 0  # "amount" is the first numerical feature
        value = 2.5
        std = (value - emb.stats.means[j]) / emb.stats.stds[j]
        expected = emb.params["embed.num.weight"].data[j] * std + emb.params["embed.num.bias"].data[j]
        out = emb.encode_value("amount", value)
        np.testing.assert_allclose(out.data, expected, atol=0)

    def test_categorical_lookup(self):
        emb = make_embedder(make_dataset())
        out = emb.encode_value("region", "south")
        expected = emb.params["embed.cat.region.table"].data[1]
        assert out.data.tobytes() == expected.tobytes()

    def test_out_of_vocabulary_rejected(self):
        emb = make_embedder(make_dataset())
        with pytest.raises(EncodingError):
            emb.encode_value("region", "east")

    def test_missing_and_masked_share_one_vector(self):
        emb = make_embedder(make_dataset())
        m = emb.params["embed.mask.m"].data
        assert emb.encode_value("amount", None).data.tobytes() == m.tobytes()
        assert emb.encode_value("region", 1.0, masked=True).data.tobytes() == m.tobytes()

    def test_feature_specific_mode_initialized_to_shared_vector(self):
        ds = make_dataset()
        shared = make_embedder(ds, mask_mode=E.MASK_SHARED)
        specific = make_embedder(ds, mask_mode=E.MASK_FEATURE_SPECIFIC)
        m = shared.params["embed.mask.m"].data
        per_feature = specific.params["embed.mask.m"].data
        assert per_feature.shape == (3, 8)
        for k in range(3):
            assert per_feature[k].tobytes() == m.tobytes()


class TestTokenize:
    def test_matches_manual_layer_norm_of_name_plus_value(self):
        ds = make_dataset(missing_rate=0.0)
        emb = make_embedder(ds)
        H = emb.tokenize_row(ds, 0).data

        # independent recomputation: LayerNorm(e_name + phi(v)), eps 1e-5
        batch = emb.prepare(ds, np.array([0]))
        for k, f in enumerate(ds.schema.features):
            if f.kind == "numerical":
                j = [x.name for x in emb.num_features].index(f.name)
                phi = emb.params["embed.num.weight"].data[j] * batch.std_values[0, j] \
                    + emb.params["embed.num.bias"].data[j]
            else:
                phi = emb.params[f"embed.cat.{f.name}.table"].data[batch.cat_codes[0, 0]]
            t = phi + emb.name_table[k]
            mu = t.mean()
            var = ((t - mu) ** 2).mean()
            expected = (t - mu) / np.sqrt(var + 1e-5)
            np.testing.assert_allclose(H[k], expected, atol=1e-12)

    def test_masked_cell_ignores_stored_value(self):
        ds = make_dataset(missing_rate=0.0)
        emb = make_embedder(ds)
        a = emb.tokenize_row(ds, 1, mask_cells=(0,)).data
        ds.num_values[1, 0] = 1e6  # shadowed by the mask embedding
        b = emb.tokenize_row(ds, 1, mask_cells=(0,)).data
        assert a.tobytes() == b.tobytes()

    def test_missing_and_masked_tokens_identical_at_init(self):
        ds = make_dataset(missing_rate=0.0)
        emb = make_embedder(ds)
        ds_missing = make_dataset(missing_rate=0.0)
        ds_missing.num_missing[2, 0] = True
        masked_token = emb.tokenize_row(ds, 2, mask_cells=(0,)).data[0]
        missing_token = emb.tokenize_row(ds_missing, 2).data[0]
        assert masked_token.tobytes() == missing_token.tobytes()

    def test_schema_permutation_permutes_tokens(self):
        ds = make_dataset(missing_rate=0.2)
        emb = make_embedder(ds)
        H = emb.tokenize(emb.prepare(ds)).data

        perm_names = ["age", "amount", "region"]
        schema_p = D.FeatureSchema(
            tuple(ds.schema.feature(n) for n in perm_names), "y", "binary"
        )
        ds_perm = D.Dataset(
            schema_p,
            ds.num_values[:, [1, 0]],
            ds.num_missing[:, [1, 0]],
            ds.cat_codes,
            ds.labels,
        )
        emb_p = E.Embedder(schema_p, 8, 3, E.compute_feature_stats(ds_perm))
        H_p = emb_p.tokenize(emb_p.prepare(ds_perm)).data
        order = [ds.schema.feature_names.index(n) for n in perm_names]
        np.testing.assert_allclose(H_p, H[:, order, :], atol=1e-12)

    def test_imputation_fills_missing_with_values(self):
        ds = make_dataset(missing_rate=0.5, seed=4)
        emb = make_embedder(ds, missing_handling=E.MISSING_ZERO)
        batch = emb.prepare(ds)
        assert not batch.replace_missing.any()
        j = np.nonzero(ds.num_missing[:, 0])[0]
        expected = (0.0 - emb.stats.means[0]) / emb.stats.stds[0]
        assert np.all(batch.std_values[j, 0] == expected)

    def test_mode_imputation_uses_most_frequent(self):
        schema = D.FeatureSchema(
            (D.Feature("c", "categorical", ("a", "b")), D.Feature("x", "numerical"))
        )
        codes = np.array([[0], [1], [1], [-1]], dtype=np.int64)
        values = np.array([[5.0], [5.0], [7.0], [0.0]])
        missing = np.array([[False], [False], [False], [True]])
        ds = D.Dataset(schema, values, missing, codes)
        emb = E.Embedder(schema, 4, 0, E.compute_feature_stats(ds), missing_handling=E.MISSING_MODE)
        batch = emb.prepare(ds)
        assert batch.cat_codes[3, 0] == 1  # most frequent category
        expected = (5.0 - emb.stats.means[0]) / emb.stats.stds[0]
        assert batch.std_values[3, 0] == pytest.approx(expected)


class TestAdaptiveRate:
    def test_linear_example(self):
        assert E.adaptive_mask_rate(0.5, 1.0, r_max=0.3, alpha=1.0) == pytest.approx(0.15, abs=1e-15)

    def test_power_example(self):
        assert E.adaptive_mask_rate(0.5, 1.0, r_max=0.3, alpha=2.0) == pytest.approx(0.075, abs=1e-15)

    def test_fully_observed_split_masks_at_r_max(self):
        assert E.adaptive_mask_rate(0.0, 0.0, r_max=0.3) == 0.3

    def test_row_at_eta_max_gets_zero(self):
        assert E.adaptive_mask_rate(0.4, 0.4, r_max=0.3) == 0.0

    def test_eta_above_reference_rejected(self):
        with pytest.raises(ProtocolError):
            E.adaptive_mask_rate(0.6, 0.4)

    def test_rate_bounded_and_monotone(self):
        rng = np.random.default_rng(77)
        for _ in range(200):
            eta = float(rng.uniform(0, 1))
            alpha = float(rng.uniform(0, 4))
            r_max = float(rng.uniform(0, 1))
            r = E.adaptive_mask_rate(eta, 1.0, r_max=r_max, alpha=alpha)
            assert 0.0 <= r <= r_max
            higher = float(min(1.0, eta + rng.uniform(0, 0.5)))
            assert E.adaptive_mask_rate(higher, 1.0, r_max=r_max, alpha=alpha) <= r + 1e-12


class TestSampleMask:
    def test_count_rounds_half_up(self):
        rng = np.random.default_rng(0)
        observed = np.ones(10, dtype=bool)
        assert len(E.sample_mask(observed, 0.3, rng)) == 3
        assert len(E.sample_mask(observed, 0.25, rng)) == 3  # 2.5 rounds up
        assert len(E.sample_mask(observed, 0.0, rng)) == 0
        assert len(E.sample_mask(observed, 1.0, rng)) == 10

    def test_never_selects_missing_cells(self):
        rng = np.random.default_rng(1)
        observed = np.array([True, False, True, False, True, True])
        missing_positions = set(np.nonzero(~observed)[0])
        for _ in range(500):
            picked = E.sample_mask(observed, 0.8, rng)
            assert not (set(picked.tolist()) & missing_positions)
            assert len(set(picked.tolist())) == len(picked)  # without replacement

    def test_deterministic_given_stream(self):
        observed = np.ones(20, dtype=bool)
        a = E.sample_mask(observed, 0.4, E.mask_rng(5, 2, 17))
        b = E.sample_mask(observed, 0.4, E.mask_rng(5, 2, 17))
        assert a.tobytes() == b.tobytes()
        c = E.sample_mask(observed, 0.4, E.mask_rng(5, 2, 18))
        assert a.tobytes() != c.tobytes()

    def test_bad_rate_rejected(self):
        with pytest.raises(ProtocolError):
            E.sample_mask(np.ones(3, bool), 1.2, np.random.default_rng(0))
