"""Shared toy fixtures: a small mixed-type labeled dataset and model builder."""

import numpy as np
import pytest

from masktab.data import Dataset, Feature, FeatureSchema
from masktab.embed import compute_feature_stats
from masktab.encoder import EncoderConfig
from masktab.model import Model, ModelConfig, ModelVariant
from masktab.moe import MoEConfig


def toy_dataset(n=24, seed=0, missing_rate=0.25, d_num=3, vocab=("a", "b", "c")):
    rng = np.random.default_rng(seed)
    features = tuple(Feature(f"num_{j}", "numerical") for j in range(d_num)) + (
        Feature("color", "categorical", vocab),
    )
    schema = FeatureSchema(features, "y", "binary")
    num = rng.standard_normal((n, d_num))
    num_missing = rng.uniform(size=(n, d_num)) < missing_rate
    cat = rng.integers(0, len(vocab), size=(n, 1))
    cat = np.where(rng.uniform(size=(n, 1)) < missing_rate, -1, cat)
    labels = rng.integers(0, 2, n)
    return Dataset(schema, num, num_missing, cat, labels)


def toy_model(ds, variant=None, seed=7, width=6, align_width=None, moe=None, encoder=None, stats=None):
    variant = variant or ModelVariant()
    if variant.moe and moe is None:
        moe = MoEConfig(n_experts=2, n_active=1)
    return Model(
        ModelConfig(
            schema=ds.schema,
            stats=stats or compute_feature_stats(ds),
            encoder=encoder or EncoderConfig(1, 2, 3, width),
            seed=seed,
            variant=variant,
            moe=moe,
            align_width=align_width,
        )
    )


@pytest.fixture
def dataset():
    return toy_dataset()


@pytest.fixture
def plain_model(dataset):
    return toy_model(dataset)
