"""Synthetic tabular data with label drift and label-informative missingness.

Each row draws a scalar latent factor ``u ~ N(0, 1)``.  Numerical features are
noisy linear views of ``u`` (centered at zero, so zero-imputation collides
with the most typical observed values).  Categorical features discretize a
noisy view of ``u`` into equiprobable buckets.  The binary label is
``Bernoulli(sigmoid(label_coef * u + drift(month)))`` where the drift term
moves the log-odds linearly across the covered months.

Missingness is the interesting part: a designated subset of the numerical
features is masked not-at-random with probability
``sigmoid(mnar_bias + mnar_gain * strength * sign_j * u)``, so at strength 0
the indicator is independent of the label while at strength 1 it carries
label signal on its own.  Remaining features are masked completely at random
at ``base_missing_rate``.

Generation is fully reproducible: one seeded generator drives every draw in a
fixed order, so equal (config, seed) pairs produce byte-identical datasets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .data import CATEGORICAL, NUMERICAL, Dataset, Feature, FeatureSchema
from .errors import ProtocolError


@dataclass(frozen=True)
class GeneratorConfig:
    d_num: int = 16
    d_cat: int = 4
    n_labeled: int = 4000
    n_unlabeled: int = 40000
    mnar_strength: float = 1.0  # kappa in [0, 1]
    drift_strength: float = 0.0  # log-odds swing across the covered months
    n_months: int = 12
    start_month: str = "2024-01"
    cat_vocab_size: int = 3
    mnar_fraction: float = 0.5  # share of numerical features masked via u
    base_missing_rate: float = 0.1  # MCAR rate for the remaining features
    noise_scale: float = 0.8
    label_coef: float = 1.5
    mnar_bias: float = -1.0  # base log-odds of an MNAR cell going missing
    mnar_gain: float = 3.0  # log-odds slope in u at strength 1

    def validate(self) -> None:
        if self.d_num < 0 or self.d_cat < 0 or self.d_num + self.d_cat < 1:
            raise ProtocolError("generator needs at least one feature")
        if self.n_labeled < 1 or self.n_unlabeled < 0:
            raise ProtocolError("generator needs n_labeled >= 1 and n_unlabeled >= 0")
        if not 0.0 <= self.mnar_strength <= 1.0:
            raise ProtocolError("mnar_strength must lie in [0, 1]")
        if self.n_months < 1:
            raise ProtocolError("n_months must be >= 1")
        if self.cat_vocab_size < 2:
            raise ProtocolError("cat_vocab_size must be >= 2")
        if not 0.0 <= self.base_missing_rate < 1.0:
            raise ProtocolError("base_missing_rate must lie in [0, 1)")
        if not 0.0 <= self.mnar_fraction <= 1.0:
            raise ProtocolError("mnar_fraction must lie in [0, 1]")
        parts = self.start_month.split("-")
        if len(parts) != 2 or len(parts[0]) != 4 or len(parts[1]) != 2:
            raise ProtocolError("start_month must be YYYY-MM")


def build_schema(cfg: GeneratorConfig) -> FeatureSchema:
    vocab = tuple(f"c{v}" for v in range(cfg.cat_vocab_size))
    feats = [Feature(f"num_{j:02d}", NUMERICAL) for j in range(cfg.d_num)]
    feats += [Feature(f"cat_{j:02d}", CATEGORICAL, vocab) for j in range(cfg.d_cat)]
    return FeatureSchema(tuple(feats), "y", "binary", "date")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def generate(cfg: GeneratorConfig, seed: int) -> tuple[Dataset, Dataset]:
    """Return (labeled, unlabeled) datasets drawn under ``cfg``."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 915]))
    schema = build_schema(cfg)
    n = cfg.n_labeled + cfg.n_unlabeled

    # per-feature loadings, fixed for the whole table
    signs_num = np.where(np.arange(cfg.d_num) % 2 == 0, 1.0, -1.0)
    load_num = rng.uniform(0.6, 1.4, cfg.d_num) * signs_num
    load_cat = rng.uniform(0.6, 1.4, cfg.d_cat) * np.where(
        np.arange(cfg.d_cat) % 2 == 0, 1.0, -1.0
    )

    u = rng.standard_normal(n)
    month_idx = np.arange(n, dtype=np.int64) % cfg.n_months

    num_values = u[:, None] * load_num[None, :] + cfg.noise_scale * rng.standard_normal(
        (n, cfg.d_num)
    )

    cat_latent = u[:, None] * load_cat[None, :] + cfg.noise_scale * rng.standard_normal(
        (n, cfg.d_cat)
    )
    cat_codes = np.zeros((n, cfg.d_cat), dtype=np.int64)
    for j in range(cfg.d_cat):
        std = float(np.sqrt(load_cat[j] ** 2 + cfg.noise_scale**2))
        edges = std * norm.ppf(np.arange(1, cfg.cat_vocab_size) / cfg.cat_vocab_size)
        cat_codes[:, j] = np.digitize(cat_latent[:, j], edges)

    if cfg.n_months > 1:
        trend = month_idx / (cfg.n_months - 1) - 0.5
    else:
        trend = np.zeros(n)
    logits = cfg.label_coef * u + cfg.drift_strength * trend
    labels = (rng.uniform(size=n) < _sigmoid(logits)).astype(np.int64)

    # missingness: MNAR block first, MCAR elsewhere
    n_mnar = int(round(cfg.mnar_fraction * cfg.d_num))
    num_missing = np.zeros((n, cfg.d_num), dtype=bool)
    draws = rng.uniform(size=(n, cfg.d_num))
    for j in range(cfg.d_num):
        if j < n_mnar:
            slope = cfg.mnar_gain * cfg.mnar_strength * (1.0 if j % 2 == 0 else -1.0)
            p = _sigmoid(cfg.mnar_bias + slope * u)
        else:
            p = np.full(n, cfg.base_missing_rate)
        num_missing[:, j] = draws[:, j] < p
    cat_missing = rng.uniform(size=(n, cfg.d_cat)) < cfg.base_missing_rate
    num_values = np.where(num_missing, 0.0, num_values)
    cat_codes = np.where(cat_missing, -1, cat_codes)

    year, month0 = (int(p) for p in cfg.start_month.split("-"))
    base = np.datetime64(f"{year:04d}-{month0:02d}", "M")
    months = (base + month_idx.astype("timedelta64[M]")).astype("datetime64[D]")
    days = rng.integers(0, 28, size=n).astype("timedelta64[D]")
    timestamps = months + days

    def pack(sel: np.ndarray, with_labels: bool) -> Dataset:
        return Dataset(
            schema,
            num_values[sel],
            num_missing[sel],
            cat_codes[sel],
            labels[sel] if with_labels else None,
            timestamps[sel],
            np.arange(int(sel.sum()), dtype=np.int64),
        )

    sel_lab = np.zeros(n, dtype=bool)
    sel_lab[: cfg.n_labeled] = True
    labeled = pack(sel_lab, True)
    unlabeled = pack(~sel_lab, False)
    return labeled, unlabeled
