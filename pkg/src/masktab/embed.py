"""Feature tokenization: turning one table row into a sequence of tokens.

Each feature token is ``LayerNorm(e_name + phi(value))`` where ``e_name`` is a
frozen unit-norm vector derived deterministically from the feature name and
``phi`` is a per-feature value encoder: an affine map of the standardized
value for numericals, an embedding lookup for categoricals.  Cells that are
synthetically masked and cells that are naturally missing are both encoded by
one shared learnable vector ``m``, so the two pathways are indistinguishable
by construction; a feature-specific mode gives every feature its own copy of
``m`` instead.

One (gamma, beta) pair is shared by the token LayerNorm across all features.

Masking support lives here too: the adaptive per-row mask rate (rows with
more natural missingness get masked less) and the uniform without-replacement
mask sampler that never selects an already-missing cell.
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import CATEGORICAL, NUMERICAL, Dataset, FeatureSchema
from .errors import EncodingError, ProtocolError

STD_FLOOR = 1e-6
INIT_STD = 0.02

MISSING_MASK_EMBEDDING = "mask_embedding"
MISSING_ZERO = "zero"
MISSING_MODE = "mode"
MISSING_HANDLINGS = (MISSING_MASK_EMBEDDING, MISSING_ZERO, MISSING_MODE)

MASK_SHARED = "shared"
MASK_FEATURE_SPECIFIC = "feature_specific"


def _hashed_rng(*parts) -> np.random.Generator:
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:16], "little"))


def _trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    return np.clip(rng.standard_normal(shape) * std, -2.0 * std, 2.0 * std)


def name_embedding(name: str, width: int, seed: int) -> np.ndarray:
    """Frozen unit-norm direction for a feature name; stable across runs."""
    v = _hashed_rng(seed, "name", name).standard_normal(width)
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class FeatureStats:
    """Training-split statistics the encoder depends on."""

    means: np.ndarray  # (d_num,) observed-cell means
    stds: np.ndarray  # (d_num,) observed-cell stds, floored
    num_modes: np.ndarray  # (d_num,) most frequent observed value
    cat_modes: np.ndarray  # (d_cat,) most frequent observed code
    eta_max: float  # max per-row missing ratio on the training split

    def to_json(self) -> dict:
        return {
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
            "num_modes": self.num_modes.tolist(),
            "cat_modes": self.cat_modes.tolist(),
            "eta_max": self.eta_max,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "FeatureStats":
        return cls(
            np.asarray(doc["means"], dtype=np.float64),
            np.asarray(doc["stds"], dtype=np.float64),
            np.asarray(doc["num_modes"], dtype=np.float64),
            np.asarray(doc["cat_modes"], dtype=np.int64),
            float(doc["eta_max"]),
        )


def compute_feature_stats(train: Dataset) -> FeatureStats:
    d_num = train.num_values.shape[1]
    d_cat = train.cat_codes.shape[1]
    means = np.zeros(d_num)
    stds = np.ones(d_num)
    num_modes = np.zeros(d_num)
    for j in range(d_num):
        obs = train.num_values[~train.num_missing[:, j], j]
        if obs.size:
            means[j] = obs.mean()
            stds[j] = max(float(obs.std()), STD_FLOOR)
            values, counts = np.unique(obs, return_counts=True)
            num_modes[j] = values[np.argmax(counts)]  # argmax picks smallest on ties
    cat_modes = np.zeros(d_cat, dtype=np.int64)
    for j in range(d_cat):
        obs = train.cat_codes[train.cat_codes[:, j] >= 0, j]
        if obs.size:
            values, counts = np.unique(obs, return_counts=True)
            cat_modes[j] = values[np.argmax(counts)]
    eta_max = float(train.missing_matrix().mean(axis=1).max()) if train.n_rows else 0.0
    return FeatureStats(means, stds, num_modes, cat_modes, eta_max)


@dataclass
class Batch:
    """Plain arrays for one mini-batch of rows, ready for tokenization.

    ``std_values`` carries standardized numericals with 0.0 placeholders at
    replaced cells; ``replace_missing`` marks cells the mask embedding stands
    in for naturally (empty under imputation variants).
    """

    std_values: np.ndarray  # (B, d_num)
    cat_codes: np.ndarray  # (B, d_cat), >= 0 (placeholder 0 where replaced)
    replace_missing: np.ndarray  # (B, d) bool, schema order
    observed: np.ndarray  # (B, d) bool: cells eligible for synthetic masking
    eta_row: np.ndarray  # (B,) natural per-row missing ratio
    num_targets: np.ndarray  # (B, d_num) standardized reconstruction targets
    cat_targets: np.ndarray  # (B, d_cat) code targets (-1 where missing)
    labels: np.ndarray | None
    row_ids: np.ndarray

    @property
    def size(self) -> int:
        return self.replace_missing.shape[0]


class Embedder:
    """Owns embedding-side parameters and builds token matrices."""

    def __init__(
        self,
        schema: FeatureSchema,
        width: int,
        seed: int,
        stats: FeatureStats,
        missing_handling: str = MISSING_MASK_EMBEDDING,
        mask_mode: str = MASK_SHARED,
    ):
        if missing_handling not in MISSING_HANDLINGS:
            raise ProtocolError(f"unknown missing_handling {missing_handling!r}")
        if mask_mode not in (MASK_SHARED, MASK_FEATURE_SPECIFIC):
            raise ProtocolError(f"unknown mask_mode {mask_mode!r}")
        self.schema = schema
        self.width = width
        self.seed = seed
        self.stats = stats
        self.missing_handling = missing_handling
        self.mask_mode = mask_mode

        self.num_features = [f for f in schema.features if f.kind == NUMERICAL]
        self.cat_features = [f for f in schema.features if f.kind == CATEGORICAL]
        self._num_pos = [k for k, f in enumerate(schema.features) if f.kind == NUMERICAL]
        self._cat_pos = [k for k, f in enumerate(schema.features) if f.kind == CATEGORICAL]
        # schema position -> row in [num block; cat block] concat order
        perm = np.zeros(schema.d, dtype=np.int64)
        for j, k in enumerate(self._num_pos):
            perm[k] = j
        for j, k in enumerate(self._cat_pos):
            perm[k] = len(self._num_pos) + j
        self._perm = perm

        self.name_table = np.stack(
            [name_embedding(f.name, width, seed) for f in schema.features]
        )

        # per-feature init keyed by name, so parameter values do not depend on
        # the feature's position in the schema
        w = np.stack(
            [_trunc_normal(_hashed_rng(seed, "num_w", f.name), width) for f in self.num_features]
        ) if self.num_features else np.zeros((0, width))
        b = np.stack(
            [_trunc_normal(_hashed_rng(seed, "num_b", f.name), width) for f in self.num_features]
        ) if self.num_features else np.zeros((0, width))
        m0 = _trunc_normal(_hashed_rng(seed, "mask"), width)

        self.params: "OrderedDict[str, ad.Tensor]" = OrderedDict()
        self.params["embed.num.weight"] = ad.Tensor(w, requires_grad=True)
        self.params["embed.num.bias"] = ad.Tensor(b, requires_grad=True)
        for f in self.cat_features:
            table = _trunc_normal(_hashed_rng(seed, "cat", f.name), (len(f.vocab), width))
            self.params[f"embed.cat.{f.name}.table"] = ad.Tensor(table, requires_grad=True)
        if mask_mode == MASK_SHARED:
            self.params["embed.mask.m"] = ad.Tensor(m0, requires_grad=True)
        else:
            self.params["embed.mask.m"] = ad.Tensor(
                np.tile(m0, (schema.d, 1)), requires_grad=True
            )
        self.params["embed.token_ln.gamma"] = ad.Tensor(np.ones(width), requires_grad=True)
        self.params["embed.token_ln.beta"] = ad.Tensor(np.zeros(width), requires_grad=True)

    # ------------------------------------------------------------------
    # batch preparation (pure numpy, no autodiff)
    # ------------------------------------------------------------------
    def prepare(self, ds: Dataset, idx: np.ndarray | None = None) -> Batch:
        if idx is None:
            idx = np.arange(ds.n_rows)
        idx = np.asarray(idx)
        num = ds.num_values[idx]
        num_missing = ds.num_missing[idx]
        cat = ds.cat_codes[idx]
        cat_missing = cat < 0

        std = (num - self.stats.means) / self.stats.stds
        std = np.where(num_missing, 0.0, std)
        num_targets = std.copy()

        d = self.schema.d
        B = idx.size
        natural = np.zeros((B, d), dtype=bool)
        natural[:, self._num_pos] = num_missing
        natural[:, self._cat_pos] = cat_missing
        eta_row = natural.mean(axis=1) if d else np.zeros(B)

        if self.missing_handling == MISSING_MASK_EMBEDDING:
            replace = natural
            cat_filled = np.where(cat_missing, 0, cat)
        else:
            if self.missing_handling == MISSING_ZERO:
                fill_num = (0.0 - self.stats.means) / self.stats.stds
                fill_cat = self.stats.cat_modes  # no zero element exists for categories
            else:
                fill_num = (self.stats.num_modes - self.stats.means) / self.stats.stds
                fill_cat = self.stats.cat_modes
            std = np.where(num_missing, fill_num, std)
            num_targets = std.copy()
            cat_filled = np.where(cat_missing, fill_cat[None, :], cat)
            replace = np.zeros((B, d), dtype=bool)

        observed = ~natural  # synthetic masking may only hit originally observed cells
        cat_targets = np.where(cat_missing, -1, cat_filled)
        return Batch(
            std_values=std,
            cat_codes=cat_filled,
            replace_missing=replace,
            observed=observed,
            eta_row=eta_row,
            num_targets=num_targets,
            cat_targets=cat_targets,
            labels=None if ds.labels is None else ds.labels[idx],
            row_ids=ds.row_ids[idx],
        )

    # ------------------------------------------------------------------
    # differentiable tokenization
    # ------------------------------------------------------------------
    def tokenize(self, batch: Batch, masked: np.ndarray | None = None) -> ad.Tensor:
        """Token matrix H of shape (B, d, width).

        ``masked`` flags cells replaced by the mask embedding for the
        reconstruction path; values stored at replaced cells cannot influence
        the output (they are multiplied by an exact zero).
        """
        B, d = batch.replace_missing.shape
        replace = batch.replace_missing if masked is None else (batch.replace_missing | masked)

        blocks = []
        if self.num_features:
            v = ad.Tensor(batch.std_values[:, :, None])  # (B, d_num, 1)
            phi_num = v * self.params["embed.num.weight"] + self.params["embed.num.bias"]
            blocks.append(phi_num)
        for j, f in enumerate(self.cat_features):
            rows = ad.index_select(
                self.params[f"embed.cat.{f.name}.table"], 0, batch.cat_codes[:, j]
            )
            blocks.append(ad.reshape(rows, (B, 1, self.width)))
        phi = blocks[0] if len(blocks) == 1 else ad.concat(blocks, axis=1)
        if not np.array_equal(self._perm, np.arange(d)):
            phi = ad.index_select(phi, 1, self._perm)  # restore schema order

        keep = ad.Tensor((~replace).astype(np.float64)[:, :, None])
        sel = ad.Tensor(replace.astype(np.float64)[:, :, None])
        m = self.params["embed.mask.m"]
        phi = phi * keep + m * sel  # exact zero wipe-out at replaced cells
        tokens = phi + ad.Tensor(self.name_table)
        return ad.layer_norm(
            tokens, self.params["embed.token_ln.gamma"], self.params["embed.token_ln.beta"]
        )

    def tokenize_row(self, ds: Dataset, row: int, mask_cells=()) -> ad.Tensor:
        """(d, width) token matrix for one row; ``mask_cells`` by schema index."""
        batch = self.prepare(ds, np.array([row]))
        masked = np.zeros((1, self.schema.d), dtype=bool)
        for k in mask_cells:
            masked[0, k] = True
        return ad.reshape(self.tokenize(batch, masked), (self.schema.d, self.width))

    def encode_value(self, feature: str, value, masked: bool = False) -> ad.Tensor:
        """phi(value) for one cell: affine/lookup, or the mask vector."""
        f = self.schema.feature(feature)
        k = self.schema.feature_names.index(feature)
        if masked or (value is None and self.missing_handling == MISSING_MASK_EMBEDDING):
            m = self.params["embed.mask.m"]
            if self.mask_mode == MASK_FEATURE_SPECIFIC:
                return ad.reshape(ad.index_select(m, 0, [k]), (self.width,))
            return m
        if f.kind == NUMERICAL:
            j = [x.name for x in self.num_features].index(feature)
            if value is None:
                raw = 0.0 if self.missing_handling == MISSING_ZERO else float(self.stats.num_modes[j])
            else:
                raw = float(value)
            std = (raw - self.stats.means[j]) / self.stats.stds[j]
            w = ad.index_select(self.params["embed.num.weight"], 0, [j])
            b = ad.index_select(self.params["embed.num.bias"], 0, [j])
            return ad.reshape(w * std + b, (self.width,))
        j = [x.name for x in self.cat_features].index(feature)
        if value is None:
            code = int(self.stats.cat_modes[j])
        else:
            if value not in f.vocab:
                raise EncodingError(f"value {value!r} not in vocabulary of {feature!r}")
            code = f.vocab.index(value)
        return ad.reshape(
            ad.index_select(self.params[f"embed.cat.{feature}.table"], 0, [code]), (self.width,)
        )


# ---------------------------------------------------------------------------
# masking policy
# ---------------------------------------------------------------------------

def adaptive_mask_rate(eta: float, eta_max: float, r_max: float = 0.3, alpha: float = 1.0) -> float:
    """Mask rate r_max * (1 - eta/eta_max)^alpha; rows at eta_max get 0.

    A fully-observed reference split (eta_max == 0) masks at r_max.
    """
    if not 0.0 <= eta <= 1.0 or not 0.0 <= eta_max <= 1.0:
        raise ProtocolError("missing ratios must lie in [0, 1]")
    if eta > eta_max:
        raise ProtocolError(f"row missing ratio {eta} exceeds the reference maximum {eta_max}")
    if not 0.0 <= r_max <= 1.0:
        raise ProtocolError("r_max must lie in [0, 1]")
    if alpha < 0.0:
        raise ProtocolError("alpha must be >= 0")
    if eta_max == 0.0:
        return r_max
    return r_max * (1.0 - eta / eta_max) ** alpha


def sample_mask(observed: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform without-replacement cell subset of the observed positions.

    The subset size is round(rate * n_observed), rounding halves up.  Missing
    cells are never candidates.
    """
    if not 0.0 <= rate <= 1.0:
        raise ProtocolError(f"mask rate must lie in [0, 1], got {rate}")
    candidates = np.nonzero(np.asarray(observed, dtype=bool))[0]
    count = int(np.floor(rate * candidates.size + 0.5))
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    picked = rng.choice(candidates, size=count, replace=False)
    return np.sort(picked).astype(np.int64)


def mask_rng(seed: int, step: int, row_id: int) -> np.random.Generator:
    """Per-row mask stream, reproducible and order-independent across rows."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), 7, int(step), int(row_id)]))
