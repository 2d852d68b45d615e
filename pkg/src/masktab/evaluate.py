"""Metrics, monthly out-of-time reporting, ablation ladders, scaling sweeps.

Scoring always runs the natural (unmasked) path: missing cells go through
whatever imputation the model variant was trained with, and no synthetic
masks are drawn.  AUC uses the rank formulation with ties counted 0.5, so it
agrees exactly with a brute-force pairwise count; KS sweeps every distinct
score threshold.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import rankdata

from .data import Dataset, rank_features
from .embed import MISSING_MASK_EMBEDDING, MISSING_MODE, MISSING_ZERO
from .errors import DimensionError, NumericError, ProtocolError, UndefinedMetricError
from .model import Model, ModelVariant, config_digest
from .train import RunConfig, StageResult, run_stage

# cumulative component ladder, one rung per addition
LADDER_COMPONENTS = (
    ("vanilla", ModelVariant(MISSING_ZERO, False, False, False)),
    ("mask_embedding", ModelVariant(MISSING_MASK_EMBEDDING, True, False, False)),
    ("twin_paths", ModelVariant(MISSING_MASK_EMBEDDING, True, True, False)),
    ("moe", ModelVariant(MISSING_MASK_EMBEDDING, True, True, True)),
)

# imputation comparison: everything else held at the full twin-path model
LADDER_IMPUTATION = (
    ("zero", ModelVariant(MISSING_ZERO, True, True, False)),
    ("mode", ModelVariant(MISSING_MODE, True, True, False)),
    ("mask_embedding", ModelVariant(MISSING_MASK_EMBEDDING, True, True, False)),
)

LADDER_MASK_SHARING = (
    ("shared", ModelVariant(mask_mode="shared")),
    ("feature_specific", ModelVariant(mask_mode="feature_specific")),
)

SWEEP_AXES = ("unlabeled-ratio", "feature-count", "model-size")

DEFAULT_UNLABELED_GRID = (0, 5, 10, 20, 40)
DEFAULT_SIZE_GRID = ("base", "s", "m", "l", "xl")


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _validated_binary(scores, labels) -> tuple[np.ndarray, np.ndarray, int, int]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if scores.shape != y.shape:
        raise DimensionError(f"{scores.size} scores vs {y.size} labels")
    if scores.size == 0:
        raise UndefinedMetricError("no rows to score")
    if not np.isfinite(scores).all():
        raise NumericError("scores contain non-finite values")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != y.size:
        raise ProtocolError("labels must be 0/1")
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("metric needs both classes present")
    return scores, y, n_pos, n_neg


def roc_auc(scores, labels) -> float:
    """P(random positive outscores random negative), ties counted half."""
    scores, y, n_pos, n_neg = _validated_binary(scores, labels)
    ranks = rankdata(scores, method="average")
    pos_rank_sum = float(ranks[y == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)


def ks_stat(scores, labels) -> float:
    """max |TPR - FPR| over every distinct score threshold."""
    scores, y, n_pos, n_neg = _validated_binary(scores, labels)
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    t = y[order]
    cum_pos = np.cumsum(t == 1)
    cum_neg = np.cumsum(t == 0)
    ends = np.append(np.nonzero(np.diff(s) != 0)[0], s.size - 1)
    tpr = cum_pos[ends] / n_pos
    fpr = cum_neg[ends] / n_neg
    return float(np.abs(tpr - fpr).max())


def rmse(preds, targets) -> float:
    preds = np.asarray(preds, dtype=np.float64).reshape(-1)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if preds.shape != targets.shape or preds.size == 0:
        raise DimensionError("rmse needs equal-length non-empty inputs")
    return float(np.sqrt(np.mean((preds - targets) ** 2)))


# ---------------------------------------------------------------------------
# monthly out-of-time report
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    task: str
    metrics: tuple[str, ...]  # column names after (split, n_rows)
    rows: list[dict]
    metadata: dict

    @property
    def columns(self) -> tuple[str, ...]:
        return ("split", "n_rows") + self.metrics

    def row(self, split: str) -> dict:
        for r in self.rows:
            if r["split"] == split:
                return r
        raise ProtocolError(f"no {split!r} row in report")


def _split_metrics(kind: str, scores: np.ndarray, ds: Dataset) -> dict:
    if kind == "binary":
        return {"auc": roc_auc(scores, ds.labels), "ks": ks_stat(scores, ds.labels)}
    return {"rmse": rmse(scores, ds.labels)}


def monthly_oot_report(model: Model, train: Dataset, monthly: dict[str, Dataset]) -> EvalReport:
    """Natural-path metrics on the train split and each calendar month.

    Emits one row per month (chronological), the monthly mean, the pooled
    test metrics, and the train-minus-monthly-mean gap.  Buckets that cannot
    be scored (empty, or single-class for AUC/KS) are skipped with a warning.
    """
    kind = model.config.schema.label_kind
    if kind not in ("binary", "regression"):
        raise ProtocolError(f"monthly report supports binary and regression tasks, not {kind!r}")
    metric_names = ("auc", "ks") if kind == "binary" else ("rmse",)

    rows = [{"split": "train", "n_rows": train.n_rows}
            | _split_metrics(kind, model.natural_scores(train), train)]

    month_rows = []
    pooled_scores, pooled_labels = [], []
    for name in sorted(monthly):
        bucket = monthly[name]
        if bucket.n_rows == 0:
            warnings.warn(f"skipping empty month bucket {name}", RuntimeWarning)
            continue
        scores = model.natural_scores(bucket)
        pooled_scores.append(scores)
        pooled_labels.append(bucket.labels)
        try:
            vals = _split_metrics(kind, scores, bucket)
        except UndefinedMetricError:
            warnings.warn(f"skipping month {name}: metrics undefined (one class)", RuntimeWarning)
            continue
        month_rows.append({"split": name, "n_rows": bucket.n_rows} | vals)
    if not month_rows:
        raise ProtocolError("no scorable monthly buckets")
    rows.extend(month_rows)

    mean_row = {"split": "monthly_mean", "n_rows": sum(r["n_rows"] for r in month_rows)}
    for m in metric_names:
        mean_row[m] = float(np.mean([r[m] for r in month_rows]))
    rows.append(mean_row)

    pooled = np.concatenate(pooled_scores)
    pooled_y = np.concatenate(pooled_labels)
    if kind == "binary":
        pooled_vals = {"auc": roc_auc(pooled, pooled_y), "ks": ks_stat(pooled, pooled_y)}
    else:
        pooled_vals = {"rmse": rmse(pooled, pooled_y)}
    rows.append({"split": "pooled", "n_rows": int(pooled.size)} | pooled_vals)

    gap_row = {"split": "gap", "n_rows": None}
    for m in metric_names:
        gap_row[m] = rows[0][m] - mean_row[m]
    rows.append(gap_row)

    return EvalReport(
        task=kind,
        metrics=metric_names,
        rows=rows,
        metadata={"n_months": len(month_rows), "config_digest": config_digest(model.config)},
    )


# ---------------------------------------------------------------------------
# ablation ladder
# ---------------------------------------------------------------------------

def _oot_metrics(result: StageResult, oot: Dataset) -> dict:
    scores = result.model.natural_scores(oot)
    return {"auc": roc_auc(scores, oot.labels), "ks": ks_stat(scores, oot.labels)}


def ablation_run(
    cfg: RunConfig,
    labeled: Dataset,
    unlabeled: Dataset | None,
    oot: Dataset,
    ladder=LADDER_COMPONENTS,
) -> list[dict]:
    """Train one run per ladder rung (shared seed and schedule) and score it.

    Rows come back in ladder order, one per rung: variant name, OOT AUC, KS.
    """
    if not ladder:
        raise ProtocolError("ablation ladder is empty")
    rows = []
    for name, variant in ladder:
        rcfg = replace(cfg, variant=variant)
        result = run_stage(rcfg, labeled, unlabeled if variant.use_mlm else None)
        rows.append({"variant": name} | _oot_metrics(result, oot))
    return rows


# ---------------------------------------------------------------------------
# scaling sweep
# ---------------------------------------------------------------------------

def default_grid(axis: str, labeled: Dataset | None = None):
    if axis == "unlabeled-ratio":
        return DEFAULT_UNLABELED_GRID
    if axis == "model-size":
        return DEFAULT_SIZE_GRID
    if axis == "feature-count":
        if labeled is None:
            raise ProtocolError("feature-count grid needs the labeled split")
        d = len(labeled.schema.features)
        quarters = {max(1, round(d * f / 4)) for f in (1, 2, 3, 4)}
        return tuple(sorted(quarters))
    raise ProtocolError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")


def scaling_sweep(
    axis: str,
    grid,
    cfg: RunConfig,
    labeled: Dataset,
    unlabeled: Dataset | None,
    oot: Dataset,
) -> list[dict]:
    """One training run per grid point, varying only the named axis."""
    if axis not in SWEEP_AXES:
        raise ProtocolError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    grid = tuple(grid) if grid is not None else default_grid(axis, labeled)
    if not grid:
        raise ProtocolError("sweep grid is empty")

    ranking = rank_features(labeled) if axis == "feature-count" else None
    rows = []
    for point in grid:
        if axis == "unlabeled-ratio":
            ratio = int(point)
            if ratio == 0:
                result = run_stage(cfg, labeled, None)
            else:
                need = ratio * labeled.n_rows
                if unlabeled is None or unlabeled.n_rows < need:
                    have = 0 if unlabeled is None else unlabeled.n_rows
                    raise ProtocolError(f"ratio {ratio}x needs {need} unlabeled rows, have {have}")
                result = run_stage(cfg, labeled, unlabeled.select_rows(np.arange(need)))
        elif axis == "feature-count":
            k = int(point)
            if not 1 <= k <= len(ranking.names):
                raise ProtocolError(f"feature count {k} outside 1..{len(ranking.names)}")
            keep = ranking.names[:k]
            result = run_stage(
                cfg,
                labeled.select_features(keep),
                None if unlabeled is None else unlabeled.select_features(keep),
            )
        else:  # model-size
            rcfg = replace(cfg, preset=str(point), scale_lr_to_preset=True)
            result = run_stage(rcfg, labeled, unlabeled)
        oot_point = oot.select_features(ranking.names[: int(point)]) if axis == "feature-count" else oot
        rows.append({"axis": axis, "point": point} | _oot_metrics(result, oot_point))
    return rows
