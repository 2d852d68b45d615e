"""Optimization: schedule, decoupled-weight-decay updates, stage runner.

Three stages share one loop.  Hybrid pretraining consumes one labeled and
one unlabeled mini-batch per step and sums their losses; finetuning runs
labeled-only at a small constant rate with the task loss alone (masking can
be re-enabled by flag); distillation adds the alignment term against a
teacher cache.  Everything is keyed off the run seed, so a rerun with the
same config writes byte-identical checkpoints and metrics.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .distill import DistillConfig, distill_batch_loss, load_teacher_cache
from .embed import compute_feature_stats
from .encoder import PRESETS, preset
from .errors import DimensionError, NumericError, ProtocolError
from .model import Model, ModelConfig, ModelVariant, save_checkpoint
from .moe import MoEConfig
from .objectives import HybridConfig, LossBreakdown, ce_loss, twin_batch_loss, unsupervised_mlm

BETA1, BETA2 = 0.9, 0.999
ADAM_EPS = 1e-8
WEIGHT_DECAY = 0.01
CLIP_NORM = 1.0

STAGES = ("hybrid-pretrain", "finetune", "distill")

METRIC_COLUMNS = ("step", "lr", "l_mlm", "l_ce_recon", "l_ce_cls", "l_align", "combined")


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

def lr_at_step(step: int, total: int, warmup: int, peak: float, final: float) -> float:
    """Linear warmup to ``peak``, then cosine decay to ``final``.

    The endpoints are returned exactly (no trigonometric round-off at
    step == warmup or step == total).
    """
    if not 0 <= step <= total:
        raise ProtocolError(f"step {step} outside [0, {total}]")
    if step == warmup:
        return peak
    if step < warmup:
        return peak * (step / warmup)
    if step == total:
        return final
    frac = (step - warmup) / (total - warmup)
    return final + 0.5 * (peak - final) * (1.0 + math.cos(math.pi * frac))


def scale_lr(n_params: int, n_base: int, lr_base: float) -> float:
    """Inverse square-root scaling with model size."""
    if n_params <= 0 or n_base <= 0:
        raise ProtocolError("parameter counts must be positive")
    return lr_base / math.sqrt(n_params / n_base)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def init_opt_state(params) -> dict:
    return {
        "t": 0,
        "m": {n: np.zeros_like(t.data) for n, t in params.items()},
        "v": {n: np.zeros_like(t.data) for n, t in params.items()},
    }


def optimizer_step(params, state: dict, lr: float, weight_decay: float = WEIGHT_DECAY) -> None:
    """One Adam update with decoupled weight decay, in place."""
    t = state["t"] + 1
    bc1 = 1.0 - BETA1**t
    bc2 = 1.0 - BETA2**t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name}")
        m = state["m"][name]
        v = state["v"][name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        p.data = p.data - lr * update - lr * weight_decay * p.data
    state["t"] = t


def clip_gradients(params, max_norm: float = CLIP_NORM) -> float:
    """Scale all gradients so their global norm is at most ``max_norm``."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    stage: str
    preset: str = "base"
    batch_size: int = 64
    total_steps: int = 2000
    warmup_steps: int = 100
    peak_lr: float = 1e-4
    final_lr: float | None = None  # defaults to peak/10
    seed: int = 0
    variant: ModelVariant = field(default_factory=ModelVariant)
    hybrid: HybridConfig = field(default_factory=HybridConfig)
    moe: MoEConfig | None = None
    distill: DistillConfig | None = None
    finetune_lr: float = 1e-5
    finetune_mlm: bool = False
    scale_lr_to_preset: bool = False  # apply the size rule against "base"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ProtocolError(f"unknown stage {self.stage!r}; choose from {STAGES}")
        if self.preset not in PRESETS:
            raise ProtocolError(f"unknown size preset {self.preset!r}")
        if self.total_steps > 0 and not self.warmup_steps < self.total_steps:
            raise ProtocolError("warmup must be shorter than the run")
        if self.batch_size < 1 or self.total_steps < 0 or self.warmup_steps < 0:
            raise ProtocolError("batch size and step counts must be sensible")
        if self.resolved_final_lr > self.peak_lr:
            raise ProtocolError("final LR must not exceed peak LR")
        if self.stage == "distill" and self.distill is None:
            object.__setattr__(self, "distill", DistillConfig())

    @property
    def resolved_final_lr(self) -> float:
        return self.peak_lr / 10.0 if self.final_lr is None else self.final_lr


@dataclass
class StageResult:
    model: Model
    metrics: list[dict]
    audit: dict
    opt_state: dict


class _Stream:
    """Deterministic epoch-shuffled mini-batch index stream."""

    def __init__(self, n_rows: int, batch_size: int, seed: int, tag: int):
        if n_rows < 1:
            raise ProtocolError("cannot stream batches from an empty dataset")
        self.n = n_rows
        self.batch = batch_size
        self.seed = seed
        self.tag = tag
        self.epoch = -1
        self.queue: list[np.ndarray] = []
        self.rows_served = 0

    def _refill(self):
        self.epoch += 1
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 101, self.tag, self.epoch]))
        order = rng.permutation(self.n)
        self.queue = [order[i : i + self.batch] for i in range(0, self.n, self.batch)]
        self.queue.reverse()  # pop from the end

    def next(self) -> np.ndarray:
        if not self.queue:
            self._refill()
        idx = self.queue.pop()
        self.rows_served += int(idx.size)
        return idx


# ---------------------------------------------------------------------------
# stage runner
# ---------------------------------------------------------------------------

def build_model(
    cfg: RunConfig,
    schema,
    stats,
    n_outputs: int = 1,
    align_width: int | None = None,
) -> Model:
    return Model(
        ModelConfig(
            schema=schema,
            stats=stats,
            encoder=preset(cfg.preset),
            seed=cfg.seed,
            variant=cfg.variant,
            moe=cfg.moe if cfg.variant.moe else None,
            n_outputs=n_outputs,
            align_width=align_width,
        )
    )


def pretrain_stats(labeled: Dataset, unlabeled: Dataset | None):
    """Feature statistics over every row the stage will tokenize."""
    if unlabeled is None:
        return compute_feature_stats(labeled)
    merged = Dataset(
        labeled.schema,
        np.concatenate([labeled.num_values, unlabeled.num_values]),
        np.concatenate([labeled.num_missing, unlabeled.num_missing]),
        np.concatenate([labeled.cat_codes, unlabeled.cat_codes]),
    )
    return compute_feature_stats(merged)


def _n_outputs(labeled: Dataset) -> int:
    if labeled.schema.label_kind == "n-way":
        return int(labeled.labels.max()) + 1
    return 1


def run_stage(
    cfg: RunConfig,
    labeled: Dataset,
    unlabeled: Dataset | None = None,
    start_model: Model | None = None,
    teacher_cache_dir=None,
    out_dir=None,
    teacher_digest: str | None = None,
) -> StageResult:
    """Train one stage and optionally persist checkpoint + metrics."""
    if labeled.labels is None:
        raise ProtocolError(f"{cfg.stage} needs a labeled dataset")

    cache = None
    if cfg.stage == "distill":
        if teacher_cache_dir is None:
            raise ProtocolError("distillation needs --teacher-cache")
        cache, _ = load_teacher_cache(teacher_cache_dir, expected_digest=teacher_digest)

    if start_model is not None:
        model = start_model
    else:
        stats = pretrain_stats(labeled, unlabeled if cfg.stage == "hybrid-pretrain" else None)
        model = build_model(
            cfg,
            labeled.schema,
            stats,
            n_outputs=_n_outputs(labeled),
            align_width=cache.shape[1] if cache is not None else None,
        )
    if cfg.stage == "distill" and cache is not None and "align.weight" not in model.params:
        raise ProtocolError("distillation student lacks an alignment adapter")

    lr_base = cfg.peak_lr
    if cfg.scale_lr_to_preset:
        lr_base = scale_lr(model.param_count(), _preset_count("base"), cfg.peak_lr)

    sup_stream = _Stream(labeled.n_rows, cfg.batch_size, cfg.seed, tag=0)
    unsup_stream = None
    if cfg.stage == "hybrid-pretrain" and unlabeled is not None and cfg.variant.use_mlm:
        unsup_stream = _Stream(unlabeled.n_rows, cfg.batch_size, cfg.seed, tag=1)

    opt = init_opt_state(model.params)
    metrics: list[dict] = []
    for step in range(cfg.total_steps):
        if cfg.stage == "finetune":
            lr = cfg.finetune_lr
        else:
            lr = lr_at_step(step, cfg.total_steps, cfg.warmup_steps, lr_base, _scaled_final(cfg, lr_base))

        with ad.Tape() as tape:
            row = {"step": step, "lr": lr, "l_align": None}
            batch = model.prepare(labeled, sup_stream.next())
            if cfg.stage == "distill":
                bd = distill_batch_loss(model, batch, cfg.hybrid, cfg.distill, cache, cfg.seed, step)
                loss = bd.combined
                row.update(bd.floats())
            elif cfg.stage == "finetune" and not cfg.finetune_mlm:
                bd = _task_only_loss(model, batch)
                loss = bd.combined
                row.update(bd.floats())
            else:
                bd = twin_batch_loss(model, batch, cfg.hybrid, cfg.seed, step)
                loss = bd.combined
                row.update(bd.floats())
                if unsup_stream is not None:
                    unsup_batch = model.prepare(unlabeled, unsup_stream.next())
                    unsup_term = unsupervised_mlm(model, unsup_batch, cfg.hybrid, cfg.seed, step)
                    loss = loss + unsup_term
                    row["combined"] = loss.item()
            if not np.isfinite(loss.item()):
                raise NumericError(f"non-finite loss {loss.item()} at step {step}")

        ad.zero_grads(model.params.values())
        tape.backward(loss)
        clip_gradients(model.params)
        optimizer_step(model.params, opt, lr)
        metrics.append(row)

    audit = {
        "labeled_rows_seen": sup_stream.rows_served,
        "unlabeled_rows_seen": 0 if unsup_stream is None else unsup_stream.rows_served,
    }
    if cfg.stage in ("finetune", "distill"):
        assert audit["unlabeled_rows_seen"] == 0, "stage must not read unlabeled data"

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out_dir / "checkpoint", model, step=cfg.total_steps, opt_state=opt)
        write_metrics_csv(out_dir / "metrics.csv", metrics)
    return StageResult(model, metrics, audit, opt)


def _task_only_loss(model: Model, batch) -> LossBreakdown:
    ce = ad.mean(ce_loss(model.logits(model.pooled(batch)), batch.labels, model.config.schema.label_kind))
    zero = ad.Tensor(np.float64(0.0))
    return LossBreakdown(zero, None, ce, None, ce)


def _scaled_final(cfg: RunConfig, lr_base: float) -> float:
    if cfg.scale_lr_to_preset:
        return lr_base / 10.0
    return cfg.resolved_final_lr


def _preset_count(name: str) -> int:
    from .encoder import param_count

    return param_count(PRESETS[name])


def write_metrics_csv(path, rows: list[dict]) -> None:
    """Training log; floats as repr so a reread is bit-exact."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            out = []
            for col in METRIC_COLUMNS:
                v = row.get(col)
                if v is None:
                    out.append("")
                elif col == "step":
                    out.append(str(v))
                else:
                    out.append(repr(float(v)))
            writer.writerow(out)
