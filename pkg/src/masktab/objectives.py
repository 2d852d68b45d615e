"""Loss algebra: masked reconstruction, task loss, twin paths, hybrid mix.

The supervised objective runs two forward passes through shared parameters.
Path A masks a sampled subset of observed cells and pays a reconstruction
loss plus a task loss on its pooled output; path B sees the natural row
(missing cells only) and pays the task loss the model will face at
inference.  ``combined = lam*l_mlm + (1-lam)*(w*l_ce_recon + (1-w)*l_ce_cls)``
with w = ``recon_path_ce_weight``.  Unlabeled rows pay reconstruction only.

Reconstruction is type aware: numerical cells score squared error against
the standardized value through a shared width->1 readout; categorical cells
score cross entropy of dot products against the feature's own value table.
Per row the cell losses are averaged over the masked set, so the magnitude
is stable as the adaptive rate varies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .embed import Batch, adaptive_mask_rate, mask_rng, sample_mask
from .encoder import pool as enc_pool
from .errors import ProtocolError
from .model import Model
from .moe import expert_outputs

_ZERO = ad.Tensor(np.float64(0.0))


@dataclass(frozen=True)
class HybridConfig:
    lam: float = 0.5  # reconstruction weight in the supervised mix
    recon_path_ce_weight: float = 0.5  # share of CE taken from the masked path
    r_max: float = 0.3
    alpha_mask: float = 1.0

    def __post_init__(self):
        for field in ("lam", "recon_path_ce_weight", "r_max"):
            v = getattr(self, field)
            if not 0.0 <= v <= 1.0:
                raise ProtocolError(f"{field} must lie in [0, 1], got {v}")
        if self.alpha_mask < 0:
            raise ProtocolError("alpha_mask must be >= 0")

    def to_json(self) -> dict:
        return {
            "lam": self.lam,
            "recon_path_ce_weight": self.recon_path_ce_weight,
            "r_max": self.r_max,
            "alpha_mask": self.alpha_mask,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "HybridConfig":
        return cls(
            float(doc["lam"]),
            float(doc["recon_path_ce_weight"]),
            float(doc["r_max"]),
            float(doc["alpha_mask"]),
        )


@dataclass
class LossBreakdown:
    """Scalar loss tensors for one supervised batch; absent parts are None."""

    l_mlm: ad.Tensor
    l_ce_recon_path: ad.Tensor | None
    l_ce_cls_path: ad.Tensor | None
    l_align: ad.Tensor | None
    combined: ad.Tensor

    def floats(self) -> dict:
        def get(t):
            return None if t is None else t.item()

        return {
            "l_mlm": get(self.l_mlm),
            "l_ce_recon": get(self.l_ce_recon_path),
            "l_ce_cls": get(self.l_ce_cls_path),
            "l_align": get(self.l_align),
            "combined": get(self.combined),
        }


# ---------------------------------------------------------------------------
# task loss
# ---------------------------------------------------------------------------

def ce_loss(logits: ad.Tensor, labels, kind: str) -> ad.Tensor:
    """Per-row task loss: sigmoid BCE / softmax CE / squared error by kind."""
    if kind == "binary":
        return ad.sigmoid_bce(logits, np.asarray(labels, dtype=np.float64))
    if kind == "n-way":
        return ad.softmax_ce(logits, labels)
    if kind == "regression":
        diff = logits - ad.Tensor(np.asarray(labels, dtype=np.float64))
        return diff * diff
    raise ProtocolError(f"unknown task kind {kind!r}")


# ---------------------------------------------------------------------------
# masked reconstruction
# ---------------------------------------------------------------------------

def reconstruction_loss(model: Model, dec_out: ad.Tensor, batch: Batch, masked: np.ndarray) -> ad.Tensor:
    """Batch-mean of per-row mean cell losses, from decoder outputs (B, d, h).

    Rows with an empty mask contribute 0; every row counts in the batch mean.
    Masked cells are always originally observed, so targets exist.
    """
    B = batch.size
    counts = masked.sum(axis=1)
    row_w = np.where(counts > 0, 1.0 / (B * np.maximum(counts, 1)), 0.0)
    emb = model.embedder
    loss = _ZERO
    if emb.num_features:
        dec_num = ad.index_select(dec_out, 1, emb._num_pos)  # (B, d_num, h)
        pred = ad.matmul(dec_num, model.params["mlm.num.weight"]) + model.params["mlm.num.bias"]
        pred = ad.reshape(pred, batch.num_targets.shape)
        err = pred - ad.Tensor(batch.num_targets)
        w = ad.Tensor(masked[:, emb._num_pos] * row_w[:, None])
        loss = loss + ad.total(err * err * w)
    for j, f in enumerate(emb.cat_features):
        k = emb._cat_pos[j]
        cell_w = masked[:, k] * row_w
        if not cell_w.any():
            continue
        dec_k = ad.reshape(ad.index_select(dec_out, 1, [k]), (B, model.width))
        table = model.params[f"embed.cat.{f.name}.table"]
        logits = ad.matmul(dec_k, ad.transpose(table, (1, 0)))  # (B, vocab)
        labels = np.maximum(batch.cat_targets[:, j], 0)  # zero-weight rows may be missing
        loss = loss + ad.total(ad.softmax_ce(logits, labels) * ad.Tensor(cell_w))
    return loss


def mlm_loss(model: Model, Z: ad.Tensor, batch: Batch, masked: np.ndarray) -> ad.Tensor:
    """Plain reconstruction head: shared affine trunk into the decoders."""
    if not masked.any():
        return _ZERO
    return reconstruction_loss(model, model.decode(Z), batch, masked)


def moe_mlm_loss(
    model: Model, Z: ad.Tensor, batch: Batch, masked: np.ndarray
) -> tuple[ad.Tensor, ad.Tensor, ad.Tensor]:
    """Mixture head: (alpha*l_shared + beta*l_routed, l_shared, l_routed)."""
    if not masked.any():
        return _ZERO, _ZERO, _ZERO
    shared, routed = expert_outputs(Z, model.params, model.config.moe)
    l_shared = reconstruction_loss(model, shared, batch, masked)
    l_routed = reconstruction_loss(model, routed, batch, masked)
    cfg = model.config.moe
    return cfg.alpha * l_shared + cfg.beta * l_routed, l_shared, l_routed


def masked_reconstruction(model: Model, Z: ad.Tensor, batch: Batch, masked: np.ndarray) -> ad.Tensor:
    if model.config.variant.moe:
        return moe_mlm_loss(model, Z, batch, masked)[0]
    return mlm_loss(model, Z, batch, masked)


# ---------------------------------------------------------------------------
# mask assembly and the twin paths
# ---------------------------------------------------------------------------

def assemble_masks(
    batch: Batch, hybrid: HybridConfig, eta_max: float, seed: int, step: int, force_rate: float | None = None
) -> np.ndarray:
    """(B, d) synthetic-mask flags, one independent stream per row id."""
    masked = np.zeros(batch.observed.shape, dtype=bool)
    for i in range(batch.size):
        rate = (
            force_rate
            if force_rate is not None
            else adaptive_mask_rate(float(batch.eta_row[i]), eta_max, hybrid.r_max, hybrid.alpha_mask)
        )
        cells = sample_mask(batch.observed[i], rate, mask_rng(seed, step, int(batch.row_ids[i])))
        masked[i, cells] = True
    return masked


def twin_batch_loss(
    model: Model,
    batch: Batch,
    hybrid: HybridConfig,
    seed: int,
    step: int,
    force_rate: float | None = None,
) -> LossBreakdown:
    """Supervised loss for one labeled batch under the model's variant."""
    if batch.labels is None:
        raise ProtocolError("twin_batch_loss needs a labeled batch")
    kind = model.config.schema.label_kind
    v = model.config.variant

    if not v.use_mlm:  # task loss on the (imputed) natural path only
        ce = ad.mean(ce_loss(model.logits(model.pooled(batch)), batch.labels, kind))
        return LossBreakdown(_ZERO, None, ce, None, ce)

    masked = assemble_masks(batch, hybrid, model.config.stats.eta_max, seed, step, force_rate)
    Z_masked = model.encode(batch, masked)
    l_mlm = masked_reconstruction(model, Z_masked, batch, masked)
    ce_recon = ad.mean(ce_loss(model.logits(enc_pool(Z_masked)), batch.labels, kind))

    if not v.twin_paths:  # single masked path carries both terms
        combined = hybrid.lam * l_mlm + (1.0 - hybrid.lam) * ce_recon
        return LossBreakdown(l_mlm, ce_recon, None, None, combined)

    ce_cls = ad.mean(ce_loss(model.logits(model.pooled(batch)), batch.labels, kind))
    w = hybrid.recon_path_ce_weight
    combined = hybrid.lam * l_mlm + (1.0 - hybrid.lam) * (w * ce_recon + (1.0 - w) * ce_cls)
    return LossBreakdown(l_mlm, ce_recon, ce_cls, None, combined)


def unsupervised_mlm(
    model: Model, batch: Batch, hybrid: HybridConfig, seed: int, step: int
) -> ad.Tensor:
    """Reconstruction-only loss for one unlabeled batch."""
    masked = assemble_masks(batch, hybrid, model.config.stats.eta_max, seed, step)
    return masked_reconstruction(model, model.encode(batch, masked), batch, masked)


def hybrid_batch_loss(sup_losses, unsup_losses) -> ad.Tensor:
    """Mean supervised combined loss plus mean unlabeled reconstruction loss.

    Each argument is a sequence of per-row scalars (tensors or floats); an
    empty sequence contributes 0.  Both empty is a protocol error.
    """
    sup = list(sup_losses)
    unsup = list(unsup_losses)
    if not sup and not unsup:
        raise ProtocolError("hybrid loss needs at least one non-empty batch")

    def term(items):
        if not items:
            return _ZERO
        acc = None
        for x in items:
            t = x if isinstance(x, ad.Tensor) else ad.Tensor(np.float64(x))
            acc = t if acc is None else acc + t
        return (1.0 / len(items)) * acc

    return term(sup) + term(unsup)
