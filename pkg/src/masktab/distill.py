"""Teacher-to-student distillation via cached row embeddings.

The teacher's pooled natural-path representation is computed once per
training row and persisted; the student projects its own pooled vector up to
teacher width and pays one minus the cosine between the two.  The cache is
keyed by the teacher checkpoint digest, so training against a cache written
by a different checkpoint fails instead of silently drifting.

Cache layout: ``manifest.json`` {teacher_digest, d_t, row_count} and
``embeddings.f32`` with little-endian float32 vectors, row id i at offset
i*d_t (row ids must be dense 0..n-1).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .encoder import pool
from .errors import ProtocolError
from .model import Model, load_checkpoint
from .objectives import (
    HybridConfig,
    LossBreakdown,
    assemble_masks,
    ce_loss,
    masked_reconstruction,
)

_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class DistillConfig:
    lambda1: float = 0.2  # reconstruction
    lambda2: float = 0.4  # task
    lambda3: float = 0.4  # alignment

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ProtocolError("distillation weights must be >= 0")
        total = self.lambda1 + self.lambda2 + self.lambda3
        if abs(total - 1.0) > 1e-9:
            raise ProtocolError(f"distillation weights must sum to 1, got {total!r}")

    def to_json(self) -> dict:
        return {"lambda1": self.lambda1, "lambda2": self.lambda2, "lambda3": self.lambda3}

    @classmethod
    def from_json(cls, doc: dict) -> "DistillConfig":
        return cls(float(doc["lambda1"]), float(doc["lambda2"]), float(doc["lambda3"]))


def checkpoint_digest(ckpt_dir) -> str:
    """Content hash of a checkpoint: manifest plus parameter payload."""
    ckpt_dir = Path(ckpt_dir)
    h = hashlib.sha256()
    for name in ("manifest.json", "params.f32"):
        f = ckpt_dir / name
        if not f.is_file():
            raise ProtocolError(f"checkpoint at {ckpt_dir} is missing {name}")
        h.update(f.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# teacher cache
# ---------------------------------------------------------------------------

def teacher_embeddings(teacher: Model, ds: Dataset, batch_size: int = 512) -> np.ndarray:
    """Pooled natural-path vectors, (n, d_t) float64, masking off."""
    out = []
    for start in range(0, ds.n_rows, batch_size):
        idx = np.arange(start, min(start + batch_size, ds.n_rows))
        out.append(teacher.pooled(teacher.prepare(ds, idx)).data)
    return np.concatenate(out) if out else np.zeros((0, teacher.width))


def cache_teacher(teacher_ckpt_dir, ds: Dataset, cache_dir) -> str:
    """Compute and persist teacher embeddings for every row; returns digest."""
    if not np.array_equal(ds.row_ids, np.arange(ds.n_rows)):
        raise ProtocolError("teacher cache needs dense row ids 0..n-1")
    teacher, _, _ = load_checkpoint(teacher_ckpt_dir)
    digest = checkpoint_digest(teacher_ckpt_dir)

    cache_dir = Path(cache_dir)
    manifest_file = cache_dir / "manifest.json"
    if manifest_file.is_file():
        prior = json.loads(manifest_file.read_text())
        if prior.get("d_t") != teacher.width:
            raise ProtocolError(
                f"cache at {cache_dir} holds width {prior.get('d_t')}, teacher is {teacher.width}"
            )
    cache_dir.mkdir(parents=True, exist_ok=True)

    emb = teacher_embeddings(teacher, ds)
    manifest = {"teacher_digest": digest, "d_t": teacher.width, "row_count": ds.n_rows}
    manifest_file.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (cache_dir / "embeddings.f32").write_bytes(emb.astype("<f4").tobytes())
    return digest


def load_teacher_cache(cache_dir, expected_digest: str | None = None) -> tuple[np.ndarray, dict]:
    cache_dir = Path(cache_dir)
    manifest_file = cache_dir / "manifest.json"
    if not manifest_file.is_file():
        raise ProtocolError(f"no teacher cache at {cache_dir}")
    manifest = json.loads(manifest_file.read_text())
    if expected_digest is not None and manifest["teacher_digest"] != expected_digest:
        raise ProtocolError("stale teacher cache: checkpoint digest changed, re-run caching")
    raw = np.frombuffer((cache_dir / "embeddings.f32").read_bytes(), dtype="<f4")
    n, d_t = manifest["row_count"], manifest["d_t"]
    if raw.size != n * d_t:
        raise ProtocolError(f"cache holds {raw.size} floats, expected {n}*{d_t}")
    return raw.astype(np.float64).reshape(n, d_t), manifest


# ---------------------------------------------------------------------------
# alignment loss
# ---------------------------------------------------------------------------

def alignment_rows(z_a: ad.Tensor, e_t: np.ndarray) -> ad.Tensor:
    """Per-row 1 - cosine(z_a, e_t), in [0, 2].

    Rows where either vector has norm below 1e-12 contribute the constant 1
    with exactly zero gradient (the degenerate direction carries no signal).
    """
    e_t = np.asarray(e_t, dtype=np.float64)
    good = (np.linalg.norm(z_a.data, axis=-1) >= _NORM_FLOOR) & (
        np.linalg.norm(e_t, axis=-1) >= _NORM_FLOOR
    )
    if good.all():
        return 1.0 - ad.cosine_similarity(z_a, ad.Tensor(e_t))
    # route degenerate rows through a constant unit vector: their cosine is
    # exactly 1 and the zero-multiply cuts the gradient path
    g = good.astype(np.float64)[:, None]
    basis = np.zeros_like(e_t)
    basis[~good, 0] = 1.0
    za_safe = z_a * ad.Tensor(g) + ad.Tensor(basis)
    et_safe = np.where(good[:, None], e_t, basis)
    return (1.0 - ad.cosine_similarity(za_safe, ad.Tensor(et_safe))) + ad.Tensor(
        (~good).astype(np.float64)
    )


def align_loss(z_cls: ad.Tensor, model: Model, e_t: np.ndarray) -> ad.Tensor:
    """Batch-mean alignment loss of the projected student representation."""
    return ad.mean(alignment_rows(model.align_project(z_cls), e_t))


def distill_loss(l_mlm, l_ce, l_align, cfg: DistillConfig):
    """lambda1*l_mlm + lambda2*l_ce + lambda3*l_align (tensors or floats)."""
    return cfg.lambda1 * l_mlm + cfg.lambda2 * l_ce + cfg.lambda3 * l_align


def distill_batch_loss(
    student: Model,
    batch,
    hybrid: HybridConfig,
    dcfg: DistillConfig,
    cache_embeddings: np.ndarray,
    seed: int,
    step: int,
) -> LossBreakdown:
    """Student loss on one labeled batch: twin paths plus alignment.

    The alignment target for each row is looked up in the cache by row id;
    the student's own masking stays on so the reconstruction term exists.
    """
    if batch.labels is None:
        raise ProtocolError("distillation needs labeled batches")
    ids = np.asarray(batch.row_ids)
    if ids.min() < 0 or ids.max() >= cache_embeddings.shape[0]:
        raise ProtocolError("batch row id outside the teacher cache")
    kind = student.config.schema.label_kind
    w = hybrid.recon_path_ce_weight

    pooled_nat = student.pooled(batch)
    ce_cls = ad.mean(ce_loss(student.logits(pooled_nat), batch.labels, kind))

    if student.config.variant.use_mlm:
        masked = assemble_masks(batch, hybrid, student.config.stats.eta_max, seed, step)
        z_masked = student.encode(batch, masked)
        l_mlm = masked_reconstruction(student, z_masked, batch, masked)
        ce_recon = ad.mean(ce_loss(student.logits(pool(z_masked)), batch.labels, kind))
        l_ce = w * ce_recon + (1.0 - w) * ce_cls
    else:
        l_mlm = ad.Tensor(np.float64(0.0))
        ce_recon = None
        l_ce = ce_cls

    l_align = ad.mean(alignment_rows(student.align_project(pooled_nat), cache_embeddings[ids]))
    combined = distill_loss(l_mlm, l_ce, l_align, dcfg)
    return LossBreakdown(l_mlm, ce_recon, ce_cls, l_align, combined)
