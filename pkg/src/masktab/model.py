"""Model assembly and checkpoint I/O.

A model is the embedder (feature tokenization), the encoder stack, a task
head on the pooled representation, and optionally a reconstruction head
(plain affine or mixture-of-experts) and an alignment adapter for
distillation.  Ablation variants toggle how missing cells are handled and
which heads exist; inference always runs the natural (unmasked) path.

Checkpoints are directories: ``manifest.json`` holds the full model config
and name-sorted parameter shapes, ``params.f32`` the little-endian float32
payload in that order, ``opt_state.f32`` optionally the optimizer moments.
Parameters live as float64 in memory; the float32 narrowing on save is
idempotent, so save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from .data import FeatureSchema
from .embed import (
    MASK_FEATURE_SPECIFIC,
    MASK_SHARED,
    MISSING_HANDLINGS,
    MISSING_MASK_EMBEDDING,
    Batch,
    Embedder,
    FeatureStats,
    _hashed_rng,
    _trunc_normal,
)
from .errors import ProtocolError
from .moe import MoEConfig, init_moe_params

FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelVariant:
    """Ablation switches."""

    missing_handling: str = MISSING_MASK_EMBEDDING
    use_mlm: bool = True
    twin_paths: bool = True
    moe: bool = False
    mask_mode: str = MASK_SHARED

    def __post_init__(self):
        if self.missing_handling not in MISSING_HANDLINGS:
            raise ProtocolError(f"unknown missing_handling {self.missing_handling!r}")
        if self.mask_mode not in (MASK_SHARED, MASK_FEATURE_SPECIFIC):
            raise ProtocolError(f"unknown mask_mode {self.mask_mode!r}")
        if (self.twin_paths or self.moe) and not self.use_mlm:
            raise ProtocolError("twin paths and the moe head require masking to be on")

    def to_json(self) -> dict:
        return {
            "missing_handling": self.missing_handling,
            "use_mlm": self.use_mlm,
            "twin_paths": self.twin_paths,
            "moe": self.moe,
            "mask_mode": self.mask_mode,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ModelVariant":
        return cls(
            doc["missing_handling"],
            bool(doc["use_mlm"]),
            bool(doc["twin_paths"]),
            bool(doc["moe"]),
            doc["mask_mode"],
        )


@dataclass(frozen=True)
class ModelConfig:
    schema: FeatureSchema
    stats: FeatureStats
    encoder: enc.EncoderConfig
    seed: int
    variant: ModelVariant = ModelVariant()
    moe: MoEConfig | None = None
    n_outputs: int = 1
    align_width: int | None = None  # teacher width, when distilling

    def __post_init__(self):
        if self.variant.moe and self.moe is None:
            object.__setattr__(self, "moe", MoEConfig())
        if self.schema.label_kind in ("binary", "regression") and self.n_outputs != 1:
            raise ProtocolError(f"{self.schema.label_kind} tasks use a single output")
        if self.schema.label_kind == "n-way" and self.n_outputs < 2:
            raise ProtocolError("n-way tasks need n_outputs >= 2")

    def to_json(self) -> dict:
        return {
            "schema": self.schema.to_json(),
            "stats": self.stats.to_json(),
            "encoder": {
                "n_layers": self.encoder.n_layers,
                "n_heads": self.encoder.n_heads,
                "head_width": self.encoder.head_width,
                "width": self.encoder.width,
            },
            "seed": self.seed,
            "variant": self.variant.to_json(),
            "moe": None if self.moe is None else self.moe.to_json(),
            "n_outputs": self.n_outputs,
            "align_width": self.align_width,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ModelConfig":
        e = doc["encoder"]
        return cls(
            FeatureSchema.from_json(doc["schema"]),
            FeatureStats.from_json(doc["stats"]),
            enc.EncoderConfig(e["n_layers"], e["n_heads"], e["head_width"], e["width"]),
            int(doc["seed"]),
            ModelVariant.from_json(doc["variant"]),
            None if doc.get("moe") is None else MoEConfig.from_json(doc["moe"]),
            int(doc.get("n_outputs", 1)),
            doc.get("align_width"),
        )


def config_digest(config: ModelConfig) -> str:
    blob = json.dumps(config.to_json(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class Model:
    """Embedder + encoder + heads with one flat parameter mapping."""

    def __init__(self, config: ModelConfig):
        self.config = config
        v = config.variant
        h = config.encoder.width
        self.embedder = Embedder(
            config.schema,
            h,
            config.seed,
            config.stats,
            missing_handling=v.missing_handling,
            mask_mode=v.mask_mode,
        )
        self.params: "OrderedDict[str, ad.Tensor]" = OrderedDict(self.embedder.params)
        self.params.update(enc.init_encoder_params(config.encoder, _hashed_rng(config.seed, "encoder")))
        self.params.update(enc.init_task_head(h, config.n_outputs, _hashed_rng(config.seed, "task")))
        if v.use_mlm:
            rng = _hashed_rng(config.seed, "mlm")
            if not v.moe:  # the expert affines replace this trunk when moe is on
                self.params["mlm.proj.weight"] = ad.Tensor(_trunc_normal(rng, (h, h)), requires_grad=True)
                self.params["mlm.proj.bias"] = ad.Tensor(np.zeros(h), requires_grad=True)
            self.params["mlm.num.weight"] = ad.Tensor(_trunc_normal(rng, (h, 1)), requires_grad=True)
            self.params["mlm.num.bias"] = ad.Tensor(np.zeros(1), requires_grad=True)
        if v.moe:
            self.params.update(init_moe_params(h, config.moe, _hashed_rng(config.seed, "moe")))
        if config.align_width is not None:
            rng = _hashed_rng(config.seed, "align")
            self.params["align.weight"] = ad.Tensor(
                _trunc_normal(rng, (config.align_width, h)), requires_grad=True
            )
            self.params["align.bias"] = ad.Tensor(np.zeros(config.align_width), requires_grad=True)

    @property
    def width(self) -> int:
        return self.config.encoder.width

    # ------------------------------------------------------------------
    # forward pieces
    # ------------------------------------------------------------------
    def prepare(self, ds, idx=None) -> Batch:
        return self.embedder.prepare(ds, idx)

    def encode(self, batch: Batch, masked: np.ndarray | None = None) -> ad.Tensor:
        tokens = self.embedder.tokenize(batch, masked)
        return enc.encoder_forward(self.params, self.config.encoder, tokens)

    def pooled(self, batch: Batch, masked: np.ndarray | None = None) -> ad.Tensor:
        return enc.pool(self.encode(batch, masked))

    def logits(self, pooled: ad.Tensor) -> ad.Tensor:
        return enc.task_logits(pooled, self.params)

    def decode(self, z: ad.Tensor) -> ad.Tensor:
        """Shared reconstruction trunk feeding the type-aware decoders."""
        return ad.matmul(z, self.params["mlm.proj.weight"]) + self.params["mlm.proj.bias"]

    def align_project(self, pooled: ad.Tensor) -> ad.Tensor:
        """(B, d_s) -> (B, d_t) student-side projection for alignment."""
        if "align.weight" not in self.params:
            raise ProtocolError("model was built without an alignment adapter")
        w = ad.transpose(self.params["align.weight"], (1, 0))
        return ad.matmul(pooled, w) + self.params["align.bias"]

    def natural_scores(self, ds, batch_size: int = 512) -> np.ndarray:
        """Inference on the natural path: no masking, no tape."""
        out = []
        for start in range(0, ds.n_rows, batch_size):
            idx = np.arange(start, min(start + batch_size, ds.n_rows))
            out.append(self.logits(self.pooled(self.prepare(ds, idx))).data)
        return np.concatenate(out) if out else np.zeros(0)

    def param_count(self) -> int:
        """Encoder plus task head, the size the LR scaling rule keys on."""
        return enc.param_count(self.config.encoder, self.config.n_outputs)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _sorted_names(params) -> list[str]:
    return sorted(params)


def save_checkpoint(
    path,
    model: Model,
    step: int = 0,
    opt_state: dict | None = None,
) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = _sorted_names(model.params)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config_digest": config_digest(model.config),
        "step": int(step),
        "params": [[n, list(model.params[n].shape)] for n in names],
        "config": model.config.to_json(),
        "optimizer_t": None if opt_state is None else int(opt_state["t"]),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    payload = np.concatenate([model.params[n].data.ravel() for n in names]) if names else np.zeros(0)
    (path / "params.f32").write_bytes(payload.astype("<f4").tobytes())
    if opt_state is not None:
        chunks = []
        for n in names:
            chunks.append(opt_state["m"][n].ravel())
            chunks.append(opt_state["v"][n].ravel())
        (path / "opt_state.f32").write_bytes(np.concatenate(chunks).astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[Model, int, dict | None]:
    path = Path(path)
    manifest_file = path / "manifest.json"
    if not manifest_file.is_file():
        raise ProtocolError(f"no checkpoint at {path} (missing manifest.json)")
    manifest = json.loads(manifest_file.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ProtocolError(f"unsupported checkpoint format {manifest.get('format_version')}")
    config = ModelConfig.from_json(manifest["config"])
    if config_digest(config) != manifest["config_digest"]:
        raise ProtocolError("checkpoint config digest mismatch")
    model = Model(config)

    names = _sorted_names(model.params)
    declared = [(n, tuple(s)) for n, s in manifest["params"]]
    actual = [(n, model.params[n].shape) for n in names]
    if declared != actual:
        raise ProtocolError("checkpoint parameter inventory does not match the config")
    flat = np.frombuffer((path / "params.f32").read_bytes(), dtype="<f4").astype(np.float64)
    total = sum(model.params[n].size for n in names)
    if flat.size != total:
        raise ProtocolError(f"params.f32 holds {flat.size} values, expected {total}")
    pos = 0
    for n in names:
        t = model.params[n]
        t.data = flat[pos : pos + t.size].reshape(t.shape).copy()
        pos += t.size

    opt_state = None
    opt_file = path / "opt_state.f32"
    if opt_file.is_file():
        raw = np.frombuffer(opt_file.read_bytes(), dtype="<f4").astype(np.float64)
        if raw.size != 2 * total:
            raise ProtocolError(f"opt_state.f32 holds {raw.size} values, expected {2 * total}")
        m, v = {}, {}
        pos = 0
        for n in names:
            size = model.params[n].size
            m[n] = raw[pos : pos + size].reshape(model.params[n].shape).copy()
            v[n] = raw[pos + size : pos + 2 * size].reshape(model.params[n].shape).copy()
            pos += 2 * size
        opt_state = {"t": int(manifest["optimizer_t"] or 0), "m": m, "v": v}
    return model, int(manifest["step"]), opt_state
