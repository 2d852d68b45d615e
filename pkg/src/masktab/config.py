"""Strict JSON run configuration for the command-line pipeline.

Every section has a closed key set; an unknown key anywhere is a protocol
error naming the key and its section, so typos fail loudly instead of
silently falling back to defaults.  Paths in the data section resolve
relative to the config file, letting a config directory move as a unit.
The fully resolved form (defaults filled in) is archived beside each run's
outputs; it never records the output directory, so archives from reruns into
different directories stay byte-identical.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .data import Dataset, FeatureSchema, load_csv
from .distill import DistillConfig
from .embed import MASK_SHARED, MISSING_MASK_EMBEDDING
from .errors import IngestionError, ProtocolError
from .model import ModelVariant
from .moe import MoEConfig
from .objectives import HybridConfig
from .synth import GeneratorConfig
from .train import RunConfig


def _field_names(cls) -> frozenset:
    return frozenset(f.name for f in dataclasses.fields(cls))


GENERATOR_KEYS = _field_names(GeneratorConfig)
HYBRID_KEYS = _field_names(HybridConfig)
MOE_KEYS = _field_names(MoEConfig)
DISTILL_KEYS = _field_names(DistillConfig)
DATA_KEYS = frozenset({"schema", "labeled", "unlabeled", "boundaries"})
MODEL_KEYS = frozenset(
    {"preset", "missing_handling", "use_mlm", "twin_paths", "moe", "mask_mode"}
)
TRAIN_KEYS = frozenset(
    {
        "batch_size",
        "total_steps",
        "warmup_steps",
        "peak_lr",
        "final_lr",
        "finetune_lr",
        "finetune_mlm",
        "scale_lr_to_preset",
    }
)
EVAL_KEYS = frozenset({"charts"})
ABLATION_KEYS = frozenset({"ladder"})
SWEEP_KEYS = frozenset({"axis", "grid"})

# sections each subcommand accepts, on top of the always-legal "seed"
COMMAND_SECTIONS = {
    "synth": frozenset({"generator"}),
    "stats": frozenset({"data"}),
    "iv-rank": frozenset({"data"}),
    "pretrain": frozenset({"data", "model", "train", "hybrid", "moe"}),
    "finetune": frozenset({"data", "train"}),
    "distill": frozenset({"data", "model", "train", "hybrid", "moe", "distill"}),
    "eval": frozenset({"data", "eval"}),
    "ablate": frozenset({"data", "model", "train", "hybrid", "moe", "ablation"}),
    "sweep": frozenset({"data", "model", "train", "hybrid", "moe", "sweep"}),
}

_SECTION_KEYS = {
    "generator": GENERATOR_KEYS,
    "data": DATA_KEYS,
    "model": MODEL_KEYS,
    "train": TRAIN_KEYS,
    "hybrid": HYBRID_KEYS,
    "moe": MOE_KEYS,
    "distill": DISTILL_KEYS,
    "eval": EVAL_KEYS,
    "ablation": ABLATION_KEYS,
    "sweep": SWEEP_KEYS,
}


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"no config file at {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise IngestionError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ProtocolError(f"{path} must hold a JSON object at the top level")
    return doc


def _check_keys(doc: dict, allowed: frozenset, section: str) -> None:
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ProtocolError(f"unknown {section} config keys: {', '.join(unknown)}")


def check_command_doc(command: str, doc: dict) -> None:
    """Reject unknown sections and unknown keys inside every known section."""
    sections = COMMAND_SECTIONS[command]
    _check_keys(doc, sections | {"seed"}, f"{command} top-level")
    for name in sections:
        sub = doc.get(name)
        if sub is None:
            continue
        if not isinstance(sub, dict):
            raise ProtocolError(f"config section {name!r} must be a JSON object")
        _check_keys(sub, _SECTION_KEYS[name], name)


def resolve_seed(doc: dict, override: int | None) -> int:
    if override is not None:
        return int(override)
    return int(doc.get("seed", 0))


# ---------------------------------------------------------------------------
# section builders
# ---------------------------------------------------------------------------

def generator_config(doc: dict | None) -> GeneratorConfig:
    doc = doc or {}
    _check_keys(doc, GENERATOR_KEYS, "generator")
    cfg = GeneratorConfig(**doc)
    cfg.validate()
    return cfg


@dataclass
class DataSpec:
    """Input file locations plus the optional temporal split boundaries."""

    schema: str
    labeled: str
    unlabeled: str | None
    boundaries: list[str] | None
    base: Path  # directory the relative paths resolve against

    def _path(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.base / p

    def load_schema(self) -> FeatureSchema:
        return FeatureSchema.load(self._path(self.schema))

    def load_labeled(self, schema: FeatureSchema) -> Dataset:
        return load_csv(self._path(self.labeled), schema)

    def load_unlabeled(self, schema: FeatureSchema) -> Dataset | None:
        if self.unlabeled is None:
            return None
        ds = load_csv(self._path(self.unlabeled), schema)
        ds.labels = None  # side information only; labels must never leak in
        return ds


def data_spec(doc: dict | None, base: Path, need_boundaries: bool = False) -> DataSpec:
    doc = doc or {}
    _check_keys(doc, DATA_KEYS, "data")
    for key in ("schema", "labeled"):
        if key not in doc:
            raise ProtocolError(f"data section needs a {key!r} path")
    boundaries = doc.get("boundaries")
    if need_boundaries and (not boundaries or len(boundaries) != 2):
        raise ProtocolError("data section needs 'boundaries': [split-date, split-date]")
    return DataSpec(
        schema=str(doc["schema"]),
        labeled=str(doc["labeled"]),
        unlabeled=None if doc.get("unlabeled") is None else str(doc["unlabeled"]),
        boundaries=None if boundaries is None else [str(b) for b in boundaries],
        base=Path(base),
    )


def model_variant(doc: dict | None) -> ModelVariant:
    doc = doc or {}
    _check_keys(doc, MODEL_KEYS, "model")
    return ModelVariant(
        missing_handling=doc.get("missing_handling", MISSING_MASK_EMBEDDING),
        use_mlm=bool(doc.get("use_mlm", True)),
        twin_paths=bool(doc.get("twin_paths", True)),
        moe=bool(doc.get("moe", False)),
        mask_mode=doc.get("mask_mode", MASK_SHARED),
    )


def run_config(stage: str, doc: dict, seed: int) -> RunConfig:
    model = doc.get("model") or {}
    train = dict(doc.get("train") or {})
    _check_keys(train, TRAIN_KEYS, "train")
    hybrid = doc.get("hybrid") or {}
    _check_keys(hybrid, HYBRID_KEYS, "hybrid")
    moe_doc = doc.get("moe")
    if moe_doc is not None:
        _check_keys(moe_doc, MOE_KEYS, "moe")
    distill_doc = doc.get("distill")
    if distill_doc is not None:
        _check_keys(distill_doc, DISTILL_KEYS, "distill")
    return RunConfig(
        stage=stage,
        preset=model.get("preset", "base"),
        seed=seed,
        variant=model_variant(model),
        hybrid=HybridConfig(**hybrid),
        moe=None if moe_doc is None else MoEConfig(**moe_doc),
        distill=None if distill_doc is None else DistillConfig(**distill_doc),
        **train,
    )


# ---------------------------------------------------------------------------
# resolved archive
# ---------------------------------------------------------------------------

def _resolved_run_sections(command: str, doc: dict, seed: int) -> dict:
    stage = {"pretrain": "hybrid-pretrain", "finetune": "finetune", "distill": "distill"}.get(
        command, "hybrid-pretrain"
    )
    rc = run_config(stage, doc, seed)
    out = {
        "model": {"preset": rc.preset} | rc.variant.to_json(),
        "train": {
            "batch_size": rc.batch_size,
            "total_steps": rc.total_steps,
            "warmup_steps": rc.warmup_steps,
            "peak_lr": rc.peak_lr,
            "final_lr": rc.resolved_final_lr,
            "finetune_lr": rc.finetune_lr,
            "finetune_mlm": rc.finetune_mlm,
            "scale_lr_to_preset": rc.scale_lr_to_preset,
        },
        "hybrid": rc.hybrid.to_json(),
    }
    if rc.moe is not None:
        out["moe"] = rc.moe.to_json()
    if rc.distill is not None:
        out["distill"] = rc.distill.to_json()
    return out


def resolved_config(command: str, doc: dict, seed: int) -> dict:
    """Every effective setting, defaults included; safe to archive anywhere."""
    check_command_doc(command, doc)
    resolved: dict = {"command": command, "seed": seed}
    sections = COMMAND_SECTIONS[command]
    if "generator" in sections:
        resolved["generator"] = dataclasses.asdict(generator_config(doc.get("generator")))
    if "data" in sections:
        data = doc.get("data") or {}
        _check_keys(data, DATA_KEYS, "data")
        resolved["data"] = {
            "schema": data.get("schema"),
            "labeled": data.get("labeled"),
            "unlabeled": data.get("unlabeled"),
            "boundaries": data.get("boundaries"),
        }
    if "train" in sections:
        resolved |= _resolved_run_sections(command, doc, seed)
        if command == "finetune":  # model comes from the checkpoint
            resolved.pop("model", None)
    if "eval" in sections:
        ev = doc.get("eval") or {}
        _check_keys(ev, EVAL_KEYS, "eval")
        resolved["eval"] = {"charts": bool(ev.get("charts", True))}
    if "ablation" in sections:
        ab = doc.get("ablation") or {}
        _check_keys(ab, ABLATION_KEYS, "ablation")
        resolved["ablation"] = {"ladder": ab.get("ladder", "components")}
    if "sweep" in sections:
        sw = doc.get("sweep") or {}
        _check_keys(sw, SWEEP_KEYS, "sweep")
        resolved["sweep"] = {"axis": sw.get("axis"), "grid": sw.get("grid")}
    return resolved


def archive_resolved(out_dir, resolved: dict) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved_config.json"
    path.write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    return path
