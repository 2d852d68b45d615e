"""Command-line pipeline: one binary, one subcommand per stage.

Exit codes: 0 success, 1 protocol or ingestion problems (bad flags, bad
config, unreadable inputs), 2 numeric failures (non-finite losses or
metrics).  Every message goes to standard error; data only ever goes to
files under --out.  Rerunning any subcommand with the same config and seed
rewrites byte-identical outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import config as cfg
from .data import information_value, missingness_stats, rank_features, temporal_split, write_csv
from .distill import cache_teacher
from .errors import IngestionError, NumericError, ProtocolError
from .evaluate import (
    LADDER_COMPONENTS,
    LADDER_IMPUTATION,
    LADDER_MASK_SHARING,
    ablation_run,
    monthly_oot_report,
    scaling_sweep,
)
from .model import load_checkpoint
from .report import write_ablation_table, write_eval_report, write_sweep_report, write_table
from .synth import generate
from .train import run_stage

LADDERS = {
    "components": LADDER_COMPONENTS,
    "imputation": LADDER_IMPUTATION,
    "mask_sharing": LADDER_MASK_SHARING,
}


def _say(msg: str) -> None:
    print(f"masktab: {msg}", file=sys.stderr)


def _need(value, flag: str):
    if value is None:
        raise ProtocolError(f"{flag} is required for this command")
    return value


class _Run:
    """Shared per-invocation plumbing: config, seed, dry-run, output dir."""

    def __init__(self, args, command: str):
        self.args = args
        self.command = command
        path = Path(_need(args.config, "--config"))
        self.doc = cfg.load_config(path)
        cfg.check_command_doc(command, self.doc)
        self.base = path.parent
        self.seed = cfg.resolve_seed(self.doc, args.seed)
        self.resolved = cfg.resolved_config(command, self.doc, self.seed)

    def dry_run(self) -> bool:
        if not self.args.dry_run:
            return False
        print(json.dumps(self.resolved, indent=2, sort_keys=True), file=sys.stderr)
        _say(f"dry run: {self.command} plan is valid, nothing written")
        return True

    @property
    def out(self) -> Path:
        return Path(_need(self.args.out, "--out"))

    def archive(self) -> None:
        cfg.archive_resolved(self.out, self.resolved)

    def data(self, need_boundaries: bool = False) -> cfg.DataSpec:
        return cfg.data_spec(self.doc.get("data"), self.base, need_boundaries)

    def run_cfg(self, stage: str):
        return cfg.run_config(stage, self.doc, self.seed)


def cmd_synth(args) -> int:
    run = _Run(args, "synth")
    gen = cfg.generator_config(run.doc.get("generator"))
    if run.dry_run():
        return 0
    labeled, unlabeled = generate(gen, run.seed)
    out = run.out
    out.mkdir(parents=True, exist_ok=True)
    labeled.schema.save(out / "schema.json")
    write_csv(labeled, out / "labeled.csv")
    write_csv(unlabeled, out / "unlabeled.csv")
    run.archive()
    _say(f"wrote {labeled.n_rows} labeled + {unlabeled.n_rows} unlabeled rows")
    return 0


def cmd_stats(args) -> int:
    run = _Run(args, "stats")
    spec = run.data()
    if run.dry_run():
        return 0
    schema = spec.load_schema()
    ds = spec.load_labeled(schema)
    ms = missingness_stats(ds)
    scorable = ds.labels is not None and schema.label_kind == "binary"
    rows = [
        {
            "feature": f.name,
            "kind": f.kind,
            "missing_rate": ms.per_feature[f.name],
            "iv": information_value(ds, f.name) if scorable else None,
        }
        for f in schema.features
    ]
    write_table(run.out / "stats.csv", rows, ("feature", "kind", "missing_rate", "iv"))
    run.archive()
    _say(f"max row missingness {ms.eta_max:.4f} over {ds.n_rows} rows")
    return 0


def cmd_iv_rank(args) -> int:
    run = _Run(args, "iv-rank")
    spec = run.data()
    if run.dry_run():
        return 0
    ds = spec.load_labeled(spec.load_schema())
    ranking = rank_features(ds)
    rows = [
        {"rank": i + 1, "feature": name, "iv": score}
        for i, (name, score) in enumerate(ranking.ordered)
    ]
    write_table(run.out / "iv_rank.csv", rows, ("rank", "feature", "iv"))
    run.archive()
    _say(f"ranked {len(rows)} features")
    return 0


def cmd_pretrain(args) -> int:
    run = _Run(args, "pretrain")
    spec = run.data()
    rc = run.run_cfg("hybrid-pretrain")
    if run.dry_run():
        return 0
    schema = spec.load_schema()
    result = run_stage(rc, spec.load_labeled(schema), spec.load_unlabeled(schema), out_dir=run.out)
    run.archive()
    _say(f"pretrained {rc.total_steps} steps; final loss {result.metrics[-1]['combined']:.6f}"
         if result.metrics else "pretrained 0 steps")
    return 0


def cmd_finetune(args) -> int:
    run = _Run(args, "finetune")
    spec = run.data()
    rc = run.run_cfg("finetune")
    if run.dry_run():
        return 0
    model, _, _ = load_checkpoint(_need(args.checkpoint, "--checkpoint"))
    result = run_stage(rc, spec.load_labeled(spec.load_schema()), start_model=model, out_dir=run.out)
    run.archive()
    assert result.audit["unlabeled_rows_seen"] == 0
    _say(f"finetuned {rc.total_steps} steps at constant lr {rc.finetune_lr}")
    return 0


def cmd_distill(args) -> int:
    run = _Run(args, "distill")
    spec = run.data()
    rc = run.run_cfg("distill")
    if run.dry_run():
        return 0
    teacher_ckpt = _need(args.checkpoint, "--checkpoint")
    cache_dir = _need(args.teacher_cache, "--teacher-cache")
    labeled = spec.load_labeled(spec.load_schema())
    digest = cache_teacher(teacher_ckpt, labeled, cache_dir)
    _say(f"teacher cache ready (digest {digest[:12]})")
    result = run_stage(
        rc, labeled, teacher_cache_dir=cache_dir, out_dir=run.out, teacher_digest=digest
    )
    run.archive()
    assert result.audit["unlabeled_rows_seen"] == 0
    _say(f"distilled {rc.total_steps} steps")
    return 0


def cmd_eval(args) -> int:
    run = _Run(args, "eval")
    spec = run.data(need_boundaries=True)
    ev = run.doc.get("eval") or {}
    if run.dry_run():
        return 0
    model, _, _ = load_checkpoint(_need(args.checkpoint, "--checkpoint"))
    split = temporal_split(spec.load_labeled(spec.load_schema()), spec.boundaries)
    report = monthly_oot_report(model, split.train, split.monthly)
    files = write_eval_report(run.out, report, charts=bool(ev.get("charts", True)))
    run.archive()
    gap = report.row("gap")
    _say(f"wrote {len(files)} report files; " +
         ", ".join(f"{m} gap {gap[m]:+.4f}" for m in report.metrics))
    return 0


def cmd_ablate(args) -> int:
    run = _Run(args, "ablate")
    spec = run.data(need_boundaries=True)
    rc = run.run_cfg("hybrid-pretrain")
    ladder_name = (run.doc.get("ablation") or {}).get("ladder", "components")
    if ladder_name not in LADDERS:
        raise ProtocolError(f"unknown ablation ladder {ladder_name!r}; choose from {sorted(LADDERS)}")
    if run.dry_run():
        return 0
    schema = spec.load_schema()
    split = temporal_split(spec.load_labeled(schema), spec.boundaries)
    rows = ablation_run(rc, split.train, spec.load_unlabeled(schema), split.test, LADDERS[ladder_name])
    write_ablation_table(run.out, rows)
    run.archive()
    _say(f"ablation table with {len(rows)} rungs written")
    return 0


def cmd_sweep(args) -> int:
    run = _Run(args, "sweep")
    spec = run.data(need_boundaries=True)
    rc = run.run_cfg("hybrid-pretrain")
    sw = run.doc.get("sweep") or {}
    axis = sw.get("axis")
    if axis is None:
        raise ProtocolError("sweep section needs an 'axis'")
    if run.dry_run():
        return 0
    schema = spec.load_schema()
    split = temporal_split(spec.load_labeled(schema), spec.boundaries)
    rows = scaling_sweep(axis, sw.get("grid"), rc, split.train, spec.load_unlabeled(schema), split.test)
    write_sweep_report(run.out, rows)
    run.archive()
    _say(f"sweep over {axis} with {len(rows)} points written")
    return 0


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic labeled + unlabeled table"),
    "stats": (cmd_stats, "missingness and information-value report"),
    "iv-rank": (cmd_iv_rank, "rank features by information value"),
    "pretrain": (cmd_pretrain, "hybrid supervised + self-supervised pretraining"),
    "finetune": (cmd_finetune, "task-only finetuning from a checkpoint"),
    "distill": (cmd_distill, "cache teacher embeddings, then train a student"),
    "eval": (cmd_eval, "monthly out-of-time report for a checkpoint"),
    "ablate": (cmd_ablate, "train and score a component ladder"),
    "sweep": (cmd_sweep, "scaling sweep along one axis"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="masktab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name, (fn, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="PATH", help="JSON config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", metavar="DIR", help="output directory")
        p.add_argument("--checkpoint", metavar="DIR", help="model checkpoint directory")
        p.add_argument("--teacher-cache", metavar="DIR", help="teacher embedding cache directory")
        p.add_argument("--dry-run", action="store_true", help="validate config and print the plan")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors; remap
        return 0 if exc.code in (0, None) else 1
    if getattr(args, "fn", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.fn(args)
    except (ProtocolError, IngestionError) as exc:
        _say(f"error: {exc}")
        return 1
    except NumericError as exc:
        _say(f"numeric error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
