"""Command-line entry point: ``sniper {saliency,masks,train,compare,suggest,plot}``.

Configuration files are flat ``key = value`` text.  One file may mix task
keys (``d_in``, ``student_hidden``, ``batch_size`` ...), optimizer keys
(``optimizer``, ``lr`` ...) and SNIPER keys (``lr_scale_mode``,
``max_param_sparsity`` ...); ``--config`` can be repeated and later files
override earlier ones.

On failure the last stderr line is ``sniper-error: {"error": <kind>, "message": ...}``
and the exit status is 1 (2 for usage errors).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

from ..models import TaskConfig, build_mlp, make_task
from ..pruning import (compute_saliency, generate_mask, is_nested, load_mask, load_saliency,
                       overall_sparsity, save_mask, save_saliency)
from ..schedule import ConfigError, SniperConfig, coerce_fields, parse_kv, parse_schedule
from ..trainer import ExperimentResult, TrainConfig, Trainer
from .compare import ComparisonSpec, run_comparison
from .plot import plot_csvs
from .suggest import suggest_schedule

log = logging.getLogger("sniper")

_SECTIONS = (TaskConfig, TrainConfig, SniperConfig)


def load_configs(paths) -> tuple[TaskConfig, TrainConfig, SniperConfig]:
    raw: dict[str, tuple[str, int, str]] = {}
    for path in paths or ():
        text = Path(path).read_text()
        for key, (value, lineno) in parse_kv(text, str(path)).items():
            raw[key] = (value, lineno, str(path))
    owners = {f.name: cls for cls in _SECTIONS for f in fields(cls)}
    for key, (_, lineno, src) in raw.items():
        if key not in owners:
            raise ConfigError(src, lineno, f"unknown key {key!r}")
    out = []
    for cls in _SECTIONS:
        mine = {k: (v, ln) for k, (v, ln, _) in raw.items() if owners[k] is cls}
        src = ", ".join(sorted({raw[k][2] for k in mine})) or "<defaults>"
        out.append(coerce_fields(cls, mine, src))
    return tuple(out)


def _floats(text: str) -> list[float]:
    vals = [float(v) for v in text.replace(" ", "").split(",") if v]
    if not vals:
        raise ValueError("empty sparsity list")
    return vals


def _mask_path(out_dir: Path, sparsity: float) -> Path:
    return out_dir / f"sparsity_{sparsity:g}.mask"


def cmd_saliency(args) -> None:
    task, _, sniper = load_configs(args.config)
    fraction = args.subset_fraction if args.subset_fraction is not None else sniper.saliency_subset_fraction
    seed = args.seed if args.seed is not None else sniper.seed
    mode = args.mode or sniper.saliency_mode
    exclude = args.exclude or list(sniper.exclude_patterns)
    train_data, _, student = make_task(task, seed)
    start = time.perf_counter()
    sal = compute_saliency(student, train_data, fraction, seed, mode=mode, exclude=exclude)
    elapsed = time.perf_counter() - start
    sal.meta["task"] = {f.name: getattr(task, f.name) for f in fields(task)}
    save_saliency(sal, args.out)
    print(f"saliency written to {args.out} in {elapsed:.3f}s "
          f"({sal.meta['batches_used']}/{sal.meta['batches_total']} batches, subset_fraction={fraction})")
    for name, scores in sal.scores.items():
        print(f"  {name}: {scores.size} entries")
    print(f"  covered {sal.count()} of {student.total_count()} trainable entries")


def cmd_masks(args) -> None:
    sal = load_saliency(args.saliency)
    arch = sal.meta.get("architecture")
    model = build_mlp(arch["layer_sizes"], arch["activation"]) if arch else None
    levels = _floats(args.sparsities)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    masks = []
    for s in levels:
        try:
            mask = generate_mask(sal, s, args.cap, args.exclude or ())
        except ValueError as exc:
            raise ValueError(f"sparsity {s}: {exc}") from None
        save_mask(mask, _mask_path(out, s))
        masks.append(mask)
        overall = f"{overall_sparsity(mask, model):.4f}" if model else "n/a"
        print(f"sparsity {s:g}: maskable {mask.achieved_sparsity:.4f}, overall {overall}, cap {mask.cap:g} "
              f"-> {_mask_path(out, s)}")
    ordered = sorted(masks, key=lambda m: m.target_sparsity)
    nested = all(is_nested(lo, hi) for lo, hi in zip(ordered, ordered[1:]))
    print(f"nested: {'yes' if nested else 'NO'}")
    if not nested:
        raise RuntimeError("generated masks are not nested")


def _load_mask_dir(path, model) -> dict:
    masks = {}
    for p in sorted(Path(path).glob("*.mask")):
        m = load_mask(p, model)
        masks[m.target_sparsity] = m
    return masks


def cmd_train(args) -> None:
    task, train_cfg, sniper = load_configs(args.config)
    seed = args.seed if args.seed is not None else sniper.seed
    train_data, val_data, student = make_task(task, seed)
    text = Path(args.schedule).read_text() if Path(args.schedule).is_file() else args.schedule
    schedule = parse_schedule(text)
    masks = _load_mask_dir(args.masks, student) if args.masks else {}
    if args.resume:
        trainer = Trainer.resume(args.resume, student, train_data, val_data, schedule, masks, train_cfg, sniper)
        print(f"resumed from {args.resume} at epoch {trainer.epoch}")
    else:
        trainer = Trainer(student, train_data, val_data, schedule, masks, train_cfg, sniper)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpts = [int(e) for e in args.checkpoint_epochs.split(",") if e] if args.checkpoint_epochs else []
    result = trainer.run(args.epochs, out / "checkpoints", ckpts)
    result.to_csv(out / "losses.csv")
    trainer.save_checkpoint(out / "final.ckpt")
    print(f"epoch {trainer.epoch}: train {result.final_train:.6g}, val {result.final_val:.6g} -> {out / 'losses.csv'}")


def cmd_compare(args) -> None:
    spec = ComparisonSpec.load(args.config)
    if args.seed is not None:
        spec = ComparisonSpec.from_dict(spec.to_dict() | {"seeds": [args.seed]})
    records, rows = run_comparison(spec, args.out, jobs=args.jobs)
    width = max(len(r["variant"]) for r in rows)
    for r in rows:
        print(f"{r['variant']:<{width}} {r['level']:>4} final_val={r['final_val_mean'] or '-':<22} "
              f"best_val={r['best_val_mean'] or '-':<22} {r['status']}")
    print(f"summary: {Path(args.out) / 'summary.csv'}")
    failed = [r for r in records if not r.complete]
    if failed:
        raise RuntimeError(f"{len(failed)} cell(s) incomplete: " +
                           "; ".join(f"{r.variant}/{r.level:g}/seed{r.seed}: {r.error}" for r in failed))


def cmd_suggest(args) -> None:
    sched = suggest_schedule(ExperimentResult.from_csv(args.constant), ExperimentResult.from_csv(args.baseline),
                             args.policy, args.loss, args.floor)
    if args.out:
        Path(args.out).write_text(str(sched) + "\n")
    print(sched)


def cmd_plot(args) -> None:
    plot_csvs(args.csvs, args.out)
    print(f"wrote {args.out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sniper", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help, config_help="key = value config file (repeatable)"):
        p.add_argument("--config", action="append", default=[], help=config_help)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True, help=out_help)

    p = sub.add_parser("saliency", help="accumulate SNIP saliencies at initialisation")
    common(p, "output .saliency file")
    p.add_argument("--subset-fraction", type=float, default=None)
    p.add_argument("--mode", choices=("signed", "abs"), default=None)
    p.add_argument("--exclude", action="append", default=[], help="param-name glob to skip")
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("masks", help="cut nested masks from a saliency file")
    common(p, "output directory for .mask files")
    p.add_argument("--saliency", required=True)
    p.add_argument("--sparsities", required=True, help="comma-separated, e.g. 0.4,0.2,0.1")
    p.add_argument("--cap", type=float, default=0.75, help="max fraction pruned per parameter")
    p.add_argument("--exclude", action="append", default=[])
    p.set_defaults(func=cmd_masks)

    p = sub.add_parser("train", help="train with a sparsity schedule")
    common(p, "output directory")
    p.add_argument("--schedule", required=True, help="schedule text or a file holding it")
    p.add_argument("--masks", help="directory of .mask files")
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--checkpoint-epochs", default="", help="comma-separated epochs to checkpoint after")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="baseline / constant / SNIPER comparison")
    common(p, "output directory", "comparison spec (JSON)")
    p.add_argument("--jobs", type=int, default=1, help="seeds run in parallel processes")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("suggest", help="schedule from the constant-vs-baseline loss crossing")
    p.add_argument("--constant", required=True)
    p.add_argument("--baseline", required=True)
    p.add_argument("--loss", choices=("train", "val"), default="train")
    p.add_argument("--policy", choices=("doubling", "repeat"), default="doubling")
    p.add_argument("--floor", type=float, default=0.1, help="halved sparsities below this go to 0")
    p.add_argument("--out", help="also write the schedule here")
    p.set_defaults(func=cmd_suggest)

    p = sub.add_parser("plot", help="SVG loss curves, one series per CSV")
    p.add_argument("csvs", nargs="*")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "compare" and len(args.config) != 1:
        parser.error("compare takes exactly one --config spec")
    if args.command == "compare":
        args.config = args.config[0]
    try:
        args.func(args)
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        print("sniper-error: " + json.dumps({"error": type(exc).__name__, "command": args.command,
                                             "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
