"""Baseline / constant / SNIPER comparison runs at desk scale.

Every cell for one seed starts from the same student weights and uses the
same train/val split; the saliency map is computed once per seed and every
mask is cut from it, so all masks of a seed are nested.
"""

from __future__ import annotations

import csv
import json
import logging
import statistics
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..models import TaskConfig, make_task
from ..pruning import compute_saliency, generate_mask, overall_sparsity, save_mask, save_saliency
from ..schedule import SniperConfig, SparsitySchedule, parse_schedule
from ..trainer import ExperimentResult, TrainConfig, Trainer
from .plot import render_svg
from .suggest import NoCrossingError, suggest_schedule

log = logging.getLogger(__name__)

AUTO = "auto"


@dataclass
class ComparisonSpec:
    task: TaskConfig = field(default_factory=TaskConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sniper: SniperConfig = field(default_factory=SniperConfig)
    epochs: int = 60
    seeds: tuple[int, ...] = (0,)
    levels: tuple[float, ...] = (0.2, 0.4)
    # level -> schedule text, or "auto" to derive it from the crossing rule
    schedules: dict[float, str] = field(default_factory=dict)
    crossing_loss: str = "train"
    halving_policy: str = "doubling"
    halving_floor: float = 0.1

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.levels = tuple(float(v) for v in self.levels)
        if not self.seeds:
            raise ValueError("comparison needs at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("duplicate seeds")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        self.schedules = {float(k): v for k, v in self.schedules.items()}
        for level in self.levels:
            if not 0.0 < level < 1.0:
                raise ValueError(f"sparsity level {level} outside (0, 1)")
            text = self.schedules.setdefault(level, AUTO)
            if text != AUTO:
                sched = parse_schedule(text)
                if sched.initial != level:
                    raise ValueError(f"schedule {text!r} does not start at its level {level}")
        extra = set(self.schedules) - set(self.levels)
        if extra:
            raise ValueError(f"schedules given for levels not in the comparison: {sorted(extra)}")

    @classmethod
    def from_dict(cls, d: dict) -> "ComparisonSpec":
        d = dict(d)
        known = {"task", "train", "sniper", "epochs", "seeds", "levels", "schedules",
                 "crossing_loss", "halving_policy", "halving_floor"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown comparison spec keys: {sorted(unknown)}")
        return cls(task=TaskConfig(**d.pop("task", {})), train=TrainConfig(**d.pop("train", {})),
                   sniper=SniperConfig(**d.pop("sniper", {})), **d)

    @classmethod
    def load(cls, path) -> "ComparisonSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {"task": asdict(self.task), "train": asdict(self.train), "sniper": self.sniper.to_dict(),
                "epochs": self.epochs, "seeds": list(self.seeds), "levels": list(self.levels),
                "schedules": {repr(k): v for k, v in self.schedules.items()},
                "crossing_loss": self.crossing_loss, "halving_policy": self.halving_policy,
                "halving_floor": self.halving_floor}


@dataclass
class RunRecord:
    variant: str
    level: float
    seed: int
    schedule: str
    result: ExperimentResult | None = None
    csv_path: str | None = None
    error: str | None = None

    @property
    def complete(self) -> bool:
        return self.result is not None and self.error is None


def _cell_name(variant: str, level: float, seed: int) -> str:
    return f"{variant}_{level:g}_seed{seed}" if variant != "baseline" else f"baseline_seed{seed}"


def run_seed(spec: ComparisonSpec, seed: int, out_dir=None) -> list[RunRecord]:
    """All cells of one seed: baseline, then constant and SNIPER per level."""
    out = None if out_dir is None else Path(out_dir)
    train_data, val_data, student = make_task(spec.task, seed)
    initial = student.state()
    sal = compute_saliency(student, train_data, spec.sniper.saliency_subset_fraction, seed,
                           mode=spec.sniper.saliency_mode, exclude=spec.sniper.exclude_patterns)

    mask_cache = {}

    def mask_for(s):
        if s not in mask_cache:
            mask_cache[s] = generate_mask(sal, s, spec.sniper.max_param_sparsity, spec.sniper.exclude_patterns)
            if out is not None:
                save_mask(mask_cache[s], out / "masks" / f"seed{seed}_{s:g}.mask")
        return mask_cache[s]

    if out is not None:
        (out / "runs").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
        save_saliency(sal, out / "masks" / f"seed{seed}.saliency")

    def run(variant, level, schedule):
        rec = RunRecord(variant, level, seed, str(schedule))
        try:
            masks = {s: mask_for(s) for s in schedule.sparsities if s > 0}
            student.load_state(initial)
            trainer = Trainer(student, train_data, val_data, schedule, masks, spec.train, spec.sniper, initial)
            rec.result = trainer.run(spec.epochs)
            if out is not None:
                path = out / "runs" / f"{_cell_name(variant, level, seed)}.csv"
                rec.result.to_csv(path)
                rec.csv_path = str(path)
        except Exception as exc:
            log.error("cell %s failed: %s", _cell_name(variant, level, seed), exc)
            rec.error = f"{type(exc).__name__}: {exc}"
            log.debug(traceback.format_exc())
        return rec

    records = [run("baseline", 0.0, SparsitySchedule.constant(0.0))]
    for level in spec.levels:
        const = run("constant", level, SparsitySchedule.constant(level))
        records.append(const)
        text = spec.schedules[level]
        if text == AUTO:
            try:
                if not (const.complete and records[0].complete):
                    raise RuntimeError("crossing rule needs completed constant and baseline runs")
                schedule = suggest_schedule(const.result, records[0].result, spec.halving_policy,
                                            spec.crossing_loss, spec.halving_floor)
            except (NoCrossingError, RuntimeError) as exc:
                records.append(RunRecord("sniper", level, seed, AUTO, error=f"{type(exc).__name__}: {exc}"))
                continue
        else:
            schedule = parse_schedule(text)
        records.append(run("sniper", level, schedule))

    if out is not None:
        for level in spec.levels:
            cells = [r for r in records if r.variant == "baseline" or r.level == level]
            series = [(_cell_name(r.variant, r.level, seed), r.result) for r in cells if r.complete]
            if series:
                (out / "charts").mkdir(exist_ok=True)
                (out / "charts" / f"level{level:g}_seed{seed}.svg").write_text(render_svg(series))
        census = {f"{s:g}": overall_sparsity(m, student) for s, m in sorted(mask_cache.items())}
        (out / "masks" / f"seed{seed}_overall_sparsity.json").write_text(json.dumps(census, indent=1))
    return records


SUMMARY_METRICS = ("final_train", "final_val", "best_val")


def summarize(spec: ComparisonSpec, records: list[RunRecord]) -> list[dict]:
    """One row per (variant, level) cell with per-seed values and seed means."""
    cells = [("baseline", 0.0)] + [(v, level) for level in spec.levels for v in ("constant", "sniper")]
    rows = []
    for variant, level in cells:
        recs = {r.seed: r for r in records if r.variant == variant and r.level == level}
        row = {"variant": variant, "level": f"{level:g}",
               "schedule": " | ".join(sorted({r.schedule for r in recs.values()}))}
        done = [recs[s] for s in spec.seeds if s in recs and recs[s].complete]
        row["status"] = "complete" if len(done) == len(spec.seeds) else f"incomplete ({len(done)}/{len(spec.seeds)})"
        for metric in SUMMARY_METRICS:
            vals = [getattr(r.result, metric) for r in done]
            row[f"{metric}_mean"] = repr(statistics.fmean(vals)) if vals else ""
        for seed in spec.seeds:
            r = recs.get(seed)
            for metric in SUMMARY_METRICS:
                row[f"{metric}_seed{seed}"] = repr(getattr(r.result, metric)) if r and r.complete else ""
        rows.append(row)
    return rows


def write_summary(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def read_summary(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_comparison(spec: ComparisonSpec, out_dir=None, jobs: int = 1) -> tuple[list[RunRecord], list[dict]]:
    """Run every cell for every seed; seeds run in parallel processes when ``jobs > 1``."""
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        Path(out_dir, "comparison.json").write_text(json.dumps(spec.to_dict(), indent=1))
    if jobs > 1 and len(spec.seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_seed = list(pool.map(run_seed, [spec] * len(spec.seeds), spec.seeds,
                                     [out_dir] * len(spec.seeds)))
    else:
        per_seed = [run_seed(spec, seed, out_dir) for seed in spec.seeds]
    records = [r for recs in per_seed for r in recs]
    rows = summarize(spec, records)
    if out_dir is not None:
        write_summary(rows, Path(out_dir) / "summary.csv")
    return records, rows
