"""Decaying sparsity schedules, learning-rate scaling and mask swaps.

Schedule text is a comma-separated list of ``start_epoch:sparsity`` pairs,
whitespace ignored, ``#`` starting a comment::

    # 40 -> 0
    1:0.40, 6:0.20, 11:0.10, 21:0.0
"""

from __future__ import annotations

import bisect
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping

import numpy as np

from .models import Model
from .pruning import Mask


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class SparsitySchedule:
    steps: tuple[tuple[int, float], ...]

    def __post_init__(self):
        steps = tuple((int(e), float(s)) for e, s in self.steps)
        if not steps:
            raise ScheduleError("schedule has no steps")
        if steps[0][0] != 1:
            raise ScheduleError(f"first step must start at epoch 1, got {steps[0][0]}")
        for e, s in steps:
            if not 0.0 <= s < 1.0:
                raise ScheduleError(f"sparsity {s} at epoch {e} outside [0, 1)")
        for (e0, s0), (e1, s1) in zip(steps, steps[1:]):
            if e1 <= e0:
                raise ScheduleError(f"start epochs must strictly increase ({e0} then {e1})")
            if s1 >= s0:
                raise ScheduleError(f"sparsity must strictly decrease ({s0} at epoch {e0}, then {s1} at epoch {e1})")
        object.__setattr__(self, "steps", steps)

    @classmethod
    def constant(cls, sparsity: float) -> "SparsitySchedule":
        return cls(((1, sparsity),))

    @property
    def initial(self) -> float:
        return self.steps[0][1]

    @property
    def sparsities(self) -> list[float]:
        return [s for _, s in self.steps]

    @property
    def start_epochs(self) -> list[int]:
        return [e for e, _ in self.steps]

    def step_index(self, epoch: int) -> int:
        if epoch < 1:
            raise ValueError(f"epochs are 1-based, got {epoch}")
        return bisect.bisect_right(self.start_epochs, epoch) - 1

    def __str__(self):
        return ", ".join(f"{e}:{s!r}" for e, s in self.steps)


def parse_schedule(text: str) -> SparsitySchedule:
    body = " ".join(line.split("#", 1)[0] for line in text.splitlines())
    pairs = [p.strip() for p in body.split(",") if p.strip()]
    if not pairs:
        raise ScheduleError("empty schedule")
    steps = []
    for p in pairs:
        epoch, sep, sparsity = p.replace(" ", "").partition(":")
        if not sep:
            raise ScheduleError(f"expected start_epoch:sparsity, got {p!r}")
        try:
            steps.append((int(epoch), float(sparsity)))
        except ValueError:
            raise ScheduleError(f"malformed schedule entry {p!r}") from None
    return SparsitySchedule(tuple(steps))


def sparsity_at(schedule: SparsitySchedule, epoch: int) -> float:
    return schedule.steps[schedule.step_index(epoch)][1]


LR_MODES = ("none", "global", "per-param")


def lr_scale(param_sparsity: float, overall_sparsity: float, mode: str, base_lr: float,
             max_lr: float | None = None) -> float:
    """Effective learning rate: base / (1 - sparsity), clamped to ``max_lr``."""
    for s in (param_sparsity, overall_sparsity):
        if not 0.0 <= s < 1.0:
            raise ValueError(f"sparsity must lie in [0, 1), got {s}")
    if mode == "none":
        lr = base_lr
    elif mode == "global":
        lr = base_lr / (1.0 - overall_sparsity)
    elif mode == "per-param":
        lr = base_lr / (1.0 - param_sparsity)
    else:
        raise ValueError(f"unknown lr scale mode {mode!r}")
    if max_lr is not None:
        lr = min(lr, max_lr)
    return lr


def swap_mask(model: Model, old: Mask, new: Mask, restore_mode: str = "zeros",
              initial: Mapping[str, np.ndarray] | None = None) -> list[tuple[str, int]]:
    """Move ``model`` from ``old`` to the sparser-or-equal-density ``new`` mask.

    Newly activated entries (old 0, new 1) become 0.0 or their value in
    ``initial``; everything else is untouched.  Returns the activated
    ``(param, flat index)`` pairs.
    """
    if restore_mode not in ("zeros", "initial"):
        raise ValueError(f"unknown restore mode {restore_mode!r}")
    if restore_mode == "initial" and initial is None:
        raise ValueError("restore mode 'initial' needs an initial-weights snapshot")
    activated = []
    for name in sorted(set(old.masks) | set(new.masks)):
        o = old.masks.get(name)
        n = new.masks.get(name)
        o_zero = np.zeros(0, bool) if o is None else (o.ravel() == 0)
        n_zero = np.zeros(0, bool) if n is None else (n.ravel() == 0)
        if n is not None and n_zero.any() and (o is None or np.any(n_zero & ~o_zero)):
            raise ValueError(f"masks are not nested: {name} gains pruned entries in the new mask")
        if o is None:
            continue
        fresh = o_zero & ~n_zero if n is not None else o_zero
        idx = np.flatnonzero(fresh)
        if idx.size == 0:
            continue
        flat = model.params[name].value.reshape(-1)
        flat[idx] = 0.0 if restore_mode == "zeros" else np.asarray(initial[name]).reshape(-1)[idx]
        activated.extend((name, int(i)) for i in idx)
    return activated


@dataclass(frozen=True)
class SniperConfig:
    """Options for decaying-sparsity training: LR scaling, per-parameter cap, exclusions, restore mode."""

    lr_scale_mode: str = "per-param"
    max_lr: float | None = None
    max_param_sparsity: float = 0.75
    exclude_patterns: tuple[str, ...] = ()
    restore_mode: str = "zeros"
    saliency_subset_fraction: float = 1.0
    saliency_mode: str = "signed"
    seed: int = 0

    def __post_init__(self):
        if self.lr_scale_mode not in LR_MODES:
            raise ValueError(f"lr_scale_mode must be one of {LR_MODES}")
        if self.max_lr is not None and self.max_lr <= 0:
            raise ValueError("max_lr must be positive")
        if not 0.0 < self.max_param_sparsity <= 1.0:
            raise ValueError("max_param_sparsity must lie in (0, 1]")
        if not 0.0 < self.saliency_subset_fraction <= 1.0:
            raise ValueError("saliency_subset_fraction must lie in (0, 1]")
        if self.restore_mode not in ("zeros", "initial"):
            raise ValueError("restore_mode must be 'zeros' or 'initial'")
        if self.saliency_mode not in ("signed", "abs"):
            raise ValueError("saliency_mode must be 'signed' or 'abs'")
        object.__setattr__(self, "exclude_patterns", tuple(self.exclude_patterns))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["exclude_patterns"] = list(self.exclude_patterns)
        return d


class ConfigError(ValueError):
    def __init__(self, path, lineno: int | None, message: str):
        self.lineno = lineno
        where = f"{path}:{lineno}" if lineno else str(path)
        super().__init__(f"{where}: {message}")


def parse_kv(text: str, source: str = "<config>") -> dict[str, tuple[str, int]]:
    """Flat ``key = value`` lines; ``#`` comments. Returns key -> (raw value, line)."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(source, lineno, f"expected key = value, got {line!r}")
        if key in out:
            raise ConfigError(source, lineno, f"duplicate key {key!r}")
        out[key] = (value.strip(), lineno)
    return out


def coerce_fields(cls, raw: dict[str, tuple[str, int]], source: str = "<config>", strict: bool = True):
    """Build dataclass ``cls`` from :func:`parse_kv` output, converting by field type."""
    kinds = {f.name: f.type for f in fields(cls)}
    kwargs = {}
    for key, (value, lineno) in raw.items():
        if key not in kinds:
            if strict:
                raise ConfigError(source, lineno, f"unknown key {key!r}")
            continue
        kind = str(kinds[key])
        try:
            if "tuple" in kind:
                kwargs[key] = tuple(v.strip() for v in value.split(",") if v.strip())
            elif value.lower() in ("none", "") and "None" in kind:
                kwargs[key] = None
            elif kind.startswith("int"):
                kwargs[key] = int(value)
            elif kind.startswith("float"):
                kwargs[key] = float(value)
            elif kind.startswith("bool"):
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(f"not a boolean: {value!r}")
                kwargs[key] = value.lower() in ("true", "1", "yes")
            else:
                kwargs[key] = value
        except ValueError as exc:
            raise ConfigError(source, lineno, f"{key}: {exc}") from None
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(source, None, str(exc)) from None


def load_sniper_config(text: str, source: str = "<config>") -> SniperConfig:
    return coerce_fields(SniperConfig, parse_kv(text, source), source)


def dump_config(obj) -> str:
    lines = []
    for f in fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, (tuple, list)):
            v = ",".join(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
