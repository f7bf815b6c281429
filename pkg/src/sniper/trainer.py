"""Deterministic masked training with epoch-boundary mask swaps and resume.

Each step runs forward with ``mask * weight``, backward, zeroes the
gradients of pruned entries, applies the optimizer on active entries only
and re-zeroes pruned weights.  Optimizer moments of pruned entries are
frozen while pruned and kept as-is when the entry comes back, unless
``reset_moments_on_activate`` is set.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autograd as ag
from .models import Dataset, Model, batch_loss, dataset_loss, named_leaves
from .pruning import Mask, is_nested
from .schedule import SniperConfig, SparsitySchedule, lr_scale, swap_mask
from .tensorio import read_container, write_container

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SNPRCKP\x00"
CSV_COLUMNS = ("epoch", "sparsity", "train_loss", "val_loss", "wall_seconds")


class FingerprintError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    reset_moments_on_activate: bool = False
    debug: bool = False

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


class Optimizer:
    """SGD or Adam over named numpy params, restricted to active entries."""

    def __init__(self, kind: str, params: Mapping, beta1=0.9, beta2=0.999, eps=1e-8):
        self.kind = kind
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.value) for n, p in params.items()} if kind == "adam" else {}
        self.v = {n: np.zeros_like(p.value) for n, p in params.items()} if kind == "adam" else {}

    def step(self, params: Mapping, grads: Mapping[str, np.ndarray], lrs: Mapping[str, float],
             active: Mapping[str, np.ndarray] | None = None) -> None:
        self.t += 1
        active = active or {}
        if self.kind == "adam":
            c1 = 1.0 - self.beta1 ** self.t
            c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            keep = active.get(name)
            if self.kind == "sgd":
                new = p.value - lrs[name] * g
            else:
                m = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
                v = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
                if keep is not None:
                    m = np.where(keep, m, self.m[name])
                    v = np.where(keep, v, self.v[name])
                self.m[name], self.v[name] = m, v
                new = p.value - lrs[name] * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.value = new if keep is None else np.where(keep, new, p.value)


@dataclass
class EpochRow:
    epoch: int
    sparsity: float
    train_loss: float
    val_loss: float
    wall_seconds: float = 0.0


@dataclass
class ExperimentResult:
    rows: list[EpochRow] = field(default_factory=list)

    @property
    def final_train(self) -> float:
        return self.rows[-1].train_loss

    @property
    def final_val(self) -> float:
        return self.rows[-1].val_loss

    @property
    def best_val(self) -> float:
        return min(r.val_loss for r in self.rows)

    def to_csv(self, path, timing: bool = True) -> None:
        cols = CSV_COLUMNS if timing else CSV_COLUMNS[:-1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.rows:
                w.writerow([repr(getattr(r, c)) for c in cols])

    @classmethod
    def from_csv(cls, path) -> "ExperimentResult":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise ValueError(f"{path}: empty CSV")
        header = rows[0]
        need = CSV_COLUMNS[:4]
        if any(c not in header for c in need):
            raise ValueError(f"{path}:1: header must contain {list(need)}, got {header}")
        col = {c: header.index(c) for c in header}
        out = []
        for lineno, row in enumerate(rows[1:], start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                out.append(EpochRow(int(row[col["epoch"]]), float(row[col["sparsity"]]),
                                    float(row[col["train_loss"]]), float(row[col["val_loss"]]),
                                    float(row[col["wall_seconds"]]) if "wall_seconds" in col else 0.0))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
        return cls(out)


def dense_mask(model: Model) -> Mask:
    return Mask({n: np.ones(model.params[n].value.shape, dtype=np.uint8) for n in model.maskable_names()},
                0.0, 0.0, 1.0)


def _key(s: float) -> float:
    return round(float(s), 10)


class Trainer:
    """Owns one training run: model, optimizer, schedule position and results.

    With ``schedule=None`` the loop builds no mask nodes at all; this is the
    plain dense reference loop.
    """

    def __init__(self, model: Model, train_data: Dataset, val_data: Dataset,
                 schedule: SparsitySchedule | None = None, masks: Mapping[float, Mask] | None = None,
                 config: TrainConfig = TrainConfig(), sniper: SniperConfig = SniperConfig(),
                 initial: Mapping[str, np.ndarray] | None = None):
        self.model = model
        self.train_data = train_data
        self.val_data = val_data
        self.schedule = schedule
        self.config = config
        self.sniper = sniper
        self.initial = {k: np.array(v, copy=True) for k, v in (initial or model.state()).items()}
        self.masks = {_key(s): m for s, m in (masks or {}).items()}
        if schedule is not None:
            missing = [s for s in schedule.sparsities if s > 0 and _key(s) not in self.masks]
            if missing:
                raise KeyError(f"no mask supplied for scheduled sparsities {missing}")
            self.masks.setdefault(0.0, dense_mask(model))
            seq = [self.masks[_key(s)] for s in schedule.sparsities]
            for hi, lo in zip(seq, seq[1:]):
                if not is_nested(lo, hi):
                    raise ValueError("scheduled masks are not nested")
        self.optimizer = Optimizer(config.optimizer, model.params, config.beta1, config.beta2, config.eps)
        self.epoch = 0
        self.global_step = 0
        self.step_index: int | None = None
        self.result = ExperimentResult()
        self._lrs: dict[str, float] = {}
        self._active: dict[str, np.ndarray] = {}
        self._mask_floats: dict[str, np.ndarray] | None = None

    @property
    def current_mask(self) -> Mask | None:
        if self.schedule is None or self.step_index is None:
            return None
        return self.masks[_key(self.schedule.steps[self.step_index][1])]

    def fingerprint(self) -> str:
        mask_digest = hashlib.sha256()
        for s in sorted(self.masks):
            for name in sorted(self.masks[s].masks):
                mask_digest.update(f"{s}:{name}".encode())
                mask_digest.update(np.ascontiguousarray(self.masks[s].masks[name], dtype=np.uint8).tobytes())
        blob = json.dumps({
            "train": self.train_data.fingerprint(),
            "val": self.val_data.fingerprint(),
            "batch_size": self.train_data.batch_size,
            "architecture": self.model.architecture(),
            "schedule": None if self.schedule is None else str(self.schedule),
            "config": asdict(self.config) | {"debug": None},
            "sniper": self.sniper.to_dict(),
            "masks": mask_digest.hexdigest(),
        }, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:24]

    def _enter_step(self, index: int) -> None:
        new = self.masks[_key(self.schedule.steps[index][1])]
        if self.step_index is None:
            for name, m in new.masks.items():
                p = self.model.params[name]
                p.value = np.where(m != 0, p.value, 0.0)
        else:
            activated = swap_mask(self.model, self.current_mask, new, self.sniper.restore_mode, self.initial)
            if self.config.reset_moments_on_activate and self.optimizer.kind == "adam":
                for name, i in activated:
                    self.optimizer.m[name].reshape(-1)[i] = 0.0
                    self.optimizer.v[name].reshape(-1)[i] = 0.0
            log.info("epoch %d: sparsity %s -> %s, %d weights reactivated", self.epoch + 1,
                     self.schedule.steps[self.step_index][1], self.schedule.steps[index][1], len(activated))
        self.step_index = index
        self._refresh_mask_cache()

    def _refresh_mask_cache(self) -> None:
        mask = self.current_mask
        mode, base, max_lr = self.sniper.lr_scale_mode, self.config.lr, self.sniper.max_lr
        if mask is None:
            self._lrs = {n: lr_scale(0.0, 0.0, mode, base, max_lr) for n in self.model.params}
            self._active, self._mask_floats = {}, None
            return
        self._lrs = {n: lr_scale(mask.param_sparsity(n), mask.achieved_sparsity, mode, base, max_lr)
                     for n in self.model.params}
        self._active = {n: m != 0 for n, m in mask.masks.items()}
        self._mask_floats = mask.as_float()

    def _train_step(self, batch) -> float:
        loss = batch_loss(self.model, batch, self._mask_floats)
        value = float(ag.evaluate(loss))
        ag.backward(loss)
        leaves = named_leaves(loss)
        grads = {n: leaves[n].grad for n in self.model.params}
        for n, keep in self._active.items():
            if self.config.debug:
                assert not np.any(grads[n][~keep]), f"non-zero gradient on pruned entries of {n}"
            grads[n] = np.where(keep, grads[n], 0.0)
        self.optimizer.step(self.model.params, grads, self._lrs, self._active)
        self.global_step += 1
        return value

    def train_epoch(self) -> EpochRow:
        epoch = self.epoch + 1
        start = time.perf_counter()
        if self.schedule is not None:
            index = self.schedule.step_index(epoch)
            if index != self.step_index:
                self._enter_step(index)
        elif not self._lrs:
            self._refresh_mask_cache()
        total = 0.0
        for batch in self.train_data.batches(epoch):
            total += self._train_step(batch) * len(batch)
        train_loss = total / len(self.train_data)
        val_loss = dataset_loss(self.model, self.val_data, self._mask_floats)
        sparsity = 0.0 if self.schedule is None else self.schedule.steps[self.step_index][1]
        self.epoch = epoch
        row = EpochRow(epoch, sparsity, train_loss, val_loss, time.perf_counter() - start)
        self.result.rows.append(row)
        log.debug("epoch %d sparsity %.3f train %.6g val %.6g", epoch, sparsity, train_loss, val_loss)
        return row

    def run(self, epochs: int, checkpoint_dir=None, checkpoint_epochs=()) -> ExperimentResult:
        """Train until ``epochs`` epochs are complete, saving checkpoints on request."""
        wanted = set(checkpoint_epochs)
        while self.epoch < epochs:
            self.train_epoch()
            if checkpoint_dir is not None and self.epoch in wanted:
                Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                self.save_checkpoint(Path(checkpoint_dir) / f"epoch{self.epoch:04d}.ckpt")
        return self.result

    def save_checkpoint(self, path) -> None:
        tensors = {}
        for name, p in self.model.params.items():
            tensors[f"param/{name}"] = p.value
            tensors[f"initial/{name}"] = self.initial[name]
            if self.optimizer.kind == "adam":
                tensors[f"adam_m/{name}"] = self.optimizer.m[name]
                tensors[f"adam_v/{name}"] = self.optimizer.v[name]
        meta = {
            "epoch": self.epoch,
            "global_step": self.global_step,
            "optimizer_t": self.optimizer.t,
            "step_index": self.step_index,
            "fingerprint": self.fingerprint(),
            # batch order is a pure function of (seed, epoch); this is the whole rng state
            "rng": {"kind": "per-epoch-seeded", "seed": self.train_data.seed, "next_epoch": self.epoch + 1},
            "rows": [asdict(r) for r in self.result.rows],
        }
        write_container(path, CHECKPOINT_MAGIC, meta, tensors)

    @classmethod
    def resume(cls, path, model: Model, train_data: Dataset, val_data: Dataset,
               schedule: SparsitySchedule | None = None, masks: Mapping[float, Mask] | None = None,
               config: TrainConfig = TrainConfig(), sniper: SniperConfig = SniperConfig()) -> "Trainer":
        """Rebuild a trainer from ``path``; refuses if the run configuration differs."""
        meta, tensors = read_container(path, CHECKPOINT_MAGIC)
        initial = {k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("initial/")}
        trainer = cls(model, train_data, val_data, schedule, masks, config, sniper, initial=initial)
        if trainer.fingerprint() != meta["fingerprint"]:
            raise FingerprintError(f"{path}: config fingerprint {meta['fingerprint']} does not match "
                                   f"this run ({trainer.fingerprint()}); refusing to resume")
        model.load_state({k.split("/", 1)[1]: v for k, v in tensors.items() if k.startswith("param/")})
        if trainer.optimizer.kind == "adam":
            trainer.optimizer.m = {n: tensors[f"adam_m/{n}"] for n in model.params}
            trainer.optimizer.v = {n: tensors[f"adam_v/{n}"] for n in model.params}
        trainer.optimizer.t = meta["optimizer_t"]
        trainer.epoch = meta["epoch"]
        trainer.global_step = meta["global_step"]
        trainer.step_index = meta["step_index"]
        trainer.result = ExperimentResult([EpochRow(**r) for r in meta["rows"]])
        if trainer.step_index is not None or schedule is None:
            trainer._refresh_mask_cache()
        return trainer


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Raw checkpoint contents (metadata, named tensors)."""
    return read_container(path, CHECKPOINT_MAGIC)


def train(model: Model, train_data: Dataset, val_data: Dataset, schedule: SparsitySchedule | None,
          masks: Mapping[float, Mask] | None, config: TrainConfig = TrainConfig(),
          sniper: SniperConfig = SniperConfig(), epochs: int = 1, *, checkpoint_dir=None,
          checkpoint_epochs=(), initial=None) -> ExperimentResult:
    trainer = Trainer(model, train_data, val_data, schedule, masks, config, sniper, initial)
    return trainer.run(epochs, checkpoint_dir, checkpoint_epochs)
