"""SNIP saliency accumulation and capped, nested mask generation."""

from __future__ import annotations

import fnmatch
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autograd as ag
from .models import Dataset, Model, batch_loss, named_leaves
from .tensorio import read_container, write_container

SALIENCY_MAGIC = b"SNPRSAL\x00"
MASK_MAGIC = b"SNPRMSK\x00"


class InfeasibleSparsityError(ValueError):
    def __init__(self, target: float, max_sparsity: float):
        self.target = target
        self.max_sparsity = max_sparsity
        super().__init__(f"sparsity {target} infeasible under cap; max achievable sparsity is {max_sparsity:.6f}")


@dataclass
class SaliencyMap:
    """Per-parameter accumulated mask gradients.

    ``scores`` hold the raw accumulation: signed sums in ``"signed"`` mode,
    sums of per-batch magnitudes in ``"abs"`` mode.  Ranking always uses the
    magnitude, see :meth:`magnitudes`.
    """

    scores: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def magnitudes(self) -> dict[str, np.ndarray]:
        return {k: np.abs(v) for k, v in self.scores.items()}

    @property
    def names(self) -> list[str]:
        return list(self.scores)

    def count(self) -> int:
        return sum(int(v.size) for v in self.scores.values())


@dataclass
class Mask:
    masks: dict[str, np.ndarray]
    target_sparsity: float
    achieved_sparsity: float
    cap: float
    excluded: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def zeros(self, name: str | None = None) -> int:
        if name is not None:
            return int(self.masks[name].size - np.count_nonzero(self.masks[name]))
        return sum(self.zeros(n) for n in self.masks)

    def param_sparsity(self, name: str) -> float:
        m = self.masks.get(name)
        return 0.0 if m is None else self.zeros(name) / m.size

    def zero_set(self) -> set[tuple[str, int]]:
        out = set()
        for name, m in self.masks.items():
            out.update((name, int(i)) for i in np.flatnonzero(m.ravel() == 0))
        return out

    def as_float(self) -> dict[str, np.ndarray]:
        return {k: v.astype(np.float64) for k, v in self.masks.items()}


def _matches(name: str, patterns: Iterable[str]) -> bool:
    return any(fnmatch.fnmatchcase(name, p) for p in patterns)


def subset_batch_count(n_batches: int, fraction: float) -> int:
    """ceil(fraction * n_batches), guarded against float noise like 0.1 * 30."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"subset fraction must lie in (0, 1], got {fraction}")
    return max(1, math.ceil(round(fraction * n_batches, 9)))


def compute_saliency(model: Model, dataset: Dataset, subset_fraction: float = 1.0, seed: int = 0,
                     *, mode: str = "signed", exclude: Sequence[str] = (),
                     initial_state: Mapping[str, np.ndarray] | None = None) -> SaliencyMap:
    """Accumulate dL/dm at m = 1 over the first batches of a seeded epoch order.

    Only ``ceil(subset_fraction * n_batches)`` batches are consumed.  Model
    weights are left untouched.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if mode not in ("signed", "abs"):
        raise ValueError(f"unknown accumulation mode {mode!r}")
    names = [n for n in model.maskable_names() if not _matches(n, exclude)]
    if not names:
        raise ValueError("model has no maskable parameters to score")
    data = Dataset(dataset.inputs, dataset.targets, dataset.batch_size, seed, dataset.shuffle)
    n_use = subset_batch_count(data.n_batches, subset_fraction)
    ones = {n: np.ones_like(model.params[n].value) for n in names}
    acc = {n: np.zeros_like(model.params[n].value) for n in names}
    for i, batch in enumerate(data.batches(epoch=1)):
        if i == n_use:
            break
        loss = batch_loss(model, batch, ones, mask_as_parameter=True)
        ag.evaluate(loss)
        ag.backward(loss)
        leaves = named_leaves(loss)
        for n in names:
            g = leaves[f"mask:{n}"].grad
            acc[n] = acc[n] + (g if mode == "signed" else np.abs(g))
    meta = {
        "dataset_fingerprint": dataset.fingerprint(),
        "subset_fraction": subset_fraction,
        "seed": seed,
        "mode": mode,
        "batches_used": n_use,
        "batches_total": data.n_batches,
        "full_corpus": n_use == data.n_batches,
        "architecture": model.architecture(),
        "warnings": [],
    }
    if initial_state is not None:
        changed = [n for n, p in model.params.items()
                   if n in initial_state and not np.array_equal(p.value, initial_state[n])]
        if changed:
            meta["warnings"].append(f"model differs from initial snapshot in {changed}")
    return SaliencyMap(acc, meta)


def generate_mask(saliency: SaliencyMap, target: float, cap: float = 1.0,
                  exclude: Sequence[str] = ()) -> Mask:
    """Zero the ``round(target * maskable_count)`` lowest-saliency entries.

    Entries are visited in ascending ``(|saliency|, name, flat index)`` order;
    a parameter already holding ``floor(cap * size)`` zeros is skipped, so its
    share moves on to the next-lowest entries elsewhere.  Because the visiting
    order is fixed, masks from one saliency map are nested across targets.
    Excluded names get all-ones masks and do not count as maskable.
    """
    if not saliency.scores:
        raise ValueError("empty saliency map")
    if not 0.0 <= target < 1.0:
        raise ValueError(f"target sparsity must lie in [0, 1), got {target}")
    if not 0.0 < cap <= 1.0:
        raise ValueError(f"cap must lie in (0, 1], got {cap}")
    mags = saliency.magnitudes()
    names = sorted(mags)
    active = [n for n in names if not _matches(n, exclude)]
    excluded = [n for n in names if n not in active]
    count = sum(mags[n].size for n in active)
    k = math.floor(target * count + 0.5)
    limits = {n: math.floor(cap * mags[n].size) for n in active}
    feasible = sum(limits.values())
    if k > feasible:
        raise InfeasibleSparsityError(target, feasible / count if count else 0.0)

    flat = {n: np.ones(mags[n].size, dtype=np.uint8) for n in names}
    if k > 0:
        scores = np.concatenate([mags[n].ravel() for n in active])
        owner = np.concatenate([np.full(mags[n].size, j) for j, n in enumerate(active)])
        index = np.concatenate([np.arange(mags[n].size) for n in active])
        # names are sorted, so owner id order == lexicographic name order
        order = np.lexsort((index, owner, scores))
        used = dict.fromkeys(active, 0)
        taken = 0
        for pos in order:
            n = active[owner[pos]]
            if used[n] >= limits[n]:
                continue
            flat[n][index[pos]] = 0
            used[n] += 1
            taken += 1
            if taken == k:
                break
    masks = {n: flat[n].reshape(mags[n].shape) for n in saliency.scores}
    return Mask(masks, float(target), k / count if count else 0.0, float(cap), excluded,
                meta={"saliency": dict(saliency.meta)})


def overall_sparsity(mask: Mask, model: Model) -> float:
    """Zeros across masked params over every trainable entry of ``model``."""
    unknown = set(mask.masks) - set(model.params)
    if unknown:
        raise KeyError(f"mask names unknown params: {sorted(unknown)}")
    return mask.zeros() / model.total_count()


def _check_against(model: Model | None, tensors: Mapping[str, np.ndarray], what: str) -> None:
    if model is None:
        return
    unknown = sorted(set(tensors) - set(model.params))
    if unknown:
        raise KeyError(f"{what} file has unknown param names: {unknown}")
    for name, arr in tensors.items():
        want = model.params[name].value.shape
        if arr.shape != want:
            raise ValueError(f"{what} file: shape mismatch for {name}: {arr.shape} vs model {want}")


def save_saliency(saliency: SaliencyMap, path) -> None:
    write_container(path, SALIENCY_MAGIC, saliency.meta, saliency.scores)


def load_saliency(path, model: Model | None = None) -> SaliencyMap:
    meta, tensors = read_container(path, SALIENCY_MAGIC)
    _check_against(model, tensors, "saliency")
    return SaliencyMap(tensors, meta)


def save_mask(mask: Mask, path) -> None:
    meta = {"target_sparsity": mask.target_sparsity, "achieved_sparsity": mask.achieved_sparsity,
            "cap": mask.cap, "excluded": list(mask.excluded), "extra": mask.meta}
    write_container(path, MASK_MAGIC, meta, {k: v.astype(np.uint8) for k, v in mask.masks.items()})


def load_mask(path, model: Model | None = None) -> Mask:
    meta, tensors = read_container(path, MASK_MAGIC)
    _check_against(model, tensors, "mask")
    for name, arr in tensors.items():
        if arr.size and arr.max() > 1:
            raise ValueError(f"mask file: non-binary entries in {name}")
    return Mask(tensors, meta["target_sparsity"], meta["achieved_sparsity"], meta["cap"],
                list(meta["excluded"]), meta.get("extra", {}))


def is_nested(lower: Mask, higher: Mask) -> bool:
    """True if every zero of ``lower`` is also a zero of ``higher``."""
    for name, m in lower.masks.items():
        other = higher.masks.get(name)
        if other is None:
            if not m.all():
                return False
            continue
        if np.any((m == 0) & (other != 0)):
            return False
    return True
