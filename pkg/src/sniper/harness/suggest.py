"""Derive a decaying schedule from where constant-sparsity loss overtakes dense loss."""

from __future__ import annotations

from ..schedule import SparsitySchedule
from ..trainer import ExperimentResult


class NoCrossingError(ValueError):
    def __init__(self, horizon: int):
        self.horizon = horizon
        super().__init__(f"no crossing within {horizon} epochs; keep constant sparsity")


def crossing_epoch(constant: ExperimentResult, baseline: ExperimentResult, loss: str = "train") -> int | None:
    """First epoch where the sparse run's loss is strictly above the dense run's."""
    if loss not in ("train", "val"):
        raise ValueError("loss must be 'train' or 'val'")
    c_epochs = [r.epoch for r in constant.rows]
    if c_epochs != [r.epoch for r in baseline.rows]:
        raise ValueError("constant and baseline runs cover different epochs")
    attr = f"{loss}_loss"
    for c, b in zip(constant.rows, baseline.rows):
        if getattr(c, attr) > getattr(b, attr):
            return c.epoch
    return None


def halving_schedule(initial: float, first_drop: int, policy: str = "doubling", floor: float = 0.1) -> SparsitySchedule:
    """Halve ``initial`` at ``first_drop`` and onwards until it falls below ``floor``, then 0.

    With phase length ``L = first_drop - 1``, the ``"doubling"`` policy drops at
    epochs ``1 + L, 1 + 2L, 1 + 4L, ...`` (phase lengths L, L, 2L, ...);
    ``"repeat"`` drops every ``L`` epochs.
    """
    if first_drop < 2:
        raise ValueError("first reduction must come after epoch 1")
    if policy not in ("doubling", "repeat"):
        raise ValueError(f"unknown halving policy {policy!r}")
    if initial <= 0:
        return SparsitySchedule.constant(0.0)
    phase = first_drop - 1
    steps = [(1, initial)]
    s, start, k = initial, first_drop, 0
    while s > 0:
        s = s / 2
        if s < floor - 1e-12:
            s = 0.0
        steps.append((start, s))
        k += 1
        start = 1 + phase * 2 ** k if policy == "doubling" else start + phase
    return SparsitySchedule(tuple(steps))


def suggest_schedule(constant: ExperimentResult, baseline: ExperimentResult, policy: str = "doubling",
                     loss: str = "train", floor: float = 0.1) -> SparsitySchedule:
    """Schedule starting at the constant run's sparsity and decaying from its loss crossing.

    Raises :class:`NoCrossingError` if the sparse run never loses to the dense one.
    A crossing at epoch 1 moves the first reduction to epoch 2.
    """
    if not constant.rows:
        raise ValueError("constant run has no epochs")
    epoch = crossing_epoch(constant, baseline, loss)
    if epoch is None:
        raise NoCrossingError(len(constant.rows))
    return halving_schedule(constant.rows[0].sparsity, max(epoch, 2), policy, floor)
