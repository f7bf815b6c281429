"""Named-parameter MLPs and synthetic teacher-student regression data."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from . import autograd as ag

ACTIVATIONS = {"relu": ag.relu, "tanh": ag.tanh}


@dataclass
class Param:
    name: str
    value: np.ndarray
    maskable: bool = True

    @property
    def size(self) -> int:
        return int(self.value.size)


@dataclass
class Model:
    """An MLP with parameters stored in declaration order.

    Layer ``i`` (1-based) owns ``layer{i}.weight`` of shape ``(out, in)`` and
    ``layer{i}.bias`` of shape ``(out,)``.  The activation is applied after
    every layer except the last.
    """

    layer_sizes: tuple[int, ...]
    activation: str
    params: dict[str, Param] = field(default_factory=dict)

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def d_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def d_out(self) -> int:
        return self.layer_sizes[-1]

    def maskable_names(self) -> list[str]:
        return [p.name for p in self.params.values() if p.maskable]

    def maskable_count(self) -> int:
        return sum(p.size for p in self.params.values() if p.maskable)

    def total_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        """Copy of all parameter values, keyed by name."""
        return {name: p.value.copy() for name, p in self.params.items()}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        unknown = set(state) - set(self.params)
        if missing or unknown:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unknown={sorted(unknown)}")
        for name, value in state.items():
            p = self.params[name]
            value = np.asarray(value, dtype=np.float64)
            if value.shape != p.value.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.value.shape}")
            p.value = value.copy()

    def architecture(self) -> dict:
        return {"layer_sizes": list(self.layer_sizes), "activation": self.activation}

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        """Plain numpy forward pass (no graph)."""
        h = np.asarray(inputs, dtype=np.float64)
        act = {"relu": lambda z: np.maximum(z, 0.0), "tanh": np.tanh}[self.activation]
        for i in range(1, self.n_layers + 1):
            h = h @ self.params[f"layer{i}.weight"].value.T + self.params[f"layer{i}.bias"].value
            if i < self.n_layers:
                h = act(h)
        return h


def build_mlp(layer_sizes, activation: str = "relu", seed=0) -> Model:
    """Xavier-initialised MLP; weights are maskable, biases start at zero and are not."""
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2:
        raise ValueError("an MLP needs at least 2 layer sizes")
    if any(s <= 0 for s in sizes):
        raise ValueError(f"layer sizes must be positive, got {list(sizes)}")
    model = Model(sizes, activation)
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    seeds = root.spawn(len(sizes) - 1)
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
        w = ag.xavier_init((fan_out, fan_in), seeds[i - 1])
        model.params[f"layer{i}.weight"] = Param(f"layer{i}.weight", w, maskable=True)
        model.params[f"layer{i}.bias"] = Param(f"layer{i}.bias", np.zeros(fan_out), maskable=False)
    return model


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return self.inputs.shape[0]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable regression data with a seeded batch order.

    ``batch_order(epoch)`` depends only on ``(seed, epoch)``, so any epoch's
    batches can be reproduced without replaying earlier ones.
    """

    inputs: np.ndarray
    targets: np.ndarray
    batch_size: int = 32
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        x = np.ascontiguousarray(self.inputs, dtype=np.float64)
        y = np.ascontiguousarray(self.targets, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
        if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
            raise ValueError(f"inputs {x.shape} and targets {y.shape} do not pair up")
        if x.shape[0] < 1:
            raise ValueError("dataset is empty")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def d_in(self) -> int:
        return self.inputs.shape[1]

    @property
    def d_out(self) -> int:
        return self.targets.shape[1]

    @property
    def n_batches(self) -> int:
        return math.ceil(len(self) / self.batch_size)

    def batch_order(self, epoch: int = 1) -> np.ndarray:
        if not self.shuffle:
            return np.arange(len(self))
        return np.random.default_rng([self.seed, epoch]).permutation(len(self))

    def batches(self, epoch: int = 1) -> Iterator[Batch]:
        order = self.batch_order(epoch)
        for start in range(0, len(self), self.batch_size):
            idx = order[start:start + self.batch_size]
            yield Batch(self.inputs[idx], self.targets[idx])

    def full_batch(self) -> Batch:
        return Batch(self.inputs, self.targets)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.inputs.tobytes())
        h.update(self.targets.tobytes())
        h.update(repr((self.inputs.shape, self.targets.shape, self.batch_size, self.seed, self.shuffle)).encode())
        return h.hexdigest()[:16]

    def with_batch_size(self, batch_size: int) -> "Dataset":
        return Dataset(self.inputs, self.targets, batch_size, self.seed, self.shuffle)

    def split(self, val_fraction: float, seed: int | None = None) -> tuple["Dataset", "Dataset"]:
        """Disjoint (train, val) split by a seeded permutation of sample indices."""
        if not 0.0 < val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        n_val = int(round(val_fraction * len(self)))
        if n_val < 1 or n_val >= len(self):
            raise ValueError(f"val_fraction {val_fraction} leaves an empty split of {len(self)} samples")
        perm = np.random.default_rng(self.seed if seed is None else seed).permutation(len(self))
        val_idx, train_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
        make = lambda idx: Dataset(self.inputs[idx], self.targets[idx], self.batch_size, self.seed, self.shuffle)
        return make(train_idx), make(val_idx)

    def to_csv(self, path) -> None:
        """Write ``x0..x{d-1},y0..`` columns, one sample per line, floats in repr form."""
        header = [f"x{i}" for i in range(self.d_in)] + [f"y{i}" for i in range(self.d_out)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for x, y in zip(self.inputs, self.targets):
                w.writerow([repr(float(v)) for v in x] + [repr(float(v)) for v in y])

    @classmethod
    def from_csv(cls, path, batch_size: int = 32, seed: int = 0, shuffle: bool = True) -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise ValueError(f"{path}: empty file")
        header = rows[0]
        xcols = [i for i, h in enumerate(header) if h.startswith("x")]
        ycols = [i for i, h in enumerate(header) if h.startswith("y")]
        if not xcols or not ycols or len(xcols) + len(ycols) != len(header):
            raise ValueError(f"{path}: header must be x0..,y0.. columns, got {header}")
        data = []
        for lineno, row in enumerate(rows[1:], start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                data.append([float(v) for v in row])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
        arr = np.array(data, dtype=np.float64).reshape(-1, len(header))
        return cls(arr[:, xcols], arr[:, ycols], batch_size, seed, shuffle)


@dataclass(frozen=True)
class TaskConfig:
    """Teacher-student task parameters."""

    d_in: int = 16
    teacher_hidden: int = 8
    student_hidden: int = 64
    n: int = 1000
    noise_std: float = 0.05
    activation: str = "tanh"
    batch_size: int = 32
    val_fraction: float = 0.2


def make_teacher(d_in: int, hidden: int, seed: int = 0, activation: str = "tanh") -> Model:
    """The frozen teacher used by :func:`make_teacher_student` for the same seed."""
    teacher = build_mlp([d_in, hidden, 1], activation, np.random.SeedSequence(seed).spawn(4)[0])
    # plain Xavier readout gives targets with tiny spread; rescale to O(1)
    teacher.params["layer2.weight"].value = teacher.params["layer2.weight"].value * math.sqrt(hidden)
    return teacher


def make_teacher_student(d_in: int, teacher_hidden: int, student_hidden: int, n: int,
                         noise_std: float, seed: int = 0, *, activation: str = "tanh",
                         batch_size: int = 32, allow_equal: bool = False) -> tuple[Dataset, Model]:
    """Targets from a frozen random teacher MLP plus Gaussian noise.

    Returns the full dataset and an untrained student ``[d_in, student_hidden, 1]``.
    The student must be strictly wider than the teacher unless ``allow_equal``.
    """
    for label, v in (("d_in", d_in), ("teacher_hidden", teacher_hidden),
                     ("student_hidden", student_hidden), ("n", n)):
        if v <= 0:
            raise ValueError(f"{label} must be positive, got {v}")
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    if student_hidden < teacher_hidden or (student_hidden == teacher_hidden and not allow_equal):
        raise ValueError("student must be over-parameterised (student_hidden > teacher_hidden)")
    _, data_seed, noise_seed, student_seed = np.random.SeedSequence(seed).spawn(4)
    teacher = make_teacher(d_in, teacher_hidden, seed, activation)
    x = np.random.default_rng(data_seed).standard_normal((n, d_in))
    y = teacher.predict(x)
    if noise_std > 0:
        y = y + noise_std * np.random.default_rng(noise_seed).standard_normal(y.shape)
    student = build_mlp([d_in, student_hidden, 1], activation, student_seed)
    return Dataset(x, y, batch_size=batch_size, seed=seed), student


def make_task(config: TaskConfig, seed: int) -> tuple[Dataset, Dataset, Model]:
    """Teacher-student data split into (train, val) plus the seeded student."""
    data, student = make_teacher_student(config.d_in, config.teacher_hidden, config.student_hidden,
                                         config.n, config.noise_std, seed,
                                         activation=config.activation, batch_size=config.batch_size)
    train, val = data.split(config.val_fraction)
    return train, val, student


def batch_loss(model: Model, batch: Batch, mask: Mapping[str, np.ndarray] | None = None,
               mask_as_parameter: bool = False) -> ag.Node:
    """MSE loss graph for ``batch``.

    With ``mask``, each masked parameter enters the graph as ``mask * weight``.
    Mask leaves are named ``mask:<param>`` and are parameter nodes when
    ``mask_as_parameter`` is set, so :func:`autograd.backward` reports their
    gradients.  Parameter leaves carry the param name.
    """
    masks = dict(getattr(mask, "masks", mask) or {})
    unknown = set(masks) - set(model.params)
    if unknown:
        raise KeyError(f"mask names unknown params: {sorted(unknown)}")
    if batch.inputs.shape[1:] != (model.d_in,) or batch.targets.shape[1:] != (model.d_out,):
        raise ag.ShapeError("batch_loss", batch.inputs.shape, batch.targets.shape)

    def leaf(name):
        p = model.params[name]
        node = ag.parameter(p.value, name=name)
        if name not in masks:
            return node
        m = masks[name]
        if np.shape(m) != p.value.shape:
            raise ValueError(f"mask for {name} has shape {np.shape(m)}, param has {p.value.shape}")
        make = ag.parameter if mask_as_parameter else ag.constant
        return ag.mul(make(np.asarray(m, dtype=np.float64), name=f"mask:{name}"), node)

    act = ACTIVATIONS[model.activation]
    h = ag.constant(batch.inputs)
    for i in range(1, model.n_layers + 1):
        h = ag.add(ag.matmul(h, leaf(f"layer{i}.weight"), transpose_b=True), leaf(f"layer{i}.bias"))
        if i < model.n_layers:
            h = act(h)
    return ag.mse_loss(h, ag.constant(batch.targets))


def named_leaves(root: ag.Node) -> dict[str, ag.Node]:
    """Parameter leaves of a loss graph keyed by node name."""
    return {n.name: n for n in ag.leaves(root, "parameter") if n.name is not None}


def dataset_loss(model: Model, data: Dataset, mask=None) -> float:
    """Mean squared error over the whole dataset (single graph, no backward)."""
    return float(ag.evaluate(batch_loss(model, data.full_batch(), mask)))
