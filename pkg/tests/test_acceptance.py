"""End-to-end acceptance checks, one test per criterion.

Each test tags itself with ``record_property("criterion", ...)``; conftest
prints a one-line PASS/FAIL summary per criterion at the end of the run.
"""

import math
import time

import numpy as np
import pytest

from oracles import brute_force_mask, mlp_weight_grads, snip_oracle
from sniper import autograd as ag
from sniper.harness import ComparisonSpec, run_comparison, suggest_schedule
from sniper.models import TaskConfig, batch_loss, build_mlp, dataset_loss, make_task, named_leaves, Dataset
from sniper.pruning import SaliencyMap, compute_saliency, generate_mask, is_nested
from sniper.schedule import SniperConfig, parse_schedule
from sniper.trainer import EpochRow, ExperimentResult, Optimizer, TrainConfig, Trainer, train

DECAY_SCHEDULES = {0.2: "1:0.2, 6:0.1, 11:0.0", 0.4: "1:0.4, 6:0.2, 11:0.1, 21:0.0"}
SEEDS = (0, 1, 2)
EPOCHS = 60


def _oracle_loss(weights, biases, activation, x, t):
    return mlp_weight_grads(weights, biases, activation, x, t)[0]


def _fd(weights, biases, activation, x, t, which, layer, idx, eps=1e-6):
    """Central difference of the independent numpy forward pass.

    Evaluated in extended precision so the difference quotient's roundoff
    (about machine-eps / eps) stays far below the tolerance even for
    gradients near 1e-6.
    """
    ext = np.longdouble
    x, t = x.astype(ext), t.astype(ext)

    def loss_with(delta):
        ws = [w.astype(ext) for w in weights]
        bs = [b.astype(ext) for b in biases]
        (ws if which == "weight" else bs)[layer][idx] += ext(delta)
        return _oracle_loss(ws, bs, activation, x, t)
    return float((loss_with(eps) - loss_with(-eps)) / ext(2 * eps))


def test_gradient_correctness(record_property):
    record_property("criterion", "1 gradient correctness")
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for case in range(50):
        depth = int(rng.integers(1, 4))
        sizes = [int(v) for v in rng.integers(1, 17, size=depth + 1)]
        activation = ("tanh", "relu")[case % 2]
        model = build_mlp(sizes, activation, seed=case)
        # random biases: with all-zero biases a dead ReLU layer puts the next
        # pre-activation exactly on the kink, where differences are meaningless
        for i in range(1, depth + 1):
            model.params[f"layer{i}.bias"].value = rng.standard_normal(sizes[i]) * 0.1
        data = Dataset(rng.standard_normal((8, sizes[0])), rng.standard_normal((8, sizes[-1])), batch_size=8)
        batch = data.full_batch()
        loss = batch_loss(model, batch)
        ag.evaluate(loss)
        ag.backward(loss)
        leaves = named_leaves(loss)
        weights = [model.params[f"layer{i}.weight"].value for i in range(1, depth + 1)]
        biases = [model.params[f"layer{i}.bias"].value for i in range(1, depth + 1)]
        for layer in range(depth):
            for which in ("weight", "bias"):
                grad = leaves[f"layer{layer + 1}.{which}"].grad
                for idx in np.ndindex(grad.shape):
                    fd = _fd(weights, biases, activation, batch.inputs, batch.targets, which, layer, idx)
                    err = abs(grad[idx] - fd) / max(abs(grad[idx]), abs(fd), 1e-6)
                    worst = max(worst, err)
    elapsed = time.perf_counter() - start
    record_property("detail", f"(max rel err {worst:.2e}, {elapsed:.1f}s)")
    assert worst < 1e-5
    assert elapsed < 30


def test_snip_oracle_identity(record_property):
    record_property("criterion", "2 SNIP oracle identity")
    rng = np.random.default_rng(77)
    start = time.perf_counter()
    worst = 0.0
    for case in range(20):
        depth = int(rng.integers(1, 4))
        sizes = [int(v) for v in rng.integers(1, 17, size=depth + 1)]
        model = build_mlp(sizes, ("tanh", "relu")[case % 2], seed=100 + case)
        n = int(rng.integers(5, 80))
        data = Dataset(rng.standard_normal((n, sizes[0])), rng.standard_normal((n, sizes[-1])),
                       batch_size=int(rng.integers(1, 20)), seed=case)
        got = compute_saliency(model, data, seed=data.seed).magnitudes()
        want = snip_oracle(model, data)
        for name in want:
            worst = max(worst, float(np.max(np.abs(got[name] - want[name]))))
    elapsed = time.perf_counter() - start
    record_property("detail", f"(max abs err {worst:.2e}, {elapsed:.1f}s)")
    assert worst <= 1e-10
    assert elapsed < 30


def test_mask_exactness(record_property):
    record_property("criterion", "3 mask exactness")
    rng = np.random.default_rng(5)
    cases = 0
    while cases < 100:
        sal = SaliencyMap({f"p{i}": rng.standard_normal(tuple(rng.integers(1, 12, size=rng.integers(1, 3))))
                           for i in range(rng.integers(1, 5))})
        count = sal.count()
        cap = float(rng.choice([0.75, 0.9, 1.0]))
        limit = sum(math.floor(cap * v.size) for v in sal.scores.values())
        target = float(rng.random() * 0.99)
        if math.floor(target * count + 0.5) > limit:
            continue
        mask = generate_mask(sal, target, cap)
        assert mask.zeros() == math.floor(target * count + 0.5)
        for name, arr in mask.masks.items():
            assert mask.zeros(name) <= math.floor(cap * arr.size)
        cases += 1
        levels = [s for s in (0.4, 0.2, 0.1) if math.floor(s * count + 0.5) <= limit]
        family = [generate_mask(sal, s, cap) for s in levels]
        for hi, lo in zip(family, family[1:]):
            assert is_nested(lo, hi)

    a, b = np.arange(1.0, 5), np.arange(5.0, 9)
    mask = generate_mask(SaliencyMap({"A": a, "B": b}), 0.5, cap=0.75)
    oracle = brute_force_mask({"A": a, "B": b}, 4, 0.75)
    for name in ("A", "B"):
        np.testing.assert_array_equal(mask.masks[name], oracle[name])
    record_property("detail", f"({cases} random cases + capped A/B example)")


@pytest.fixture(scope="module")
def default_task():
    return make_task(TaskConfig(), seed=0)


def test_dense_equivalence(default_task, record_property):
    record_property("criterion", "4 dense equivalence")
    train_data, val_data, student = default_task
    initial = student.state()
    cfg = TrainConfig()
    result = train(student, train_data, val_data, parse_schedule("1:0.0"), {}, cfg, epochs=20)
    scheduled = student.state()

    # the unmasked loop, written directly against autograd and the optimizer
    student.load_state(initial)
    opt = Optimizer(cfg.optimizer, student.params, cfg.beta1, cfg.beta2, cfg.eps)
    rows = []
    for epoch in range(1, 21):
        total = 0.0
        for batch in train_data.batches(epoch):
            loss = batch_loss(student, batch)
            total += float(ag.evaluate(loss)) * len(batch)
            ag.backward(loss)
            leaves = named_leaves(loss)
            opt.step(student.params, {n: leaves[n].grad for n in student.params},
                     {n: cfg.lr for n in student.params})
        rows.append((total / len(train_data), dataset_loss(student, val_data)))
    plain = student.state()
    student.load_state(initial)

    assert [(r.train_loss, r.val_loss) for r in result.rows] == rows
    assert all(scheduled[n].tobytes() == plain[n].tobytes() for n in plain)
    record_property("detail", "(20 epochs, losses and weights bitwise equal)")


def _masks(student, train_data):
    sal = compute_saliency(student, train_data)
    return {s: generate_mask(sal, s, 0.75) for s in (0.4, 0.2, 0.1)}


class SwapRecorder(Trainer):
    """Snapshots the weights immediately after each mask swap."""

    def _enter_step(self, index):
        super()._enter_step(index)
        self.after_swap = getattr(self, "after_swap", [])
        self.after_swap.append(self.model.state())


def test_masked_invariance(default_task, record_property):
    record_property("criterion", "5 masked invariance")
    train_data, val_data, student = default_task
    initial = student.state()
    masks = _masks(student, train_data)

    t = Trainer(student, train_data, val_data, parse_schedule("1:0.4"), masks)
    for epoch in range(1, 21):
        t.run(epoch)
        for name, m in masks[0.4].masks.items():
            assert np.all(student.params[name].value[m == 0] == 0.0), (epoch, name)

    for mode in ("zeros", "initial"):
        student.load_state(initial)
        t = SwapRecorder(student, train_data, val_data, parse_schedule("1:0.4, 3:0.2"), masks,
                         sniper=SniperConfig(restore_mode=mode), initial=initial)
        t.run(3)
        state = t.after_swap[-1]
        for name, hi in masks[0.4].masks.items():
            fresh = (hi == 0) & (masks[0.2].masks[name] != 0)
            want = np.zeros(int(fresh.sum())) if mode == "zeros" else initial[name][fresh]
            assert state[name][fresh].tobytes() == want.tobytes(), (mode, name)
    student.load_state(initial)
    record_property("detail", "(20 boundaries at 0.4; swap 0.4->0.2 in zeros and initial modes)")


def test_resume_equivalence(default_task, tmp_path, record_property):
    record_property("criterion", "6 resume equivalence")
    train_data, val_data, student = default_task
    initial = student.state()
    masks = _masks(student, train_data)
    sched = parse_schedule(DECAY_SCHEDULES[0.4])

    full = Trainer(student, train_data, val_data, sched, masks)
    full.run(20, tmp_path, checkpoint_epochs=[10])
    final = student.state()
    student.load_state(initial)
    resumed = Trainer.resume(tmp_path / "epoch0010.ckpt", student, train_data, val_data, sched, masks)
    resumed.run(20)

    assert all(final[n].tobytes() == student.params[n].value.tobytes() for n in final)
    full.result.to_csv(tmp_path / "full.csv", timing=False)
    resumed.result.to_csv(tmp_path / "resumed.csv", timing=False)
    assert (tmp_path / "full.csv").read_bytes() == (tmp_path / "resumed.csv").read_bytes()
    student.load_state(initial)
    record_property("detail", "(checkpoint at 10 of 20; wall-clock column excluded)")


def _directional_spec():
    return ComparisonSpec(task=TaskConfig(), epochs=EPOCHS, seeds=SEEDS, levels=(0.2, 0.4), schedules=dict(DECAY_SCHEDULES))


@pytest.fixture(scope="module")
def directional_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("directional")
    start = time.perf_counter()
    records, rows = run_comparison(_directional_spec(), out, jobs=len(SEEDS))
    return out, rows, time.perf_counter() - start


@pytest.mark.slow
def test_directional_result(directional_run, record_property):
    record_property("criterion", "7 directional result")
    _, rows, elapsed = directional_run
    cell = {(r["variant"], r["level"]): r for r in rows}
    assert all(r["status"] == "complete" for r in rows)
    wins, notes = 0, []
    for level in ("0.2", "0.4"):
        for metric in ("final_train", "final_val"):
            s = float(cell["sniper", level][f"{metric}_mean"])
            c = float(cell["constant", level][f"{metric}_mean"])
            wins += s <= c
            notes.append(f"{level}/{metric.split('_')[1]} {s:.4f}{'<=' if s <= c else '>'}{c:.4f}")
    base = float(cell["baseline", "0"]["final_val_mean"])
    ratios = [float(cell["sniper", lv]["final_val_mean"]) / base for lv in ("0.2", "0.4")]
    record_property("detail", f"({wins}/4 cells; sniper/baseline val {ratios[0]:.3f}, {ratios[1]:.3f}; "
                              f"{elapsed:.0f}s) " + "; ".join(notes))
    assert wins >= 3
    assert all(r <= 1.05 for r in ratios)
    assert elapsed < 600


def _curve(losses, sparsity):
    return ExperimentResult([EpochRow(e, sparsity, v, v) for e, v in enumerate(losses, start=1)])


def test_schedule_suggestion(tmp_path, record_property):
    record_property("criterion", "8 schedule suggestion")
    baseline = [1.0, 0.7, 0.5, 0.4, 0.33, 0.25, 0.2, 0.17, 0.15, 0.13]
    constant = [0.8, 0.6, 0.45, 0.38, 0.32, 0.28, 0.24, 0.2, 0.18, 0.16]
    _curve(baseline, 0.0).to_csv(tmp_path / "baseline.csv")
    _curve(constant, 0.4).to_csv(tmp_path / "constant.csv")
    sched = suggest_schedule(ExperimentResult.from_csv(tmp_path / "constant.csv"),
                             ExperimentResult.from_csv(tmp_path / "baseline.csv"))
    record_property("detail", f"({sched})")
    assert str(sched) == "1:0.4, 6:0.2, 11:0.1, 21:0.0"


@pytest.mark.slow
def test_determinism(directional_run, tmp_path, record_property):
    record_property("criterion", "9 determinism")
    first, _, _ = directional_run
    run_comparison(_directional_spec(), tmp_path, jobs=len(SEEDS))
    a = (first / "summary.csv").read_bytes()
    b = (tmp_path / "summary.csv").read_bytes()
    record_property("detail", f"(summary.csv {len(a)} bytes)")
    assert a == b
