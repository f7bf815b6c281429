import numpy as np
import pytest

from sniper import autograd as ag
from sniper.models import TaskConfig, batch_loss, dataset_loss, make_task, named_leaves
from sniper.pruning import SaliencyMap, compute_saliency, generate_mask
from sniper.schedule import SniperConfig, parse_schedule
from sniper.trainer import (ExperimentResult, FingerprintError, Optimizer, TrainConfig, Trainer,
                            load_checkpoint, train)

TASK = TaskConfig(d_in=6, teacher_hidden=3, student_hidden=16, n=160, noise_std=0.05, batch_size=16)


@pytest.fixture
def setup():
    train_data, val_data, student = make_task(TASK, seed=5)
    sal = compute_saliency(student, train_data)
    masks = {s: generate_mask(sal, s, 0.75) for s in (0.4, 0.2, 0.1)}
    return train_data, val_data, student, masks


def reference_dense_loop(model, train_data, val_data, config, epochs):
    """Unmasked loop written against autograd + Optimizer only."""
    opt = Optimizer(config.optimizer, model.params, config.beta1, config.beta2, config.eps)
    rows = []
    for epoch in range(1, epochs + 1):
        total = 0.0
        for batch in train_data.batches(epoch):
            loss = batch_loss(model, batch)
            total += float(ag.evaluate(loss)) * len(batch)
            ag.backward(loss)
            leaves = named_leaves(loss)
            opt.step(model.params, {n: leaves[n].grad for n in model.params}, {n: config.lr for n in model.params})
        rows.append((total / len(train_data), dataset_loss(model, val_data)))
    return rows


@pytest.mark.parametrize("optimizer", ["adam", "sgd"])
def test_dense_schedule_matches_plain_loop_bitwise(setup, optimizer):
    train_data, val_data, student, _ = setup
    initial = student.state()
    cfg = TrainConfig(optimizer=optimizer, lr=0.01)
    result = train(student, train_data, val_data, parse_schedule("1:0.0"), {}, cfg, epochs=5)
    masked_weights = student.state()
    student.load_state(initial)
    ref = reference_dense_loop(student, train_data, val_data, cfg, 5)
    assert [(r.train_loss, r.val_loss) for r in result.rows] == ref
    for name, value in masked_weights.items():
        assert value.tobytes() == student.params[name].value.tobytes()


def test_schedule_none_is_the_plain_loop(setup):
    train_data, val_data, student, _ = setup
    initial = student.state()
    a = train(student, train_data, val_data, None, None, epochs=3)
    student.load_state(initial)
    b = train(student, train_data, val_data, parse_schedule("1:0.0"), None, epochs=3)
    assert [(r.train_loss, r.val_loss) for r in a.rows] == [(r.train_loss, r.val_loss) for r in b.rows]


class StepWatcher(Trainer):
    """Checks pruned weights after every optimizer step."""

    violations = 0

    def _train_step(self, batch):
        value = super()._train_step(batch)
        mask = self.current_mask
        for name, m in mask.masks.items():
            if np.any(self.model.params[name].value[m == 0] != 0.0):
                self.violations += 1
        return value


def test_constant_sparsity_keeps_pruned_weights_zero(setup):
    train_data, val_data, student, masks = setup
    t = StepWatcher(student, train_data, val_data, parse_schedule("1:0.4"), masks, TrainConfig(debug=True))
    t.run(4)
    assert t.violations == 0
    assert t.global_step == 4 * train_data.n_batches


def test_sgd_pruned_entries_stay_zero(setup):
    train_data, val_data, student, masks = setup
    t = StepWatcher(student, train_data, val_data, parse_schedule("1:0.4"), masks, TrainConfig("sgd", 0.05))
    t.run(2)
    assert t.violations == 0


@pytest.mark.parametrize("mode", ["zeros", "initial"])
def test_swap_at_epoch_boundary(setup, mode):
    train_data, val_data, student, masks = setup
    initial = student.state()
    t = Trainer(student, train_data, val_data, parse_schedule("1:0.4, 3:0.2"), masks,
                sniper=SniperConfig(restore_mode=mode))
    t.run(2)
    hi, lo = masks[0.4], masks[0.2]
    t._enter_step(1)
    for name in hi.masks:
        fresh = (hi.masks[name] == 0) & (lo.masks[name] != 0)
        got = student.params[name].value[fresh]
        want = np.zeros_like(got) if mode == "zeros" else initial[name][fresh]
        assert got.tobytes() == want.tobytes()


def test_moments_frozen_while_pruned(setup):
    train_data, val_data, student, masks = setup
    t = Trainer(student, train_data, val_data, parse_schedule("1:0.4, 3:0.0"), masks)
    t.run(1)
    m_before = {n: v.copy() for n, v in t.optimizer.m.items()}
    t.run(2)
    for name, mk in masks[0.4].masks.items():
        assert np.array_equal(t.optimizer.m[name][mk == 0], m_before[name][mk == 0])
        assert not t.optimizer.m[name][mk == 0].any()


def test_reset_moments_on_activate(setup):
    train_data, val_data, student, masks = setup
    sched = parse_schedule("1:0.4, 3:0.2")
    t = Trainer(student, train_data, val_data, sched, masks, TrainConfig(reset_moments_on_activate=True))
    t.run(3)
    assert t.step_index == 1


def test_missing_mask_fails_before_training(setup):
    train_data, val_data, student, masks = setup
    with pytest.raises(KeyError, match="0.3"):
        Trainer(student, train_data, val_data, parse_schedule("1:0.4, 3:0.3"), masks)


def test_non_nested_masks_rejected(setup):
    train_data, val_data, student, masks = setup
    rng = np.random.default_rng(99)
    other_sal = SaliencyMap({n: rng.random(student.params[n].value.shape) for n in student.maskable_names()})
    bad = {**masks, 0.2: generate_mask(other_sal, 0.2, 0.75)}
    with pytest.raises(ValueError, match="nested"):
        Trainer(student, train_data, val_data, parse_schedule("1:0.4, 3:0.2"), bad)


def test_per_param_lrs_follow_mask(setup):
    train_data, val_data, student, masks = setup
    t = Trainer(student, train_data, val_data, parse_schedule("1:0.4"), masks)
    t.run(1)
    for name in student.params:
        s = masks[0.4].param_sparsity(name)
        assert t._lrs[name] == TrainConfig().lr / (1.0 - s)


def test_checkpoint_resume_bitwise(setup, tmp_path):
    train_data, val_data, student, masks = setup
    sched = parse_schedule("1:0.4, 3:0.2, 5:0.1, 7:0.0")
    initial = student.state()
    full = Trainer(student, train_data, val_data, sched, masks)
    full.run(8, tmp_path, checkpoint_epochs=[4])
    final = student.state()

    student.load_state(initial)
    resumed = Trainer.resume(tmp_path / "epoch0004.ckpt", student, train_data, val_data, sched, masks)
    assert resumed.epoch == 4 and resumed.step_index == 1
    resumed.run(8)
    for name in final:
        assert final[name].tobytes() == student.params[name].value.tobytes()
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    full.result.to_csv(a, timing=False)
    resumed.result.to_csv(b, timing=False)
    assert a.read_bytes() == b.read_bytes()
    meta, tensors = load_checkpoint(tmp_path / "epoch0004.ckpt")
    assert meta["epoch"] == 4 and "initial/layer1.weight" in tensors


def test_resume_refuses_other_batch_size(setup, tmp_path):
    train_data, val_data, student, masks = setup
    sched = parse_schedule("1:0.4")
    Trainer(student, train_data, val_data, sched, masks).run(1, tmp_path, [1])
    with pytest.raises(FingerprintError):
        Trainer.resume(tmp_path / "epoch0001.ckpt", student, train_data.with_batch_size(8), val_data, sched, masks)


def test_resume_missing_file(setup, tmp_path):
    train_data, val_data, student, masks = setup
    with pytest.raises(FileNotFoundError):
        Trainer.resume(tmp_path / "nope.ckpt", student, train_data, val_data)


def test_sniper_beats_constant_single_seed():
    cfg = TaskConfig()
    train_data, val_data, student = make_task(cfg, seed=0)
    initial = student.state()
    sal = compute_saliency(student, train_data)
    masks = {s: generate_mask(sal, s, 0.75) for s in (0.4, 0.2, 0.1)}
    const = train(student, train_data, val_data, parse_schedule("1:0.4"), masks, epochs=30)
    student.load_state(initial)
    sniper = train(student, train_data, val_data, parse_schedule("1:0.4, 6:0.2, 11:0.1, 21:0.0"), masks, epochs=30)
    assert sniper.final_train < const.final_train


def test_result_csv_round_trip(tmp_path):
    res = ExperimentResult()
    from sniper.trainer import EpochRow
    res.rows = [EpochRow(1, 0.4, 0.1 + 1e-17, 1 / 3, 0.25), EpochRow(2, 0.2, 0.05, 0.2, 0.5)]
    res.to_csv(tmp_path / "r.csv")
    assert ExperimentResult.from_csv(tmp_path / "r.csv") == res
