import json

import numpy as np
import pytest

from macnet.network import build, load_checkpoint
from macnet.synth import Split
from macnet.train import (StepDecaySchedule, TrainConfig, TrainingDiverged, evaluate_split, stratified_batches,
                          train, trainable_parameters)

from conftest import tiny_config


def toy_split(n_per, seed, k=3, size=8):
    r = np.random.default_rng(seed)
    y = np.repeat(np.arange(k), n_per)
    X = r.uniform(0, 0.3, size=(len(y), 3, size, size))
    X[np.arange(len(y)), y % 3] += 0.6  # class k brightens channel k
    return Split(X, y, np.zeros((len(y), 1), dtype=np.int64), np.arange(len(y)))


A3 = np.array([[0.9, 0.1], [0.1, 0.9], [0.5, 0.5]])


def small_cfg(**kw):
    base = dict(batch_size=6, max_epochs=4, learning_rate=0.01, seed=1)
    base.update(kw)
    return TrainConfig(**base)


# schedule -------------------------------------------------------------------------

def test_improving_error_never_decays():
    s = StepDecaySchedule(0.01)
    assert not any(s.update(e) for e in [0.9, 0.5, 0.4, 0.1])
    assert s.lr == 0.01


def test_two_worsenings_give_two_decays():
    s = StepDecaySchedule(0.01)
    for e in [0.9, 0.8, 0.7, 0.75, 0.6, 0.65, 0.5]:  # worse at epochs 3 and 5
        s.update(e)
    assert s.lr == pytest.approx(1e-4)


def test_equal_error_is_not_an_increase():
    s = StepDecaySchedule(0.01)
    s.update(0.5)
    assert not s.update(0.5)


def test_floor_finishes():
    s = StepDecaySchedule(1e-7, 10.0, 1e-8)
    s.update(0.1)
    s.update(0.2)
    assert not s.finished  # 1e-8 is not below the floor
    s.update(0.3)
    assert s.finished


@pytest.mark.parametrize("kw", [dict(lr_floor=0.1), dict(lr_decay=1.0), dict(batch_size=0), dict(grad_clip=0.0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


# batches ----------------------------------------------------------------------------

def test_batches_are_stratified():
    labels = np.repeat(np.arange(8), 20)
    for b in stratified_batches(labels, 64, 5):
        assert np.all(np.bincount(labels[b], minlength=8) == 8)


def test_each_sample_at_most_once():
    labels = np.repeat(np.arange(4), 10)
    flat = np.concatenate(stratified_batches(labels, 8, 3))
    assert len(flat) == len(set(flat.tolist())) == 40


def test_leftovers_dropped():
    labels = np.repeat(np.arange(2), 7)
    batches = stratified_batches(labels, 4, 0)
    assert len(batches) == 3 and sum(len(b) for b in batches) == 12


def test_batches_deterministic():
    labels = np.repeat(np.arange(4), 12)
    a, b = stratified_batches(labels, 8, 11), stratified_batches(labels, 8, 11)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    c = stratified_batches(labels, 8, 12)
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


def test_batch_size_must_divide():
    with pytest.raises(ValueError, match="divisible"):
        stratified_batches(np.repeat(np.arange(3), 5), 8, 0)


def test_small_category_rejected():
    labels = np.array([0] * 10 + [1] * 2)
    with pytest.raises(ValueError, match="category 1"):
        stratified_batches(labels, 8, 0)


# training -------------------------------------------------------------------------------

def test_training_learns_and_returns_best():
    tr, va = toy_split(12, 0), toy_split(6, 1)
    net = build(tiny_config(), 0)
    acc0 = evaluate_split(net, va, A3)["val_accuracy"]
    net, log = train(net, tr, va, A3, small_cfg(max_epochs=6, learning_rate=0.05))
    final = evaluate_split(net, va, A3)["val_accuracy"]
    assert final >= max(r["val_accuracy"] for r in log.records)
    assert final > acc0
    assert len(log) <= 6


def test_decay_restores_best_and_lowers_rate():
    tr, va = toy_split(12, 0), toy_split(6, 1)
    net, log = train(build(tiny_config(), 0), tr, va, A3, small_cfg(max_epochs=8, learning_rate=0.3))
    lrs = log.learning_rates()
    errs = [1 - r["val_accuracy"] for r in log.records]
    for i in range(1, len(errs) - 1):
        expected = lrs[i] / 10 if errs[i] > errs[i - 1] else lrs[i]
        assert lrs[i + 1] == pytest.approx(expected)


def test_training_deterministic():
    tr, va = toy_split(8, 0), toy_split(4, 1)
    _, a = train(build(tiny_config(), 0), tr, va, A3, small_cfg())
    _, b = train(build(tiny_config(), 0), tr, va, A3, small_cfg())
    assert a.to_jsonl() == b.to_jsonl()


def test_resume_reproduces_log(tmp_path):
    tr, va = toy_split(8, 0), toy_split(4, 1)
    cfg = small_cfg(max_epochs=5, learning_rate=0.2)
    full_net, full = train(build(tiny_config(), 0), tr, va, A3, cfg, out_dir=tmp_path / "full")
    train(build(tiny_config(), 0), tr, va, A3, cfg, out_dir=tmp_path / "part", stop_after=2)
    resumed_net, resumed = train(build(tiny_config(), 0), tr, va, A3, cfg, out_dir=tmp_path / "part",
                                 resume=tmp_path / "part" / "last.ckpt")
    assert resumed.to_jsonl() == full.to_jsonl()
    for n, p in full_net.params.items():
        assert np.array_equal(p.data, resumed_net.params[n].data)
    assert (tmp_path / "part" / "metrics.jsonl").read_text() == full.to_jsonl()


def test_output_files(tmp_path):
    tr, va = toy_split(8, 0), toy_split(4, 1)
    net, log = train(build(tiny_config(), 0), tr, va, A3, small_cfg(max_epochs=2), out_dir=tmp_path)
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == len(log)
    rec = json.loads(lines[0])
    for key in ("epoch", "learning_rate", "train_cross_entropy", "val_accuracy", "val_u", "val_d"):
        assert key in rec
    tensors, header = load_checkpoint(tmp_path / "best.ckpt")
    assert header["best_val_accuracy"] == max(r["val_accuracy"] for r in log.records)
    assert set(tensors) == set(net.params)


def test_nan_loss_reports_batch_and_seed():
    tr, va = toy_split(8, 0), toy_split(4, 1)
    net = build(tiny_config(), 0)
    net.params["classifier.1.bias"].data[0] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        train(net, tr, va, A3, small_cfg())
    assert info.value.epoch == 0 and info.value.batch >= 0 and info.value.seed > 0
    assert "batch" in str(info.value)


def test_frozen_heads_when_weights_zero():
    net = build(tiny_config(lambda_attr=0.0, lambda_dist=0.0), 0)
    names = {p.name for p in trainable_parameters(net)}
    assert not any(n.startswith(("aux.", "combine.")) for n in names)
    tr, va = toy_split(8, 0), toy_split(4, 1)
    before = {p.name: p.data.copy() for p in net.attribute_params()}
    train(net, tr, va, A3, small_cfg(max_epochs=2))
    assert all(np.array_equal(p.data, before[p.name]) for p in net.attribute_params())


def test_attribute_matrix_row_count_checked():
    tr, va = toy_split(4, 0), toy_split(2, 1)
    with pytest.raises(ValueError, match="rows"):
        train(build(tiny_config(), 0), tr, va, A3[:2], small_cfg())
