"""Mini-batch SGD with momentum and validation-driven step decay.

The learning rate is divided by ``lr_decay`` after every epoch whose
validation error is worse than the previous epoch's; training then resumes
from the best checkpoint so far and stops once the rate drops below
``lr_floor`` or ``max_epochs`` is reached.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .network import MacNetwork, compute_loss, forward, load_checkpoint, predict, save_checkpoint
from .synth import Split, derive_seed
from .tensor import OptimizerState

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay: float = 10.0
    lr_floor: float = 1e-8
    max_epochs: int = 60
    seed: int = 0
    grad_clip: Optional[float] = 5.0  # global L2 cap; None disables

    def __post_init__(self):
        if self.lr_floor >= self.learning_rate:
            raise ValueError("lr_floor must be below the initial learning rate")
        if self.lr_decay <= 1:
            raise ValueError("lr_decay must exceed 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, seed: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch} (epoch seed {seed})")
        self.epoch, self.batch, self.seed = epoch, batch, seed


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, record: dict) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def learning_rates(self) -> list:
        return [r["learning_rate"] for r in self.records]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


class StepDecaySchedule:
    """Divide the rate by ``factor`` whenever validation error rises."""

    def __init__(self, lr: float, factor: float = 10.0, floor: float = 1e-8):
        self.lr, self.factor, self.floor = lr, factor, floor
        self.previous_error: Optional[float] = None

    def update(self, val_error: float) -> bool:
        """Record an epoch's error; return True if the rate was decayed."""
        decayed = self.previous_error is not None and val_error > self.previous_error
        if decayed:
            self.lr /= self.factor
        self.previous_error = val_error
        return decayed

    @property
    def finished(self) -> bool:
        return self.lr < self.floor


def stratified_batches(labels, batch_size: int, epoch_seed: int, n_categories: Optional[int] = None) -> list:
    """Index batches holding ``batch_size / K`` samples of every category.

    Each category's indices are shuffled independently; leftovers that cannot
    fill a whole batch are dropped for the epoch.
    """
    labels = np.asarray(labels, dtype=np.int64)
    k = int(n_categories if n_categories is not None else labels.max() + 1)
    if batch_size % k:
        raise ValueError(f"batch size {batch_size} is not divisible by {k} categories")
    per = batch_size // k
    rng = np.random.default_rng(epoch_seed)
    pools = []
    for c in range(k):
        idx = np.flatnonzero(labels == c)
        if len(idx) < per:
            raise ValueError(f"category {c} has {len(idx)} samples, fewer than {per} per batch")
        pools.append(rng.permutation(idx))
    n_batches = min(len(p) for p in pools) // per
    batches = [np.concatenate([p[b * per:(b + 1) * per] for p in pools]) for b in range(n_batches)]
    order = rng.permutation(n_batches)
    return [batches[i] for i in order]


def trainable_parameters(net: MacNetwork) -> list:
    """Attribute heads are frozen when neither auxiliary loss is active."""
    cfg = net.cfg
    if cfg.aux_heads and (cfg.lambda_attr != 0 or cfg.lambda_dist != 0):
        return net.parameters()
    return net.category_path_params()


def evaluate_split(net: MacNetwork, split: Split, A) -> dict:
    """Validation metrics computed over the whole split at once."""
    out = predict(net, split.X)
    probs = out["probabilities"]
    n = len(split)
    ce = float(-np.mean(np.log(np.maximum(probs[np.arange(n), split.y], 1e-300))))
    acc = float(np.mean(probs.argmax(1) == split.y))
    rec = {"val_cross_entropy": ce, "val_accuracy": acc, "val_mean_u": None, "val_d": None}
    if out["attributes"] is not None and A is not None:
        from .network import category_mean_l1, kde_kl
        final = T.Tensor(out["attributes"])
        layers = [T.Tensor(l) for l in out["layer_attributes"]] + [final]
        u = [float(category_mean_l1(l, split.y, A).data) for l in layers]
        rec["val_u"] = u
        rec["val_mean_u"] = float(np.mean(u))
        rec["val_u_final"] = u[-1]
        rec["val_d"] = float(kde_kl(final, net.cfg.grid, net.cfg.beta, net.cfg.bandwidth, net.cfg.kde_mode).data)
    return rec


def _snapshot(net: MacNetwork) -> dict:
    snap = {f"param/{n}": p.data.copy() for n, p in net.params.items()}
    snap.update({f"momentum/{n}": p.momentum_buffer.copy() for n, p in net.params.items()})
    return snap


def _restore(net: MacNetwork, snap: dict) -> None:
    for n, p in net.params.items():
        p.data = snap[f"param/{n}"].copy()
        p.momentum_buffer = snap[f"momentum/{n}"].copy()


def train(net: MacNetwork, train_split: Split, val_split: Split, A, cfg: TrainConfig,
          out_dir=None, resume=None, stop_after: Optional[int] = None):
    """Train ``net`` in place; return it (restored to its best epoch) and the log.

    With ``out_dir`` the per-epoch records go to ``metrics.jsonl``, the full
    training state to ``last.ckpt`` and the best weights to ``best.ckpt``.
    ``resume`` points at a ``last.ckpt`` to continue from. ``stop_after``
    halts after that many epochs in this call (used to test resumption).
    """
    A = None if A is None else np.asarray(A, dtype=np.float64)
    k = net.cfg.n_categories
    if A is not None and A.shape[0] != k:
        raise ValueError(f"attribute matrix has {A.shape[0]} rows for {k} categories")
    if net.cfg.aux_heads and A is None:
        raise ValueError("an attribute matrix is required when attribute heads are present")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    params = trainable_parameters(net)
    schedule = StepDecaySchedule(cfg.learning_rate, cfg.lr_decay, cfg.lr_floor)
    tlog = TrainLog()
    best = _snapshot(net)
    best_acc, best_epoch, start = -1.0, -1, 0

    if resume is not None:
        tensors, header = load_checkpoint(resume)
        state = header["train_state"]
        _restore(net, {n[len("cur/"):]: v for n, v in tensors.items() if n.startswith("cur/")})
        best = {n[len("best/"):]: v for n, v in tensors.items() if n.startswith("best/")}
        schedule.lr, schedule.previous_error = state["lr"], state["previous_error"]
        best_acc, best_epoch, start = state["best_accuracy"], state["best_epoch"], state["epoch"] + 1
        tlog.records = list(state["records"])

    epochs_run = 0
    for epoch in range(start, cfg.max_epochs):
        if schedule.finished or (stop_after is not None and epochs_run >= stop_after):
            break
        opt = OptimizerState(schedule.lr, cfg.momentum, cfg.weight_decay)
        epoch_seed = derive_seed(cfg.seed, epoch)
        sums: dict = {}
        batches = stratified_batches(train_split.y, cfg.batch_size, epoch_seed, k)
        for b, idx in enumerate(batches):
            outputs = forward(net, train_split.X[idx])
            loss = compute_loss(outputs, train_split.y[idx], A, net.cfg)
            value = float(loss.total.data)
            if not np.isfinite(value):
                raise TrainingDiverged(epoch, b, epoch_seed)
            loss.total.backward()
            if cfg.grad_clip is not None:
                T.clip_grad_norm(params, cfg.grad_clip)
            T.sgd_step(params, opt)
            net.zero_grad()
            f = loss.as_floats()
            sums["cross_entropy"] = sums.get("cross_entropy", 0.0) + f["cross_entropy"]
            sums["total"] = sums.get("total", 0.0) + f["total"]
            if f["d"] is not None:
                sums["d"] = sums.get("d", 0.0) + f["d"]
                sums["u"] = [a + c for a, c in zip(sums.get("u", [0.0] * len(f["u"])), f["u"])]
        nb = max(len(batches), 1)
        record = {
            "epoch": epoch,
            "learning_rate": schedule.lr,
            "train_cross_entropy": sums.get("cross_entropy", 0.0) / nb,
            "train_total": sums.get("total", 0.0) / nb,
            "train_u": [v / nb for v in sums.get("u", [])],
            "train_d": sums["d"] / nb if "d" in sums else None,
        }
        record.update(evaluate_split(net, val_split, A))
        tlog.append(record)
        log.info("epoch %d lr %.1e loss %.4f val acc %.4f", epoch, schedule.lr,
                 record["train_total"], record["val_accuracy"])

        if record["val_accuracy"] > best_acc:
            best_acc, best_epoch, best = record["val_accuracy"], epoch, _snapshot(net)
        if schedule.update(1.0 - record["val_accuracy"]):
            _restore(net, best)
        epochs_run += 1

        if out is not None:
            (out / "metrics.jsonl").write_text(tlog.to_jsonl())
            state = {"epoch": epoch, "lr": schedule.lr, "previous_error": schedule.previous_error,
                     "best_accuracy": best_acc, "best_epoch": best_epoch, "records": tlog.records}
            tensors = {f"cur/{n}": v for n, v in _snapshot(net).items()}
            tensors.update({f"best/{n}": v for n, v in best.items()})
            save_checkpoint(out / "last.ckpt", tensors,
                            {"config": net.cfg.to_dict(), "train_config": asdict(cfg), "train_state": state})

    if stop_after is None or epochs_run < stop_after:
        _restore(net, best)
        for p in net.params.values():
            p.momentum_buffer = np.zeros_like(p.data)
        if out is not None:
            net.save(out / "best.ckpt", meta={"best_epoch": best_epoch, "best_val_accuracy": best_acc})
    return net, tlog
