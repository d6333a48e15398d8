"""Two-stage optimization: random-label bridge training, then adaptation.

The shared `fit` loop implements SGD/Adam with decoupled weight decay
(layernorm parameters exempt), cosine annealing to zero, global-norm
gradient clipping and epoch shuffling from a dedicated RNG stream. Frozen
tensors are skipped by the optimizer, so they change by exactly zero.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import checkpoint
from . import tensor as tz
from .data import LabelTable
from .models import FreezeSelector, Model, apply_freeze
from .tensor import ContractViolation, RngStream, Tensor

_S_BATCH = 11
_S_DROP = 12
_S_HEAD = 13

STAGES = ("bridge", "adapt", "linear-probe", "pretrain-lm")


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 0.05
    epochs: int = 1
    batch_size: int = 64
    clip_norm: float = 1.0  # math.inf disables clipping
    drop_path: float = 0.0
    seed: int = 0
    stage: str = "bridge"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    stop_at_train_acc: float = 0.0  # 0 disables early stop

    def validate(self):
        if self.lr <= 0:
            raise ContractViolation("lr must be positive")
        if self.clip_norm <= 0:
            raise ContractViolation("clip norm must be positive")
        if self.epochs < 1:
            raise ContractViolation("epochs must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ContractViolation(f"unknown optimizer {self.optimizer!r}")
        if self.stage not in STAGES:
            raise ContractViolation(f"unknown stage {self.stage!r}")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    eval_acc: list = field(default_factory=list)  # None where not evaluated
    lr: list = field(default_factory=list)
    wall_clock: float = 0.0
    epochs_run: int = 0
    snapshot_dir: str | None = None

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "lr", "train_loss", "train_acc", "eval_acc"])
            for i in range(self.epochs_run):
                ev = self.eval_acc[i]
                w.writerow([i, f"{self.lr[i]:.8g}", f"{self.train_loss[i]:.8g}",
                            f"{self.train_acc[i]:.8g}", "" if ev is None else f"{ev:.8g}"])

    def first_epoch_at(self, acc: float) -> int | None:
        for i, a in enumerate(self.train_acc):
            if a >= acc:
                return i
        return None


def cosine_lr(t: int, total: int, lr0: float) -> float:
    """Cosine annealing from lr0 at t=0 to 0 at t=total."""
    if not 0 <= t <= total:
        raise ContractViolation(f"step {t} outside [0, {total}]")
    return lr0 * (1.0 + math.cos(math.pi * t / total)) / 2.0


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place when the global L2 norm exceeds max_norm."""
    if max_norm <= 0:
        raise ContractViolation("max_norm must be positive")
    total = 0.0
    for g in grads.values():
        total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    norm = math.sqrt(total)
    if math.isfinite(max_norm) and norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


class _Optimizer:
    def __init__(self, cfg: TrainConfig, trainable: list[str], no_decay: set[str]):
        self.cfg = cfg
        self.trainable = list(trainable)
        self.no_decay = set(no_decay)
        self.t = 0
        if cfg.optimizer == "adam":
            self.m: dict[str, np.ndarray] = {}
            self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float):
        cfg = self.cfg
        self.t += 1
        for name in self.trainable:
            p = params[name]
            g = grads[name]
            if cfg.weight_decay and name not in self.no_decay:
                p.data *= (1.0 - lr * cfg.weight_decay)
            if cfg.optimizer == "sgd":
                upd = g
            else:
                m = self.m.setdefault(name, np.zeros_like(p.data, dtype=np.float32))
                v = self.v.setdefault(name, np.zeros_like(p.data, dtype=np.float32))
                m += (1.0 - cfg.beta1) * (g - m)
                v += (1.0 - cfg.beta2) * (g * g - v)
                mhat = m / (1.0 - cfg.beta1 ** self.t)
                vhat = v / (1.0 - cfg.beta2 ** self.t)
                upd = mhat / (np.sqrt(vhat) + cfg.eps)
            p.data = p.data - (p.data.dtype.type(lr) * upd).astype(p.data.dtype)


def fit(logits_fn, params: dict[str, Tensor], x, y: np.ndarray, cfg: TrainConfig, *,
        trainable: list[str] | None = None, no_decay=(), eval_xy=None,
        run_dir: str | None = None, run_meta: dict | None = None) -> TrainHistory:
    """Minimize cross-entropy of logits_fn(batch) against integer labels.

    logits_fn(xb, train, rng) -> logits Tensor; `x` is indexed along axis 0.
    When run_dir is set, theta0/thetaT snapshots, history.csv and
    config.json are written there.
    """
    cfg.validate()
    y = np.asarray(y)
    n = len(y)
    if _length(x) != n:
        raise ContractViolation("dataset/label length mismatch")
    names = list(params)
    trainable = list(trainable) if trainable is not None else names
    opt = _Optimizer(cfg, trainable, set(no_decay))
    batch_rng = RngStream(cfg.seed, _S_BATCH)
    drop_rng = RngStream(cfg.seed, _S_DROP)

    if run_dir:
        os.makedirs(run_dir, exist_ok=True)
        checkpoint.save({k: params[k].data for k in names}, os.path.join(run_dir, "theta0.brlb"))
        if run_meta is not None:
            _write_config(run_dir, cfg, run_meta)

    steps_per_epoch = max(1, (n + cfg.batch_size - 1) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    hist = TrainHistory(snapshot_dir=run_dir)
    t0 = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        order = batch_rng.permutation(n)
        losses, hits = [], 0
        epoch_lr = cosine_lr(step, total_steps, cfg.lr)
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            if idx.size == 0:
                continue
            xb = _take(x, idx)
            yb = y[idx]
            lr = cosine_lr(step, total_steps, cfg.lr)
            for p in params.values():
                p.grad = None
            logits = logits_fn(xb, True, drop_rng)
            loss = tz.softmax_cross_entropy(logits, yb)
            tz.backward(loss)
            grads = {k: (params[k].grad if params[k].grad is not None
                         else np.zeros_like(params[k].data)) for k in trainable}
            clip_global_norm(grads, cfg.clip_norm)
            opt.step(params, grads, lr)
            losses.append(float(loss.item()) * idx.size)
            hits += int((np.argmax(logits.data, axis=-1).reshape(-1) == yb.reshape(-1)).sum())
            step += 1
        hist.train_loss.append(sum(losses) / n)
        hist.train_acc.append(hits / y.size if y.ndim == 1 else hits / y.size)
        hist.lr.append(epoch_lr)
        hist.eval_acc.append(evaluate(logits_fn, *eval_xy) if eval_xy is not None else None)
        hist.epochs_run += 1
        if cfg.stop_at_train_acc and hist.train_acc[-1] >= cfg.stop_at_train_acc:
            break
    hist.wall_clock = time.perf_counter() - t0

    if run_dir:
        checkpoint.save({k: params[k].data for k in names}, os.path.join(run_dir, "thetaT.brlb"))
        hist.to_csv(os.path.join(run_dir, "history.csv"))
    return hist


def evaluate(logits_fn, x, y, batch: int = 256) -> float:
    """Top-1 accuracy in eval mode (no drop-path)."""
    y = np.asarray(y)
    hits = 0
    for s in range(0, len(y), batch):
        xb = _take(x, np.arange(s, min(s + batch, len(y))))
        logits = logits_fn(xb, False, None)
        hits += int((np.argmax(logits.data, axis=-1).reshape(-1) == y[s:s + batch].reshape(-1)).sum())
    return hits / y.size


def _length(x):
    return x.shape[0] if hasattr(x, "shape") else len(x)


def _take(x, idx):
    return x[idx]


def _write_config(run_dir: str, cfg: TrainConfig, meta: dict) -> None:
    doc = {"train": asdict(cfg), **meta}
    with open(os.path.join(run_dir, "config.json"), "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)


def model_logits_fn(model: Model, cfg: TrainConfig):
    def fn(xb, train, rng):
        return model.forward(xb, train=train,
                             drop_path=cfg.drop_path if train else 0.0,
                             drop_rng=rng).logits
    return fn


# ---------------------------------------------------------------------------
# stage wrappers


def bridge_train(model: Model, x, labels: LabelTable, cfg: TrainConfig,
                 freeze: FreezeSelector | None = None, *, run_dir: str | None = None,
                 eval_xy=None) -> tuple[TrainHistory, Model]:
    """Stage 1: supervised training against the table's effective labels."""
    if freeze is not None:
        apply_freeze(model, freeze)
    meta = {"labels": labels.meta(), "stage": "bridge",
            "freeze": list(model.block_trainable)}
    hist = fit(model_logits_fn(model, cfg), model.params, x, labels.effective, cfg,
               trainable=model.trainable_names(), no_decay=model.no_decay_names(),
               eval_xy=eval_xy, run_dir=run_dir, run_meta=meta)
    return hist, model


def reinit_head(model: Model, rng: RngStream) -> Model:
    """Fresh task head; used when adapting a bridged backbone to true labels."""
    from .models import INIT_STD
    model.params["head.w"].data = rng.normal(model.params["head.w"].data.shape,
                                             INIT_STD, dtype=np.float32)
    model.params["head.b"].data = np.zeros_like(model.params["head.b"].data)
    return model


def adapt(model: Model, head_rng: RngStream | None, x, y_true, cfg: TrainConfig, *,
          fine_tune: bool = False, run_dir: str | None = None,
          eval_xy=None) -> tuple[TrainHistory, Model]:
    """Stage 2: train a lightweight head on true labels, optionally
    fine-tuning the backbone. With a frozen backbone this is exactly a
    linear probe, so it shares the cached-feature path with linear_probe."""
    out = model.copy()
    if head_rng is not None:
        reinit_head(out, head_rng)
    if fine_tune:
        hist = fit(model_logits_fn(out, cfg), out.params, x, np.asarray(y_true), cfg,
                   trainable=out.trainable_names(), no_decay=out.no_decay_names(),
                   eval_xy=eval_xy, run_dir=run_dir,
                   run_meta={"stage": "adapt", "fine_tune": True})
        return hist, out
    hist = _head_only_fit(out, x, np.asarray(y_true), cfg, eval_xy=eval_xy,
                          run_dir=run_dir)
    return hist, out


@dataclass
class ProbeResult:
    train_acc: float
    test_acc: float
    history: TrainHistory


def pooled_features(model: Model, x, batch: int = 256) -> np.ndarray:
    """Mean-pooled final hidden states in eval mode, one row per sample."""
    rows = []
    for s in range(0, _length(x), batch):
        xb = x[s:s + batch]
        rows.append(model.forward(xb).pooled.data)
    return np.concatenate(rows, axis=0)


def _head_only_fit(model: Model, x, y, cfg, *, eval_xy=None, run_dir=None,
                   features: np.ndarray | None = None) -> TrainHistory:
    feats = pooled_features(model, x) if features is None else features
    head = {"head.w": model.params["head.w"], "head.b": model.params["head.b"]}

    def head_logits(fb, train, rng):
        return tz.linear(Tensor(fb), head["head.w"], head["head.b"])

    ev = None
    if eval_xy is not None:
        ev = (pooled_features(model, eval_xy[0]), eval_xy[1])
    hist = fit(head_logits, head, feats, y, cfg, trainable=list(head), no_decay=(),
               eval_xy=ev, run_dir=run_dir,
               run_meta={"stage": cfg.stage, "fine_tune": False})
    return hist


def linear_probe(backbone: Model, x_train, y_train, x_test, y_test,
                 cfg: TrainConfig, head_rng: RngStream | None = None) -> ProbeResult:
    """Single linear layer on frozen mean-pooled features; train/test top-1."""
    probe = backbone.copy()
    reinit_head(probe, head_rng if head_rng is not None else RngStream(cfg.seed, _S_HEAD))
    feats = pooled_features(probe, x_train)
    hist = _head_only_fit(probe, x_train, np.asarray(y_train), cfg, features=feats)

    def head_logits(fb, train, rng):
        return tz.linear(Tensor(fb), probe.params["head.w"], probe.params["head.b"])

    train_acc = evaluate(head_logits, feats, np.asarray(y_train))
    test_feats = pooled_features(probe, x_test)
    test_acc = evaluate(head_logits, test_feats, np.asarray(y_test))
    return ProbeResult(train_acc, test_acc, hist)


# ---------------------------------------------------------------------------
# hyperparameter sweep harness


@dataclass
class SweepCell:
    lr: float
    wd: float
    baseline: list
    bridged: list

    @property
    def delta(self) -> float:
        return float(np.mean(self.bridged) - np.mean(self.baseline))


@dataclass
class SweepResult:
    cells: list
    seeds: list

    def to_json(self) -> dict:
        return {"seeds": self.seeds, "cells": [
            {"lr": c.lr, "wd": c.wd, "baseline": c.baseline, "bridged": c.bridged,
             "delta": c.delta} for c in self.cells]}


def cell_seed(base_seed: int, lr: float, wd: float) -> int:
    """Per-cell seed from the cell's coordinates, not its execution order."""
    h = hashlib.sha256(f"{base_seed}|{lr!r}|{wd!r}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def hparam_sweep(lrs, wds, pipeline, base_seed: int = 0, n_seeds: int = 1) -> SweepResult:
    """Paired grid: pipeline(lr, wd, seed, bridged) -> accuracy, both arms
    sharing the per-cell seed so the delta isolates the bridge stage."""
    if not lrs or not wds:
        raise ContractViolation("sweep grids must be non-empty")
    cells = []
    for lr in lrs:
        for wd in wds:
            base = []
            brid = []
            for s in range(n_seeds):
                seed = cell_seed(base_seed + s, lr, wd)
                base.append(float(pipeline(lr, wd, seed, False)))
                brid.append(float(pipeline(lr, wd, seed, True)))
            cells.append(SweepCell(lr, wd, base, brid))
    return SweepResult(cells, list(range(n_seeds)))
