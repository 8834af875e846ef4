"""Nested sparse training with gradient masking, plus baseline modes.

One step: zero the accumulator, run the dense frame with hard labels, and
on prune steps run one sparse frame per level (ascending sparsity) on
``theta * M_s`` against the dense frame's softmax output. Each sparse
gradient is masked by its own ``M_s`` before it is accumulated, then a
single SGD update applies the sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .exceptions import DivergenceError
from .netcore import (
    OptimizerConfig,
    TargetKind,
    backward,
    forward,
    sgd_step,
    softmax,
    loss_gradient,
)
from .pruning import SparsityLevelSet, apply_mask, get_nested_masks


class Mode(str, Enum):
    NESTED = "nested"
    SINGLE = "single"
    DENSE = "dense"
    NAIVE = "naive"  # unmasked sparse gradients (shared-update ablation)


@dataclass(frozen=True)
class PruneSchedule:
    warmup_steps: int = 0
    period: int = 1

    def __post_init__(self):
        if self.warmup_steps < 0 or self.period < 1:
            raise ValueError(f"invalid prune schedule {self}")


def prune_step(t, schedule):
    """True on sparse-frame steps: after warmup, every `period` steps."""
    if t < schedule.warmup_steps:
        return False
    return (t - schedule.warmup_steps) % schedule.period == 0


@dataclass(frozen=True)
class TrainConfig:
    levels: SparsityLevelSet = field(default_factory=SparsityLevelSet)
    steps: int = 1000
    batch_size: int = 64
    optimizer: OptimizerConfig | None = None
    prune_schedule: PruneSchedule | None = None
    mode: Mode = Mode.NESTED
    seed: int = 0
    sparse_targets: TargetKind = TargetKind.SOFT
    eval_interval: int = 0
    divergence_threshold: float = 1e4

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "sparse_targets", TargetKind(self.sparse_targets))
        if not isinstance(self.levels, SparsityLevelSet):
            object.__setattr__(self, "levels", SparsityLevelSet(tuple(self.levels)))
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if self.optimizer is None:
            object.__setattr__(self, "optimizer", OptimizerConfig(total_steps=self.steps))
        elif self.optimizer.total_steps != self.steps:
            object.__setattr__(self, "optimizer", replace(self.optimizer, total_steps=self.steps))
        if self.prune_schedule is None:
            object.__setattr__(self, "prune_schedule", PruneSchedule(self.steps // 10, 1))
        if self.prune_schedule.warmup_steps >= self.steps:
            raise ValueError("warmup_steps must be smaller than steps")
        if self.mode is Mode.SINGLE and len(self.levels) != 1:
            raise ValueError("single-sparse mode trains exactly one level")


@dataclass
class StepResult:
    masks: list  # per weighted layer: NestedMaskSet, or None (dense layer / no sparse frames)
    frames: list  # (frame, level, loss) in execution order
    lr: float
    contributions: list = field(default_factory=list)  # per level: list of weight grads added


def _check_finite(loss, net, t, threshold, frame):
    if math.isfinite(loss) and loss <= threshold:
        return
    layer = "output"
    for k, g in enumerate(net.grad):
        if not np.all(np.isfinite(g)):
            layer = net.layer_name(k)
            break
    raise DivergenceError(f"{frame} loss {loss!r} diverged", step=t, layer=layer)


def accumulate_step(net, x, y, cfg, t, record_contributions=False):
    """Fill ``net.grad`` with the step's accumulated gradient without updating."""
    net.zero_grad()
    logits, cache = forward(net, x)
    g = backward(net, cache, y, TargetKind.HARD)
    for k in range(len(net.weights)):
        net.grad[k] += g.weights[k]
        if g.biases[k] is not None:
            net.grad_bias[k] += g.biases[k]
    frames = [("dense", 0.0, g.loss)]
    _check_finite(g.loss, net, t, cfg.divergence_threshold, "dense")
    masks = [None] * len(net.weights)
    contributions = []
    if cfg.mode is not Mode.DENSE and prune_step(t, cfg.prune_schedule):
        if cfg.sparse_targets is TargetKind.SOFT:
            targets = softmax(logits).astype(net.dtype)  # detached soft labels
        else:
            targets = y
        # all levels are cut from this one snapshot of theta
        masks = [get_nested_masks(w, cfg.levels) if p else None
                 for w, p in zip(net.weights, net.prunable)]
        for i, s in enumerate(cfg.levels.levels):
            ws = [w if ms is None else apply_mask(w, ms[i]) for w, ms in zip(net.weights, masks)]
            _, cache_s = forward(net, x, weights=ws)
            gs = backward(net, cache_s, targets, cfg.sparse_targets)
            added = []
            for k, ms in enumerate(masks):
                gk = gs.weights[k]
                if ms is not None and cfg.mode is not Mode.NAIVE:
                    gk = apply_mask(gk, ms[i])
                net.grad[k] += gk
                added.append(gk if record_contributions else None)
                if gs.biases[k] is not None:
                    net.grad_bias[k] += gs.biases[k]
            contributions.append(added)
            frames.append(("sparse", s, gs.loss))
            _check_finite(gs.loss, net, t, cfg.divergence_threshold, f"sparse@{s}")
    return StepResult(masks, frames, float("nan"), contributions)


def train_step(net, x, y, cfg, t, record_contributions=False):
    """One full step: accumulate the masked gradient, then apply SGD."""
    result = accumulate_step(net, x, y, cfg, t, record_contributions)
    result.lr = sgd_step(net, t, cfg.optimizer)
    return result


@dataclass
class TrainedModel:
    net: object
    masks: list  # per weighted layer NestedMaskSet or None
    levels: SparsityLevelSet
    mode: Mode
    history: list = field(default_factory=list)  # dicts: step, frame, level, loss, lr
    evals: list = field(default_factory=list)  # dicts: step, level, loss, accuracy

    def final_accuracy(self):
        last = max(e["step"] for e in self.evals)
        return [e["accuracy"] for e in self.evals if e["step"] == last]


def level_weights(net, masks, level_index):
    """Weights of the sub-network at `level_index` (dense if `masks` is None)."""
    if masks is None:
        return list(net.weights)
    return [w if ms is None else apply_mask(w, ms[level_index])
            for w, ms in zip(net.weights, masks)]


def evaluate(net, masks, level_index, X, y):
    """Top-1 accuracy of ``theta * M_level`` on (X, y); argmax ties go to the lowest class."""
    return evaluate_full(net, masks, level_index, X, y)[0]


def evaluate_full(net, masks, level_index, X, y):
    if masks is not None:
        n = next(len(ms) for ms in masks if ms is not None)
        if not 0 <= level_index < n:
            raise IndexError(f"level {level_index} out of range for {n} levels")
    logits, _ = forward(net, X, weights=level_weights(net, masks, level_index))
    loss, _ = loss_gradient(logits, y, TargetKind.HARD)
    return float(np.mean(logits.argmax(axis=1) == np.asarray(y))), loss, logits


def final_masks(net, levels):
    return [get_nested_masks(w, levels) if p else None for w, p in zip(net.weights, net.prunable)]


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    pos = 0
    while True:
        if pos + batch_size > n:
            perm = rng.permutation(n)
            pos = 0
        yield perm[pos:pos + batch_size]
        pos += batch_size


def _eval_levels(cfg):
    return [0.0] if cfg.mode is Mode.DENSE else list(cfg.levels.levels)


def train(net, X, y, cfg, eval_data=None, on_record=None):
    """Train a copy of `net`; returns a :class:`TrainedModel`.

    `on_record` receives every history/eval record as it is produced.
    """
    net = net.copy()
    X = np.ascontiguousarray(X, dtype=net.dtype)
    y = np.asarray(y, dtype=np.int64)
    rng = np.random.default_rng(cfg.seed)
    model = TrainedModel(net, None, cfg.levels, cfg.mode)
    emit = on_record or (lambda rec: None)
    batches = _batches(len(y), min(cfg.batch_size, len(y)), rng)

    def run_eval(step):
        masks = None if cfg.mode is Mode.DENSE else final_masks(net, cfg.levels)
        for i, s in enumerate(_eval_levels(cfg)):
            acc, loss, _ = evaluate_full(net, masks, i, *eval_data)
            rec = {"step": step, "frame": "eval", "level": s, "loss": loss, "lr": None,
                   "accuracy": acc}
            model.evals.append(rec)
            emit(rec)

    for t in range(cfg.steps):
        idx = next(batches)
        res = train_step(net, X[idx], y[idx], cfg, t)
        for frame, level, loss in res.frames:
            rec = {"step": t, "frame": frame, "level": level, "loss": loss, "lr": res.lr,
                   "accuracy": None}
            model.history.append(rec)
            emit(rec)
        if eval_data is not None and cfg.eval_interval and (t + 1) % cfg.eval_interval == 0 \
                and t + 1 < cfg.steps:
            run_eval(t + 1)
    model.masks = None if cfg.mode is Mode.DENSE else final_masks(net, cfg.levels)
    if eval_data is not None:
        run_eval(cfg.steps)
    return model
