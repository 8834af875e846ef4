"""Flat ``key = value`` training configuration files.

Blank lines and ``#`` comments are ignored. Unknown or repeated keys are
errors, reported with their line number. Relative paths resolve against
the directory holding the config file.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

from .exceptions import ConfigError
from .netcore import OptimizerConfig
from .pruning import SparsityLevelSet
from .training import Mode, PruneSchedule, TrainConfig


def _levels(v):
    levels = [float(x) for x in v.split(",") if x.strip()]
    # accept percentages like 70,80,90
    return tuple(x / 100 if x > 1 else x for x in levels)


def _block(v):
    m, n = v.lower().split("x")
    return int(m), int(n)


# key -> (parser, default); a default of None means "derived" or "required"
KEYS = {
    "data": (str, None),
    "test_fraction": (float, 0.25),
    "architecture": (str, "tiny-conv"),
    "levels": (_levels, (0.7, 0.8, 0.9)),
    "block": (_block, (1, 2)),
    "steps": (int, 2000),
    "batch_size": (int, 64),
    "lr": (float, 0.05),
    "momentum": (float, 0.9),
    "weight_decay": (float, 0.0005),
    "warmup_steps": (int, None),
    "period": (int, 1),
    "mode": (str, "nested"),
    "seed": (int, 0),
    "sparse_targets": (str, "soft"),
    "eval_interval": (int, 0),
    "model_out": (str, None),
    "metrics_out": (str, None),
}


@dataclass
class RunConfig:
    train: TrainConfig
    data: str
    architecture: str
    test_fraction: float
    model_out: str
    metrics_out: str
    raw: dict = field(default_factory=dict)

    def snapshot(self):
        """Stable JSON-friendly copy of every setting."""
        snap = {k: self.raw[k] for k in sorted(self.raw)}
        snap["levels"] = list(self.train.levels.levels)
        snap["block"] = list(self.train.levels.block_shape)
        snap["warmup_steps"] = self.train.prune_schedule.warmup_steps
        return snap


def parse_text(text, base_dir="."):
    values, lines = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}", line=lineno)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", line=lineno)
        try:
            values[key] = KEYS[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", line=lineno) from None
        lines[key] = lineno
    if "data" not in values:
        raise ConfigError("missing required key 'data'")
    merged = {k: d for k, (_, d) in KEYS.items() if d is not None}
    merged.update(values)

    def fail(key, exc):
        raise ConfigError(f"invalid {key}: {exc}", line=lines.get(key))

    try:
        levels = SparsityLevelSet(tuple(merged["levels"]), *merged["block"])
    except ValueError as exc:
        fail("levels", exc)
    steps = merged["steps"]
    warmup = merged.get("warmup_steps", steps // 10)
    try:
        mode = Mode(merged["mode"])
    except ValueError:
        fail("mode", f"choose from {', '.join(m.value for m in Mode)}")
    try:
        cfg = TrainConfig(
            levels=levels, steps=steps, batch_size=merged["batch_size"],
            optimizer=OptimizerConfig(merged["lr"], merged["momentum"],
                                      merged["weight_decay"], steps),
            prune_schedule=PruneSchedule(warmup, merged["period"]),
            mode=mode, seed=merged["seed"], sparse_targets=merged["sparse_targets"],
            eval_interval=merged["eval_interval"])
    except ValueError as exc:
        fail("config", exc)
    if not 0 <= merged["test_fraction"] < 1:
        fail("test_fraction", "must lie in [0, 1)")

    def resolve(p):
        return p if os.path.isabs(p) else os.path.normpath(os.path.join(base_dir, p))

    return RunConfig(cfg, resolve(merged["data"]), merged["architecture"],
                     merged["test_fraction"], merged.get("model_out") and resolve(merged["model_out"]),
                     merged.get("metrics_out") and resolve(merged["metrics_out"]), merged)


def load(path):
    with open(path, encoding="utf-8") as f:
        text = f.read()
    cfg = parse_text(text, os.path.dirname(os.path.abspath(path)))
    stem = os.path.splitext(os.path.abspath(path))[0]
    cfg.model_out = cfg.model_out or stem + ".model"
    cfg.metrics_out = cfg.metrics_out or stem + ".metrics.tsv"
    return cfg
