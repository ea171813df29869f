"""Downstream classifier and the synthetic-data training strategies.

Strategies
----------
``baseline``   batches drawn uniformly from the real records only.
``combined``   batches drawn uniformly from real and synthetic records together.
``rsp``        each batch holds ``batch_size`` real records plus ``batch_size``
               synthetic candidates, each admitted by its own Bernoulli(p) draw,
               so batch size varies.
``two_phase``  ``combined`` for ``phase1.steps`` at ``phase1.lr``, then
               ``baseline`` for ``phase2.steps`` at the smaller ``phase2.lr``.

All indices are drawn with replacement from ``rng.stream(seed, "classifier")``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import rng as rng_mod
from .data import REAL, SYNTHETIC, DatasetManifest
from .errors import ConfigError, InvalidArgumentError, LeakageError, NumericError
from .nn import Adam, seeded_init_

log = logging.getLogger(__name__)

KINDS = ("baseline", "combined", "rsp", "two_phase")


@dataclass(frozen=True)
class Phase:
    steps: int
    lr: float


@dataclass(frozen=True)
class TrainingStrategy:
    kind: str = "baseline"
    steps: int = 400
    lr: float = 2e-3
    p: float | None = None
    phase1: Phase | None = None
    phase2: Phase | None = None
    batch_size: int = 32

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgumentError(f"unknown strategy {self.kind!r}")
        if self.kind == "rsp":
            if self.p is None or not 0 < self.p <= 1:
                raise InvalidArgumentError(f"rsp needs p in (0, 1], got {self.p}")
        elif self.p is not None:
            raise InvalidArgumentError("p only applies to the rsp strategy")
        if self.kind == "two_phase":
            if self.phase1 is None or self.phase2 is None:
                raise InvalidArgumentError("two_phase needs phase1 and phase2")
            if not self.phase2.lr < self.phase1.lr:
                raise InvalidArgumentError("two_phase needs phase2.lr < phase1.lr")
            if not self.phase2.steps < self.phase1.steps:
                raise InvalidArgumentError("two_phase needs phase2.steps < phase1.steps")
            if self.phase2.steps < 0 or self.phase2.lr <= 0:
                raise InvalidArgumentError("phase2 needs steps >= 0 and lr > 0")
        elif self.phase1 is not None or self.phase2 is not None:
            raise InvalidArgumentError("phase1/phase2 only apply to two_phase")
        if self.batch_size < 1 or self.steps < 0 or not self.lr > 0:
            raise InvalidArgumentError("batch_size >= 1, steps >= 0 and lr > 0 required")

    @classmethod
    def baseline(cls, steps=400, lr=2e-3, batch_size=32):
        return cls("baseline", steps, lr, batch_size=batch_size)

    @classmethod
    def combined(cls, steps=400, lr=2e-3, batch_size=32):
        return cls("combined", steps, lr, batch_size=batch_size)

    @classmethod
    def rsp(cls, p=0.8, steps=400, lr=2e-3, batch_size=32):
        return cls("rsp", steps, lr, p=p, batch_size=batch_size)

    @classmethod
    def two_phase(cls, phase1=Phase(400, 2e-3), phase2=Phase(100, 2e-4), batch_size=32):
        return cls("two_phase", phase1.steps, phase1.lr, phase1=phase1, phase2=phase2, batch_size=batch_size)

    def to_json(self) -> dict:
        d = {"kind": self.kind, "batch_size": self.batch_size}
        if self.kind == "two_phase":
            d.update(phase1=asdict(self.phase1), phase2=asdict(self.phase2))
        else:
            d.update(steps=self.steps, lr=self.lr)
        if self.kind == "rsp":
            d["p"] = self.p
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainingStrategy":
        d = dict(d)
        for k in ("phase1", "phase2"):
            if d.get(k) is not None:
                d[k] = Phase(**d[k])
        if d.get("kind") == "two_phase":
            d.setdefault("steps", d["phase1"].steps)
            d.setdefault("lr", d["phase1"].lr)
        return cls(**d)


@dataclass(frozen=True)
class ClassifierConfig:
    num_classes: int
    channels: int = 1
    image_size: int = 32
    widths: tuple[int, int] = (16, 32)


class Classifier(nn.Module):
    """Two conv blocks (conv, ReLU, 2x max-pool) and a linear head."""

    def __init__(self, config: ClassifierConfig):
        super().__init__()
        self.config = config
        w1, w2 = config.widths
        self.conv1 = nn.Conv2d(config.channels, w1, 3, padding=1)
        self.conv2 = nn.Conv2d(w1, w2, 3, padding=1)
        side = config.image_size // 4
        self.head = nn.Linear(w2 * side * side, config.num_classes)

    def forward(self, x):
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        return self.head(x.flatten(1))


def rsp_batch(n_real: int, n_syn: int, batch_size: int, p: float, gen: np.random.Generator):
    """Real indices, synthetic candidate indices and the Bernoulli admission mask of one batch."""
    real_idx = gen.integers(0, n_real, batch_size)
    cand = gen.integers(0, n_syn, batch_size)
    admitted = gen.random(batch_size) < p
    return real_idx, cand, admitted


class _Data:
    def __init__(self, manifest: DatasetManifest, channels: int):
        idx = manifest.class_index
        real, syn = manifest.select(provenance=REAL), manifest.select(provenance=SYNTHETIC)
        self.real_x = torch.from_numpy(manifest.load_images(real, channels)) if real else None
        self.real_y = torch.tensor([idx[r.label] for r in real], dtype=torch.long)
        self.syn_x = torch.from_numpy(manifest.load_images(syn, channels)) if syn else None
        self.syn_y = torch.tensor([idx[r.label] for r in syn], dtype=torch.long)
        if self.syn_x is not None and self.real_x is not None:
            self.all_x = torch.cat([self.real_x, self.syn_x])
            self.all_y = torch.cat([self.real_y, self.syn_y])
        else:
            self.all_x = self.real_x if self.real_x is not None else self.syn_x
            self.all_y = self.real_y if self.real_x is not None else self.syn_y


def _train_loop(model, data: _Data, mode: str, steps: int, lr: float, batch_size: int, gen, p=None,
                stats=None):
    opt = Adam(model, lr)
    for step in range(steps):
        if mode == "baseline":
            i = torch.as_tensor(gen.integers(0, len(data.real_y), batch_size))
            x, y = data.real_x[i], data.real_y[i]
        elif mode == "combined":
            i = torch.as_tensor(gen.integers(0, len(data.all_y), batch_size))
            x, y = data.all_x[i], data.all_y[i]
        else:
            ri, ci, adm = rsp_batch(len(data.real_y), len(data.syn_y), batch_size, p, gen)
            ci = ci[adm]
            x = torch.cat([data.real_x[torch.as_tensor(ri)], data.syn_x[torch.as_tensor(ci)]])
            y = torch.cat([data.real_y[torch.as_tensor(ri)], data.syn_y[torch.as_tensor(ci)]])
            if stats is not None:
                stats["candidates"] = stats.get("candidates", 0) + len(adm)
                stats["admitted"] = stats.get("admitted", 0) + int(adm.sum())
        opt.zero_grad()
        loss = F.cross_entropy(model(x), y)
        if not torch.isfinite(loss):
            raise NumericError(f"classifier training diverged at step {step}")
        loss.backward()
        opt.step(lr * 0.5 * (1 + math.cos(math.pi * step / steps)))


def train_classifier(manifest: DatasetManifest, strategy: TrainingStrategy, config: ClassifierConfig,
                     seed: int, stats: dict | None = None) -> Classifier:
    """Train a classifier on ``manifest`` under ``strategy``; deterministic given ``seed``."""
    torch.use_deterministic_algorithms(True)
    data = _Data(manifest, config.channels)
    if data.real_x is None:
        raise ConfigError("training manifest has no real records")
    if strategy.kind != "baseline" and data.syn_x is None:
        raise ConfigError(f"strategy {strategy.kind!r} needs synthetic records")
    model = Classifier(config)
    seeded_init_(model, seed)
    gen = rng_mod.stream(seed, "classifier")
    b = strategy.batch_size
    if strategy.kind == "two_phase":
        _train_loop(model, data, "combined", strategy.phase1.steps, strategy.phase1.lr, b, gen)
        if strategy.phase2.steps:
            _train_loop(model, data, "baseline", strategy.phase2.steps, strategy.phase2.lr, b, gen)
    else:
        _train_loop(model, data, strategy.kind, strategy.steps, strategy.lr, b, gen, strategy.p, stats)
    model.eval()
    return model


@dataclass
class EvalReport:
    accuracy: float
    correct: int
    total: int
    confusion: list
    classes: list
    fingerprint: str
    strategy: str | None = None
    seed: int | None = None


def evaluate(model, test: DatasetManifest, train: DatasetManifest | None = None, channels: int = 1,
             strategy: str | None = None, seed: int | None = None) -> EvalReport:
    """Exact test accuracy and confusion counts (rows: true class, columns: predicted)."""
    if train is not None:
        overlap = test.abs_paths() & train.abs_paths()
        if overlap:
            raise LeakageError(f"{len(overlap)} test images also appear in the training set, e.g. {sorted(overlap)[0]}")
    x = torch.from_numpy(test.load_images(channels=channels))
    y = test.labels()
    with torch.no_grad():
        pred = model(x).argmax(dim=1).numpy() if len(y) else np.zeros(0, dtype=np.int64)
    k = len(test.classes)
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (y, pred), 1)
    correct = int(np.trace(conf))
    total = int(len(y))
    return EvalReport(correct / total if total else 0.0, correct, total, conf.tolist(), list(test.classes),
                      test.fingerprint(), strategy, seed)


@dataclass
class StrategyRow:
    name: str
    kind: str
    accuracies: list
    mean: float
    std: float
    delta: float | None = None


@dataclass
class ComparisonReport:
    rows: list = field(default_factory=list)
    seeds: list = field(default_factory=list)
    train_fingerprint: str = ""
    test_fingerprint: str = ""

    def row(self, name) -> StrategyRow:
        return next(r for r in self.rows if r.name == name)

    def to_json(self) -> dict:
        return {"seeds": self.seeds, "train_fingerprint": self.train_fingerprint,
                "test_fingerprint": self.test_fingerprint, "rows": [asdict(r) for r in self.rows]}

    def to_text(self) -> str:
        head = f"{'strategy':<14}{'mean acc (%)':>14}{'std':>8}{'delta':>9}  per-seed"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            delta = "" if r.delta is None else f"{100 * r.delta:+.1f}"
            per = " ".join(f"{100 * a:.1f}" for a in r.accuracies)
            lines.append(f"{r.name:<14}{100 * r.mean:>14.1f}{100 * r.std:>8.1f}{delta:>9}  {per}")
        return "\n".join(lines)

    def save(self, stem) -> None:
        with open(f"{stem}.json", "w") as fh:
            json.dump(self.to_json(), fh, indent=1)
        with open(f"{stem}.txt", "w") as fh:
            fh.write(self.to_text() + "\n")


def compare_strategies(train: DatasetManifest, test: DatasetManifest, strategies: dict, seeds,
                       config: ClassifierConfig) -> ComparisonReport:
    """Run every (strategy, seed) pair and tabulate mean accuracy and delta vs the baseline row."""
    seeds = list(seeds)
    if not seeds:
        raise InvalidArgumentError("need at least one seed")
    report = ComparisonReport(seeds=seeds, train_fingerprint=train.fingerprint(),
                              test_fingerprint=test.fingerprint())
    for name, strat in strategies.items():
        accs = []
        for s in seeds:
            model = train_classifier(train if strat.kind != "baseline" else train.real(), strat, config, s)
            accs.append(evaluate(model, test, train, config.channels, name, s).accuracy)
            log.info("%s seed %d accuracy %.4f", name, s, accs[-1])
        report.rows.append(StrategyRow(name, strat.kind, accs, float(np.mean(accs)), float(np.std(accs))))
    base = next((r for r in report.rows if r.kind == "baseline"), None)
    if base is not None:
        for r in report.rows:
            r.delta = r.mean - base.mean
    return report
