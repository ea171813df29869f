from dataclasses import replace

import numpy as np
import pytest
import torch

from mvcaug.classifier import (Classifier, ClassifierConfig, ComparisonReport, Phase, StrategyRow, TrainingStrategy,
                               compare_strategies, evaluate, rsp_batch, train_classifier)
from mvcaug.data import SYNTHETIC, DatasetManifest
from mvcaug.errors import ConfigError, InvalidArgumentError, LeakageError
from mvcaug.nn import seeded_init_
from mvcaug.shapes import generate_shapes

CFG = ClassifierConfig(num_classes=3, image_size=16, widths=(4, 8))


@pytest.fixture(scope="module")
def augmented(shapes_manifest, tmp_path_factory):
    syn = generate_shapes(tmp_path_factory.mktemp("syn"), count=12, size=16, seed=8, prefix="syn")
    syn = DatasetManifest([replace(r, provenance=SYNTHETIC) for r in syn.records], syn.classes, syn.root)
    return shapes_manifest.merged(syn)


@pytest.fixture(scope="module")
def test_set(tmp_path_factory):
    return generate_shapes(tmp_path_factory.mktemp("test"), count=10, size=16, seed=99)


def params(model):
    return [p.detach().clone() for p in model.parameters()]


def same(a, b):
    return all(torch.equal(x, y) for x, y in zip(params(a), params(b)))


class ConstantClassifier(torch.nn.Module):
    def forward(self, x):
        out = torch.zeros(x.shape[0], 3)
        out[:, 0] = 1.0
        return out


class TestStrategyConfig:
    def test_defaults(self):
        assert TrainingStrategy.rsp().p == 0.8
        s = TrainingStrategy.two_phase()
        assert s.phase2.lr < s.phase1.lr and s.phase2.steps < s.phase1.steps

    @pytest.mark.parametrize("kw", [
        dict(kind="rsp", p=0.0), dict(kind="rsp", p=1.5), dict(kind="rsp"), dict(kind="baseline", p=0.5),
        dict(kind="two_phase", phase1=Phase(10, 1e-3), phase2=Phase(5, 1e-3)),
        dict(kind="two_phase", phase1=Phase(10, 1e-3), phase2=Phase(10, 1e-4)),
        dict(kind="two_phase", phase1=Phase(10, 1e-3)),
        dict(kind="combined", phase1=Phase(10, 1e-3)), dict(kind="mixup"), dict(lr=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(InvalidArgumentError):
            TrainingStrategy(**kw)

    @pytest.mark.parametrize("s", [TrainingStrategy.baseline(), TrainingStrategy.rsp(0.5),
                                   TrainingStrategy.two_phase()])
    def test_json_round_trip(self, s):
        assert TrainingStrategy.from_json(s.to_json()) == s


class TestRsp:
    def test_full_admission(self):
        g = np.random.default_rng(0)
        for _ in range(20):
            _, cand, adm = rsp_batch(10, 30, 16, 1.0, g)
            assert adm.all() and len(cand) == 16

    def test_full_admission_training(self, augmented):
        stats = {}
        train_classifier(augmented, TrainingStrategy.rsp(1.0, steps=5, batch_size=8), CFG, 0, stats)
        assert stats == {"candidates": 40, "admitted": 40}

    def test_admission_frequency(self):
        g = np.random.default_rng(1)
        adm = np.concatenate([rsp_batch(24, 72, 32, 0.8, g)[2] for _ in range(1000)])
        assert abs(adm.mean() - 0.8) <= 0.03

    def test_admission_frequency_in_training(self, augmented):
        stats = {}
        train_classifier(augmented, TrainingStrategy.rsp(0.8, steps=100, batch_size=10), CFG, 2, stats)
        assert stats["candidates"] == 1000
        assert abs(stats["admitted"] / 1000 - 0.8) <= 0.03


class TestTraining:
    def test_deterministic(self, augmented):
        s = TrainingStrategy.combined(steps=10, batch_size=8)
        assert same(train_classifier(augmented, s, CFG, 1), train_classifier(augmented, s, CFG, 1))
        assert not same(train_classifier(augmented, s, CFG, 1), train_classifier(augmented, s, CFG, 2))

    def test_two_phase_without_phase2_is_combined(self, augmented):
        two = TrainingStrategy.two_phase(Phase(12, 3e-3), Phase(0, 1e-4), batch_size=8)
        comb = TrainingStrategy.combined(steps=12, lr=3e-3, batch_size=8)
        assert same(train_classifier(augmented, two, CFG, 4), train_classifier(augmented, comb, CFG, 4))

    def test_two_phase_changes_with_phase2(self, augmented):
        two = TrainingStrategy.two_phase(Phase(12, 3e-3), Phase(3, 1e-4), batch_size=8)
        comb = TrainingStrategy.combined(steps=12, lr=3e-3, batch_size=8)
        assert not same(train_classifier(augmented, two, CFG, 4), train_classifier(augmented, comb, CFG, 4))

    def test_baseline_ignores_synthetic(self, augmented, shapes_manifest):
        s = TrainingStrategy.baseline(steps=10, batch_size=8)
        assert same(train_classifier(augmented, s, CFG, 0), train_classifier(shapes_manifest, s, CFG, 0))

    @pytest.mark.parametrize("kind", ["combined", "rsp", "two_phase"])
    def test_needs_synthetic(self, shapes_manifest, kind):
        s = {"combined": TrainingStrategy.combined(), "rsp": TrainingStrategy.rsp(),
             "two_phase": TrainingStrategy.two_phase()}[kind]
        with pytest.raises(ConfigError):
            train_classifier(shapes_manifest, s, CFG, 0)

    def test_memorizes_tiny_set(self, shapes_manifest):
        model = train_classifier(shapes_manifest, TrainingStrategy.baseline(steps=300, lr=5e-3, batch_size=18),
                                 ClassifierConfig(3, image_size=16, widths=(8, 16)), 0)
        assert evaluate(model, shapes_manifest).accuracy == 1.0


class TestEvaluate:
    def test_constant_classifier(self, test_set):
        rep = evaluate(ConstantClassifier(), test_set)
        assert rep.accuracy == pytest.approx(1 / 3) and rep.correct == 10 and rep.total == 30
        assert [row[0] for row in rep.confusion] == [10, 10, 10]

    def test_confusion_row_sums(self, shapes_manifest, test_set):
        model = train_classifier(shapes_manifest, TrainingStrategy.baseline(steps=20, batch_size=8), CFG, 0)
        rep = evaluate(model, test_set, shapes_manifest)
        assert [sum(r) for r in rep.confusion] == [10, 10, 10]
        assert rep.accuracy == rep.correct / rep.total and 0 <= rep.accuracy <= 1

    def test_leakage(self, shapes_manifest, augmented):
        with pytest.raises(LeakageError):
            evaluate(ConstantClassifier(), shapes_manifest, augmented)

    def test_leakage_through_relative_path(self, shapes_manifest):
        rec = shapes_manifest.records[0]
        moved = DatasetManifest([replace(rec, path=str(shapes_manifest.resolve(rec)))], shapes_manifest.classes,
                                "/")
        with pytest.raises(LeakageError):
            evaluate(ConstantClassifier(), moved, shapes_manifest)


class TestCompare:
    def test_rows_and_deltas(self, augmented, test_set, tmp_path):
        strategies = {"baseline": TrainingStrategy.baseline(steps=10, batch_size=8),
                      "combined": TrainingStrategy.combined(steps=10, batch_size=8),
                      "combined_again": TrainingStrategy.combined(steps=10, batch_size=8),
                      "rsp": TrainingStrategy.rsp(0.8, steps=10, batch_size=8),
                      "two_phase": TrainingStrategy.two_phase(Phase(10, 2e-3), Phase(3, 2e-4), batch_size=8)}
        rep = compare_strategies(augmented, test_set, strategies, [0, 1], CFG)
        assert [r.name for r in rep.rows] == list(strategies)
        assert rep.row("combined").accuracies == rep.row("combined_again").accuracies
        base = rep.row("baseline").mean
        for r in rep.rows:
            assert r.mean == float(np.mean(r.accuracies))
            assert r.delta == r.mean - base
        rep.save(tmp_path / "report")
        text = (tmp_path / "report.txt").read_text()
        assert all(name in text for name in strategies)
        assert (tmp_path / "report.json").read_text().count('"delta"') == 5

    def test_no_seeds(self, augmented, test_set):
        with pytest.raises(InvalidArgumentError):
            compare_strategies(augmented, test_set, {"b": TrainingStrategy.baseline()}, [], CFG)

    def test_text_format(self):
        rep = ComparisonReport([StrategyRow("baseline", "baseline", [0.5, 0.7], 0.6, 0.1, 0.0),
                                StrategyRow("rsp", "rsp", [0.65], 0.65, 0.0, 0.05)], [0])
        lines = rep.to_text().splitlines()
        assert lines[2].split()[:4] == ["baseline", "60.0", "10.0", "+0.0"]
        assert lines[3].split()[:4] == ["rsp", "65.0", "0.0", "+5.0"]

    def test_shared_seed_same_model(self, shapes_manifest):
        a = Classifier(CFG)
        b = Classifier(CFG)
        seeded_init_(a, 3)
        seeded_init_(b, 3)
        assert same(a, b)
