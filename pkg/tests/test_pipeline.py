import numpy as np
import pytest
import torch

from mvcaug.captions import TokenEmbedder
from mvcaug.codec import Codec, CodecConfig
from mvcaug.data import EXTERNAL, REAL, SYNTHETIC, DatasetManifest, load_image, save_image
from mvcaug.denoiser import Denoiser, DenoiserConfig
from mvcaug.diffusion import GuidanceConfig, make_schedule
from mvcaug.errors import ConfigError, InvalidArgumentError
from mvcaug.mvc import MixerConfig
from mvcaug.pipeline import (DiffusionBundle, GenerationRequest, TrainConfig, build_augmented_dataset,
                             finetune_diffusion, generate_images, import_external, record_caption, regenerate,
                             sample_training_pair, smoothed, synthetic_counts)
from mvcaug.shapes import generate_shapes

EMB = TokenEmbedder(seed=0, m=16, d=8)
DEN = DenoiserConfig(latent_channels=1, cond_channels=1, base_width=8, levels=2, time_embed_dim=16,
                     text_m=16, text_d=8, conditioning_mode="cross_attention")
SCHED = make_schedule(20, 1e-3, 0.2)


def train(manifest, steps=30, seed=0):
    return finetune_diffusion(manifest, Codec(CodecConfig()), DEN, MixerConfig(), SCHED,
                              TrainConfig(steps=steps, batch_size=4, lr=2e-3, refresh_every=10), seed, EMB)


@pytest.fixture(scope="module")
def bundle(shapes_manifest):
    model, _ = train(shapes_manifest)
    return DiffusionBundle(Codec(CodecConfig()), model, SCHED, EMB)


@pytest.fixture(scope="module")
def four(tmp_path_factory):
    return generate_shapes(tmp_path_factory.mktemp("four"), classes=("circle", "square"), count=4, size=16, seed=1)


class TestTrainingPair:
    def test_singleton_class(self, tmp_path):
        m = generate_shapes(tmp_path, classes=("cross",), count=1, size=16, seed=0)
        g = np.random.default_rng(0)
        for _ in range(5):
            x, xp = sample_training_pair(m, "cross", g)
            assert np.array_equal(x, xp)

    def test_frequencies_and_distinct(self, four):
        imgs = four.load_images(four.select("circle"))
        g = np.random.default_rng(0)
        counts = np.zeros(4)
        for _ in range(10_000):
            x, xp = sample_training_pair(four, "circle", g)
            i = [k for k in range(4) if np.array_equal(imgs[k], x)]
            j = [k for k in range(4) if np.array_equal(imgs[k], xp)]
            assert len(i) == 1 and len(j) == 1 and i != j
            counts[i[0]] += 1
        np.testing.assert_allclose(counts / 10_000, 0.25, atol=0.02)

    def test_shared_label(self, four):
        square = {load_image(four.resolve(r)).tobytes() for r in four.select("square")}
        g = np.random.default_rng(2)
        for _ in range(20):
            x, xp = sample_training_pair(four, "square", g)
            assert x.tobytes() in square and xp.tobytes() in square

    def test_unknown_class(self, four):
        with pytest.raises(InvalidArgumentError):
            sample_training_pair(four, "triangle", np.random.default_rng(0))


class TestFinetune:
    def test_zero_steps_is_init(self, shapes_manifest):
        model, curve = train(shapes_manifest, steps=0)
        fresh = Denoiser(DEN)
        assert curve == []
        assert all(torch.equal(a, b) for a, b in zip(model.parameters(), fresh.parameters()))

    def test_deterministic(self, shapes_manifest):
        a, ca = train(shapes_manifest, steps=8, seed=3)
        b, cb = train(shapes_manifest, steps=8, seed=3)
        assert ca == cb
        assert all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))

    def test_loss_moves_from_initial_value(self, shapes_manifest):
        _, curve = train(shapes_manifest, steps=30)
        assert len(curve) == 30 and np.isfinite(curve).all()
        assert np.mean(curve[-10:]) < np.mean(curve[:10])

    def test_dimension_mismatch(self, shapes_manifest):
        with pytest.raises(ConfigError):
            finetune_diffusion(shapes_manifest, Codec(CodecConfig()), DEN, MixerConfig(), SCHED,
                               TrainConfig(steps=1), 0, TokenEmbedder(m=4, d=8))

    def test_smoothed(self):
        np.testing.assert_allclose(smoothed([1, 2, 3, 4], window=2), [1.5, 2.5, 3.5])

    @pytest.mark.parametrize("kw", [dict(steps=-1), dict(lr=0.0), dict(uncond_prob=1.0), dict(refresh_every=0)])
    def test_config_invalid(self, kw):
        with pytest.raises(InvalidArgumentError):
            TrainConfig(**kw)


class TestGenerate:
    def test_count_shape_purity(self, shapes_manifest, bundle):
        out = generate_images(GenerationRequest("square", 5, seed=1), shapes_manifest, bundle)
        assert len(out) == 5
        square_paths = {r.path for r in shapes_manifest.select("square")}
        for img, meta in out:
            assert img.shape == (1, 16, 16) and img.min() >= 0 and img.max() <= 1
            assert meta["mixing"]["class_label"] == "square"
            assert meta["conditional_path"] in square_paths
            assert meta["guidance_w"] == 7.5

    def test_deterministic(self, shapes_manifest, bundle):
        req = GenerationRequest("circle", 3, GuidanceConfig(3.0), MixerConfig(1, 1, 3, 2), seed=4)
        a = generate_images(req, shapes_manifest, bundle)
        b = generate_images(req, shapes_manifest, bundle)
        assert all(np.array_equal(x[0], y[0]) and x[1] == y[1] for x, y in zip(a, b))

    def test_regenerate_bit_exact(self, shapes_manifest, bundle):
        for img, meta in generate_images(GenerationRequest("cross", 3, seed=9), shapes_manifest, bundle):
            assert np.array_equal(regenerate(meta, shapes_manifest, bundle), img)

    def test_count_invalid(self):
        with pytest.raises(InvalidArgumentError):
            GenerationRequest("circle", 0)

    def test_incompatible_model(self, shapes_manifest, bundle):
        bad = DiffusionBundle(bundle.codec, bundle.model, SCHED, TokenEmbedder(m=4, d=8))
        with pytest.raises(ConfigError):
            generate_images(GenerationRequest("circle", 1), shapes_manifest, bad)

    def test_record_caption_prefix(self, shapes_manifest):
        rec = shapes_manifest.select("circle")[0]
        assert record_caption(rec).text.startswith("This is an image of circle")


class TestAugment:
    def test_counts(self, four):
        assert synthetic_counts(four, 3) == {"circle": 12, "square": 12}
        assert synthetic_counts(DatasetManifest(four.select("circle")[:3], ["circle"], four.root), 0.5) == {"circle": 2}
        with pytest.raises(InvalidArgumentError):
            synthetic_counts(four, 0)

    def test_ratio_three_on_ten_per_class(self, tmp_path, bundle):
        real = generate_shapes(tmp_path / "real", classes=("circle", "square"), count=10, size=16, seed=5)
        merged = build_augmented_dataset(real, 3, bundle, tmp_path / "aug", GuidanceConfig(2.0), seed=1)
        assert len(merged) == 80
        assert merged.counts(SYNTHETIC) == {"circle": 30, "square": 30}
        assert merged.counts(REAL) == {"circle": 10, "square": 10}
        merged.validate((1, 16, 16))
        again = DatasetManifest.load(tmp_path / "aug" / "manifest.json")
        again.validate((1, 16, 16))
        assert again.fingerprint() == merged.fingerprint()
        rec = merged.select("square", SYNTHETIC)[4]
        want = regenerate(rec.meta, real, bundle)
        assert np.array_equal(load_image(merged.resolve(rec)), np.round(want * 255) / 255)

    def test_import_external(self, tmp_path, four):
        p = tmp_path / "ext.png"
        save_image(p, np.full((1, 16, 16), 0.25, dtype=np.float32))
        out = import_external(four, [(p, "circle")])
        assert len(out) == len(four) + 1
        assert out.records[-1].provenance == EXTERNAL
        assert len(out.select("circle", SYNTHETIC)) == 1
        out.validate((1, 16, 16))
        with pytest.raises(InvalidArgumentError):
            import_external(four, [(p, "triangle")])
