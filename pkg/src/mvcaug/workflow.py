"""Builders from :class:`RunConfig` and the end-to-end augmentation experiment."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .captions import TokenEmbedder
from .classifier import ClassifierConfig, ComparisonReport, Phase, TrainingStrategy, compare_strategies
from .codec import Codec, CodecConfig, reconstruction_error, save_codec, train_codec
from .config import RunConfig
from .data import DatasetManifest
from .denoiser import DenoiserConfig, save_denoiser
from .diffusion import GuidanceConfig, NoiseSchedule, make_schedule
from .mvc import MixerConfig
from .pipeline import DiffusionBundle, TrainConfig, build_augmented_dataset, finetune_diffusion, smoothed

log = logging.getLogger(__name__)


def embedder_from(cfg: RunConfig) -> TokenEmbedder:
    return TokenEmbedder(cfg.embedder.seed, cfg.embedder.m, cfg.embedder.d)


def mixer_from(cfg: RunConfig, n_y: int | None = None) -> MixerConfig:
    return MixerConfig(cfg.mixer.P, cfg.mixer.Q, n_y or cfg.mixer.N_y, cfg.seed)


def schedule_from(cfg: RunConfig) -> NoiseSchedule:
    return make_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)


def guidance_from(cfg: RunConfig) -> GuidanceConfig:
    return GuidanceConfig(cfg.guidance.w, cfg.guidance.null_image)


def codec_config_from(cfg: RunConfig) -> CodecConfig:
    c = cfg.codec
    return CodecConfig(c.mode, cfg.data.channels, c.latent_channels, c.f if c.mode == "learned" else 1,
                       c.width, cfg.seed)


def denoiser_config_from(cfg: RunConfig, latent_channels: int) -> DenoiserConfig:
    d = cfg.denoiser
    return DenoiserConfig(latent_channels, latent_channels, d.base_width, d.levels, d.time_embed_dim,
                          cfg.embedder.m, cfg.embedder.d, d.conditioning_mode, d.res_blocks, cfg.seed)


def train_config_from(cfg: RunConfig) -> TrainConfig:
    p = cfg.pipeline
    return TrainConfig(p.steps, p.batch_size, p.lr, p.refresh_every, p.uncond_prob,
                       drop_image=cfg.guidance.null_image)


def strategy_from(cfg: RunConfig, kind: str) -> TrainingStrategy:
    c = cfg.classifier
    if kind == "baseline":
        return TrainingStrategy.baseline(c.steps, c.lr, c.batch_size)
    if kind == "combined":
        return TrainingStrategy.combined(c.steps, c.lr, c.batch_size)
    if kind == "rsp":
        return TrainingStrategy.rsp(c.p, c.steps, c.lr, c.batch_size)
    return TrainingStrategy.two_phase(Phase(c.phase1.steps, c.phase1.lr), Phase(c.phase2.steps, c.phase2.lr),
                                      c.batch_size)


def strategies_from(cfg: RunConfig) -> dict[str, TrainingStrategy]:
    return {kind: strategy_from(cfg, kind) for kind in cfg.classifier.strategies}


def classifier_config_from(cfg: RunConfig, num_classes: int) -> ClassifierConfig:
    return ClassifierConfig(num_classes, cfg.data.channels, cfg.data.image_size, tuple(cfg.classifier.widths))


def train_codec_from(cfg: RunConfig, manifest: DatasetManifest) -> Codec:
    real = manifest.real()
    images = real.load_images(channels=cfg.data.channels)
    codec, curve = train_codec(images, codec_config_from(cfg), cfg.codec.steps, cfg.codec.lr,
                               cfg.codec.batch_size, cfg.seed)
    log.info("codec reconstruction mse %.5f", reconstruction_error(codec, images))
    return codec


def train_diffusion_from(cfg: RunConfig, manifest: DatasetManifest, codec: Codec):
    dcfg = denoiser_config_from(cfg, codec.config.latent_channels)
    return finetune_diffusion(manifest, codec, dcfg, mixer_from(cfg), schedule_from(cfg), train_config_from(cfg),
                              cfg.seed, embedder_from(cfg), cfg.data.channels)


@dataclass
class ExperimentResult:
    report: ComparisonReport
    augmented: DatasetManifest
    codec_mse: float
    loss_start: float
    loss_end: float


def run_experiment(cfg: RunConfig, train: DatasetManifest, test: DatasetManifest, out_dir) -> ExperimentResult:
    """Codec -> diffusion training -> synthetic data -> strategy comparison, all under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.yaml")
    codec = train_codec_from(cfg, train)
    save_codec(out_dir / "codec.ckpt", codec)
    mse = reconstruction_error(codec, train.real().load_images(channels=cfg.data.channels))
    model, curve = train_diffusion_from(cfg, train, codec)
    save_denoiser(out_dir / "denoiser.ckpt", model)
    s = smoothed(curve) if curve else np.array([np.nan])
    bundle = DiffusionBundle(codec, model, schedule_from(cfg), embedder_from(cfg))
    augmented = build_augmented_dataset(train, cfg.pipeline.ratio, bundle, out_dir / "augmented",
                                        guidance_from(cfg), mixer_from(cfg), cfg.seed, cfg.data.channels,
                                        cfg.guidance.ancestral, cfg.pipeline.gen_batch_size)
    report = compare_strategies(augmented, test, strategies_from(cfg), cfg.classifier.seeds,
                                classifier_config_from(cfg, len(train.classes)))
    report.save(out_dir / "report")
    (out_dir / "summary.json").write_text(json.dumps(
        {"codec_mse": mse, "loss_start": float(s[0]), "loss_end": float(s[-1])}, indent=1))
    return ExperimentResult(report, augmented, mse, float(s[0]), float(s[-1]))
