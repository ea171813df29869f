"""Training and generation loops that turn a labeled dataset into an augmented one.

Training: for each example pick a class, draw two images ``x, x'`` of that
class, encode them to ``z0`` and ``e_I``, draw a text conditioning from the
class's mixed-embedding pool (rebuilt every ``refresh_every`` steps), and
take an Adam step on the noise-prediction loss.

Generation: for each output pick a conditional image of the class, encode it,
take one mixed conditioning, run the guided sampler from pure noise and
decode.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import rng as rng_mod
from .captions import (Caption, CaptionSource, TokenEmbedder, build_caption, caption_prefix,
                       embed_caption, null_embedding)
from .codec import Codec
from .data import EXTERNAL, REAL, SYNTHETIC, DatasetManifest, Record, load_image, save_image
from .denoiser import Denoiser, DenoiserConfig, build_denoiser
from .diffusion import GuidanceConfig, NoiseSchedule, sample, training_loss
from .errors import ConfigError, InvalidArgumentError, NumericError
from .mvc import MixerConfig, mix_embeddings, replay_provenance
from .nn import Adam

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    refresh_every: int = 500
    # probability of swapping the text conditioning for the null embedding,
    # so the unconditional branch of guidance is trained
    uncond_prob: float = 0.1
    # also zero the image conditioning on those examples
    drop_image: bool = False
    cosine_decay: bool = True

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.refresh_every < 1:
            raise InvalidArgumentError("steps >= 0, batch_size >= 1 and refresh_every >= 1 required")
        if not self.lr > 0:
            raise InvalidArgumentError("lr must be > 0")
        if not 0 <= self.uncond_prob < 1:
            raise InvalidArgumentError("uncond_prob must be in [0, 1)")


@dataclass(frozen=True)
class GenerationRequest:
    class_label: str
    count: int
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    mixer: MixerConfig = field(default_factory=MixerConfig)
    seed: int = 0
    ancestral: bool = False

    def __post_init__(self):
        if self.count < 1:
            raise InvalidArgumentError(f"generation count must be >= 1, got {self.count}")


@dataclass
class DiffusionBundle:
    """Everything generation needs: codec, trained denoiser, schedule and text embedder."""
    codec: Codec
    model: Denoiser
    schedule: NoiseSchedule
    embedder: TokenEmbedder


def record_caption(rec: Record) -> Caption:
    """Caption for a record: its stored text, templated with the class prefix."""
    text = rec.caption
    if not text:
        return build_caption(rec.label)
    if text.startswith(caption_prefix(rec.label)):
        return Caption(rec.label, text, CaptionSource.TEMPLATED)
    return build_caption(rec.label, text)


def class_embedding_pool(manifest: DatasetManifest, label: str, embedder: TokenEmbedder) -> list[np.ndarray]:
    recs = manifest.select(label, REAL)
    if not recs:
        raise InvalidArgumentError(f"class {label!r} has no real images")
    return [embed_caption(embedder, record_caption(r)) for r in recs]


def _pair_indices(n: int, gen: np.random.Generator) -> tuple[int, int]:
    i = int(gen.integers(0, n))
    if n == 1:
        return 0, 0
    j = int(gen.integers(0, n - 1))
    return i, j + 1 if j >= i else j


def sample_training_pair(manifest: DatasetManifest, class_label: str, gen: np.random.Generator,
                         channels: int = 1):
    """Two images ``(x, x')`` of one class; identical only for a singleton class."""
    if class_label not in manifest.classes:
        raise InvalidArgumentError(f"unknown class {class_label!r}")
    recs = manifest.select(class_label, REAL)
    if not recs:
        raise InvalidArgumentError(f"class {class_label!r} has no real images")
    i, j = _pair_indices(len(recs), gen)
    return (load_image(manifest.resolve(recs[i]), channels), load_image(manifest.resolve(recs[j]), channels))


@torch.no_grad()
def _encode_all(codec: Codec, images: np.ndarray) -> torch.Tensor:
    return codec.encode(torch.from_numpy(images)).float()


def finetune_diffusion(manifest: DatasetManifest, codec: Codec, denoiser_config: DenoiserConfig,
                       mixer: MixerConfig, schedule: NoiseSchedule, train: TrainConfig, seed: int,
                       embedder: TokenEmbedder, channels: int = 1) -> tuple[Denoiser, list[float]]:
    """Train the conditional denoiser on the real records of ``manifest``.

    Returns the model and the per-step loss curve.
    """
    real = manifest.real()
    classes = [c for c in real.classes if real.select(c)]
    if not classes:
        raise InvalidArgumentError("manifest has no real images")
    if (denoiser_config.text_m, denoiser_config.text_d) != (embedder.m, embedder.d):
        raise ConfigError("denoiser text dimensions do not match the embedder")
    model = build_denoiser(denoiser_config)
    if train.steps == 0:
        return model, []

    by_class = {c: real.select(c) for c in classes}
    latents = {c: _encode_all(codec, real.load_images(by_class[c], channels)) for c in classes}
    if latents[classes[0]].shape[1:] != (denoiser_config.latent_channels,) + tuple(latents[classes[0]].shape[2:]):
        raise ConfigError("codec latent channels do not match the denoiser")
    pools = {c: class_embedding_pool(real, c, embedder) for c in classes}
    null = torch.from_numpy(null_embedding(embedder))

    gen = rng_mod.stream(seed, "finetune")
    tgen = rng_mod.torch_generator(seed, "finetune-noise")
    opt = Adam(model, train.lr)
    mixed: dict[str, torch.Tensor] = {}
    curve: list[float] = []
    model.train()
    for step in range(train.steps):
        if step % train.refresh_every == 0:
            refresh = step // train.refresh_every
            for c in classes:
                cfg = MixerConfig(mixer.P, mixer.Q, mixer.N_y, mixer.seed)
                if len(pools[c]) == 1:
                    cfg = MixerConfig(0, 0, mixer.N_y, mixer.seed)
                conds = mix_embeddings(pools[c], cfg, null.numpy(), c,
                                       gen=rng_mod.stream(seed, "train-mvc", c, refresh))
                mixed[c] = torch.from_numpy(np.stack([k.e_cond for k in conds]))
        z0, e_I, e_T = [], [], []
        for _ in range(train.batch_size):
            c = classes[int(gen.integers(0, len(classes)))]
            i, j = _pair_indices(latents[c].shape[0], gen)
            z0.append(latents[c][i])
            e_I.append(latents[c][j])
            e_T.append(mixed[c][int(gen.integers(0, mixed[c].shape[0]))])
        z0, e_I, e_T = torch.stack(z0), torch.stack(e_I), torch.stack(e_T)
        t = torch.randint(1, schedule.T + 1, (train.batch_size,), generator=tgen)
        eps = torch.randn(z0.shape, generator=tgen)
        drop = torch.rand(train.batch_size, generator=tgen) < train.uncond_prob
        e_T = torch.where(drop[:, None, None], null.expand_as(e_T), e_T)
        if train.drop_image:
            e_I = torch.where(drop[:, None, None, None], torch.zeros_like(e_I), e_I)
        if not denoiser_config.cond_channels:
            e_I = None

        opt.zero_grad()
        loss = training_loss(model, z0, t, eps, e_T, e_I, schedule)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NumericError(f"diffusion training diverged at step {step}")
        loss.backward()
        lr = train.lr
        if train.cosine_decay:
            lr = train.lr * 0.5 * (1 + math.cos(math.pi * step / train.steps))
        opt.step(max(lr, train.lr * 1e-3))
        curve.append(value)
        if step % 200 == 0:
            log.info("diffusion step %d loss %.4f", step, value)
    model.eval()
    return model, curve


def smoothed(curve, window: int = 100) -> np.ndarray:
    c = np.asarray(curve, dtype=np.float64)
    w = max(1, min(window, len(c)))
    return np.convolve(c, np.ones(w) / w, mode="valid")


def _run_sampler(bundle: DiffusionBundle, conds, e_I, guidance, seeds, ancestral):
    if bundle.model.config.cond_channels:
        return sample(bundle.model, bundle.schedule, conds, e_I, guidance, seeds, ancestral=ancestral)
    return sample(bundle.model, bundle.schedule, conds, None, guidance, seeds,
                  latent_shape=tuple(e_I.shape[1:]), ancestral=ancestral)


def generate_images(request: GenerationRequest, manifest: DatasetManifest, bundle: DiffusionBundle,
                    channels: int = 1, batch_size: int = 1) -> list[tuple[np.ndarray, dict]]:
    """Generate ``request.count`` images of one class with provenance metadata.

    Each output gets its own noise seed; the metadata stores that seed, the
    conditional image path, the mixing provenance and the guidance settings,
    which is enough for :func:`regenerate` to reproduce the pixels.  Batched
    convolutions round differently from single-image ones, so only the default
    ``batch_size=1`` regenerates bit-identically.
    """
    label = request.class_label
    real = manifest.real()
    if label not in real.classes or not real.select(label):
        raise InvalidArgumentError(f"class {label!r} has no real images to condition on")
    m = bundle.model.config
    if (m.text_m, m.text_d) != (bundle.embedder.m, bundle.embedder.d):
        raise ConfigError("denoiser was trained with different text dimensions")
    if m.latent_channels != bundle.codec.config.latent_channels:
        raise ConfigError("denoiser and codec latent channels differ")

    recs = real.select(label)
    pool = class_embedding_pool(real, label, bundle.embedder)
    null = null_embedding(bundle.embedder)
    mix_cfg = MixerConfig(request.mixer.P, request.mixer.Q, request.count, request.mixer.seed ^ request.seed)
    if len(pool) == 1:
        mix_cfg = MixerConfig(0, 0, request.count, mix_cfg.seed)
    conds = mix_embeddings(pool, mix_cfg, null, label)
    gen = rng_mod.stream(request.seed, "generate", label)
    picks = [int(gen.integers(0, len(recs))) for _ in range(request.count)]
    seeds = [rng_mod.child_seed(gen) for _ in range(request.count)]

    out = []
    for lo in range(0, request.count, batch_size):
        hi = min(lo + batch_size, request.count)
        imgs = np.stack([load_image(real.resolve(recs[k]), channels) for k in picks[lo:hi]])
        with torch.no_grad():
            e_I = bundle.codec.encode(torch.from_numpy(imgs)).float()
            z0 = _run_sampler(bundle, conds[lo:hi], e_I, request.guidance, seeds[lo:hi], request.ancestral)
            x = bundle.codec.decode(z0).numpy()
        for n, k in enumerate(range(lo, hi)):
            meta = {"seed": seeds[k], "conditional_path": recs[picks[k]].path,
                    "mixing": conds[k].provenance_json(), "guidance_w": request.guidance.w,
                    "null_image": request.guidance.null_image, "ancestral": request.ancestral}
            out.append((x[n], meta))
    return out


def regenerate(meta: dict, manifest: DatasetManifest, bundle: DiffusionBundle, channels: int = 1) -> np.ndarray:
    """Rebuild one synthetic image from its provenance metadata."""
    real = manifest.real()
    label = meta["mixing"]["class_label"]
    pool = class_embedding_pool(real, label, bundle.embedder)
    cond = replay_provenance(pool, null_embedding(bundle.embedder), meta["mixing"])
    rec = next(r for r in real.select(label) if r.path == meta["conditional_path"])
    img = load_image(real.resolve(rec), channels)[None]
    guidance = GuidanceConfig(meta["guidance_w"], meta.get("null_image", False))
    with torch.no_grad():
        e_I = bundle.codec.encode(torch.from_numpy(img)).float()
        z0 = _run_sampler(bundle, [cond], e_I, guidance, [meta["seed"]], meta.get("ancestral", False))
        return bundle.codec.decode(z0).numpy()[0]


def synthetic_counts(real: DatasetManifest, ratio: float) -> dict[str, int]:
    if not ratio > 0:
        raise InvalidArgumentError(f"synthetic ratio must be > 0, got {ratio}")
    return {c: math.ceil(ratio * n) for c, n in real.counts(REAL).items() if n}


def build_augmented_dataset(real: DatasetManifest, ratio: float, bundle: DiffusionBundle, out_dir,
                            guidance: GuidanceConfig | None = None, mixer: MixerConfig | None = None,
                            seed: int = 0, channels: int = 1, ancestral: bool = False,
                            batch_size: int = 1) -> DatasetManifest:
    """Generate ``ceil(ratio * n_c)`` images per class and merge them with the real records.

    Images are written as ``<out_dir>/<label>/syn_XXXX.png``; the merged
    manifest is saved to ``<out_dir>/manifest.json``.
    """
    counts = synthetic_counts(real, ratio)
    out_dir = Path(out_dir)
    guidance = guidance or GuidanceConfig()
    mixer = mixer or MixerConfig()
    records = []
    for label, n in counts.items():
        req = GenerationRequest(label, n, guidance, mixer, rng_mod.label_word(label) ^ seed, ancestral)
        for k, (img, meta) in enumerate(generate_images(req, real, bundle, channels, batch_size)):
            rel = Path(label) / f"syn_{k:04d}.png"
            save_image(out_dir / rel, img)
            records.append(Record(str((out_dir / rel).resolve()), label, None, SYNTHETIC, meta))
        log.info("generated %d synthetic images for %s", n, label)
    syn = DatasetManifest(records, list(real.classes), out_dir.resolve())
    merged = real.real().merged(syn, root=out_dir.resolve())
    merged.save(out_dir / "manifest.json")
    return merged


def import_external(manifest: DatasetManifest, items, out_root=None) -> DatasetManifest:
    """Add externally generated images ``[(path, label), ...]`` as ``synthetic(external)`` records."""
    recs = list(manifest.records)
    for path, label in items:
        if label not in manifest.classes:
            raise InvalidArgumentError(f"unknown class {label!r}")
        recs.append(Record(str(Path(path).resolve()), label, None, EXTERNAL, {"source": "external"}))
    return DatasetManifest(recs, list(manifest.classes), out_root or manifest.root)
