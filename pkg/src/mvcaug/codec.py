"""Image <-> latent autoencoder.

``identity`` mode maps pixels in [0, 1] to latents in [-1, 1] with
``z = 2x - 1`` and back with ``x = clamp((z + 1) / 2, 0, 1)``.  Both maps are
evaluated in float64 (identity latents are float64), which makes the round
trip exact for float32 pixels >= 2**-28, in particular all 8-bit images.  ``learned``
mode is a small convolutional autoencoder with spatial downsampling ``f``
(a power of two) trained on plain MSE.  After training, learned latents are
standardized per channel with the training set's mean and std (stored in the
checkpoint as ``latent_shift`` / ``latent_scale``) so they match the unit
scale of the diffusion noise.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import rng as rng_mod
from .errors import InvalidArgumentError, ShapeError
from .nn import Adam, group_count, load_state, read_checkpoint, save_checkpoint, seeded_init_

log = logging.getLogger(__name__)

IDENTITY = "identity"
LEARNED = "learned"


@dataclass(frozen=True)
class CodecConfig:
    mode: str = IDENTITY
    image_channels: int = 1
    latent_channels: int = 4
    f: int = 4
    width: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.mode not in (IDENTITY, LEARNED):
            raise InvalidArgumentError(f"unknown codec mode {self.mode!r}")
        if self.mode == IDENTITY and self.f != 1:
            object.__setattr__(self, "f", 1)
        if self.mode == IDENTITY:
            object.__setattr__(self, "latent_channels", self.image_channels)
        if self.f < 1 or self.f & (self.f - 1):
            raise InvalidArgumentError(f"downsample factor must be a power of two, got {self.f}")


class Codec(nn.Module):
    def __init__(self, config: CodecConfig):
        super().__init__()
        self.config = cfg = config
        if cfg.mode == LEARNED:
            n = int(math.log2(cfg.f))
            enc = [nn.Conv2d(cfg.image_channels, cfg.width, 3, padding=1), nn.SiLU()]
            for _ in range(n):
                enc += [nn.Conv2d(cfg.width, cfg.width, 4, stride=2, padding=1), nn.SiLU()]
            enc += [nn.Conv2d(cfg.width, cfg.latent_channels, 3, padding=1)]
            dec = [nn.Conv2d(cfg.latent_channels, cfg.width, 3, padding=1), nn.SiLU()]
            for _ in range(n):
                dec += [nn.ConvTranspose2d(cfg.width, cfg.width, 4, stride=2, padding=1), nn.SiLU()]
            dec += [nn.Conv2d(cfg.width, cfg.image_channels, 3, padding=1)]
            self.encoder = nn.Sequential(*enc)
            self.decoder = nn.Sequential(*dec)
            seeded_init_(self, cfg.seed)
            self.register_buffer("latent_shift", torch.zeros(cfg.latent_channels, 1, 1))
            self.register_buffer("latent_scale", torch.ones(cfg.latent_channels, 1, 1))

    @property
    def identity(self) -> bool:
        return self.config.mode == IDENTITY

    def latent_shape(self, image_shape) -> tuple[int, int, int]:
        c, h, w = image_shape
        f = self.config.f
        if h % f or w % f:
            raise ShapeError(f"image size {h}x{w} not divisible by downsample factor {f}")
        return (self.config.latent_channels, h // f, w // f)

    def _batch(self, x, channels):
        x = torch.as_tensor(x)
        if not x.is_floating_point():
            x = x.float()
        single = x.ndim == 3
        if single:
            x = x.unsqueeze(0)
        if x.ndim != 4 or x.shape[1] != channels:
            raise ShapeError(f"expected (B, {channels}, H, W), got {tuple(x.shape)}")
        return x, single

    def encode(self, x):
        x, single = self._batch(x, self.config.image_channels)
        self.latent_shape(x.shape[1:])
        if self.identity:
            z = 2.0 * x.double() - 1.0
        else:
            z = (self.encoder(2.0 * x.float() - 1.0) - self.latent_shift) / self.latent_scale
        return z[0] if single else z

    def decode_raw(self, z):
        z, single = self._batch(z, self.config.latent_channels)
        if self.identity:
            x = ((z.double() + 1.0) / 2.0).float()
        else:
            x = (self.decoder(z.float() * self.latent_scale + self.latent_shift) + 1.0) / 2.0
        return x[0] if single else x

    def decode(self, z):
        return self.decode_raw(z).clamp(0.0, 1.0)


def encode(codec: Codec, x):
    return codec.encode(x)


def decode(codec: Codec, z):
    return codec.decode(z)


def train_codec(images, config: CodecConfig, steps: int = 2000, lr: float = 2e-3, batch_size: int = 16,
                seed: int = 0) -> tuple[Codec, list[float]]:
    """Fit a codec by minimizing reconstruction MSE; returns ``(codec, loss_curve)``."""
    images = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    if images.ndim != 4 or images.shape[0] == 0:
        raise InvalidArgumentError("train_codec needs a non-empty (N, C, H, W) image stack")
    torch.use_deterministic_algorithms(True)
    codec = Codec(config)
    if codec.identity:
        return codec, []
    opt = Adam(codec, lr)
    gen = rng_mod.stream(seed, "codec")
    curve = []
    n = images.shape[0]
    for step in range(steps):
        idx = torch.as_tensor(gen.integers(0, n, min(batch_size, n)))
        x = images[idx]
        opt.zero_grad()
        loss = torch.mean((codec.decoder(codec.encoder(2.0 * x - 1.0)) - (2.0 * x - 1.0)) ** 2) / 4.0
        loss.backward()
        # cosine decay keeps the final reconstruction error stable
        opt.step(lr * 0.5 * (1 + math.cos(math.pi * step / max(steps, 1))))
        curve.append(float(loss.detach()))
        if step % 500 == 0:
            log.info("codec step %d loss %.5f", step, curve[-1])
    with torch.no_grad():
        raw = torch.cat([codec.encoder(2.0 * images[i:i + 256] - 1.0) for i in range(0, n, 256)])
        codec.latent_shift.copy_(raw.mean(dim=(0, 2, 3))[:, None, None])
        codec.latent_scale.copy_(raw.std(dim=(0, 2, 3))[:, None, None].clamp_min(1e-6))
    return codec, curve


@torch.no_grad()
def reconstruction_error(codec: Codec, images) -> float:
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    return float(torch.mean((codec.decode(codec.encode(x)) - x) ** 2))


def save_codec(path, codec: Codec) -> None:
    save_checkpoint(path, codec, "codec", asdict(codec.config))


def load_codec(path) -> Codec:
    header, state = read_checkpoint(path, kind="codec")
    return load_state(Codec(CodecConfig(**header["config"])), state)
