"""Conditional noise predictor: a small U-Net with text and image conditioning.

The image latent is concatenated to the noisy latent along channels; the time
step enters every residual block through a sinusoidal embedding and a
two-layer projection; text conditioning is applied once at the bottleneck,
either by single-head cross-attention over the ``m`` token rows or by adding a
bias-free projection of the token mean.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import InvalidArgumentError, NumericError, ShapeError
from .nn import group_count, load_state, read_checkpoint, save_checkpoint, seeded_init_

CROSS_ATTENTION = "cross_attention"
POOLED_ADDITIVE = "pooled_additive"


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 4
    cond_channels: int = 4  # channels of the image-conditioning latent; 0 disables it
    base_width: int = 32
    levels: int = 2
    time_embed_dim: int = 64
    text_m: int = 16
    text_d: int = 32
    conditioning_mode: str = CROSS_ATTENTION
    res_blocks: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("latent_channels", "base_width", "time_embed_dim", "text_m", "text_d", "res_blocks"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be positive")
        if self.cond_channels < 0 or self.levels < 0:
            raise InvalidArgumentError("cond_channels and levels must be >= 0")
        if self.time_embed_dim % 2:
            raise InvalidArgumentError("time_embed_dim must be even")
        if self.conditioning_mode not in (CROSS_ATTENTION, POOLED_ADDITIVE):
            raise InvalidArgumentError(f"unknown conditioning_mode {self.conditioning_mode!r}")

    def width(self, level: int) -> int:
        return self.base_width * (level + 1)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, temb):
        super().__init__()
        self.norm1 = nn.GroupNorm(group_count(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time = nn.Linear(temb, cout)
        self.norm2 = nn.GroupNorm(group_count(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else None

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + (x if self.skip is None else self.skip(x))


class CrossAttention(nn.Module):
    """Queries from spatial positions, keys and values from token rows."""

    def __init__(self, channels, text_d):
        super().__init__()
        self.norm = nn.GroupNorm(group_count(channels), channels)
        self.q = nn.Linear(channels, channels, bias=False)
        self.k = nn.Linear(text_d, channels, bias=False)
        self.v = nn.Linear(text_d, channels, bias=False)
        self.out = nn.Linear(channels, channels)

    def forward(self, x, e_T):
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)  # (b, hw, c)
        q, k, v = self.q(tokens), self.k(e_T), self.v(e_T)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)
        y = self.out(attn @ v).transpose(1, 2).reshape(b, c, h, w)
        return x + y


class PooledText(nn.Module):
    def __init__(self, channels, text_d):
        super().__init__()
        self.proj = nn.Linear(text_d, channels, bias=False)

    def forward(self, x, e_T):
        return x + self.proj(e_T.mean(dim=1))[:, :, None, None]


class Denoiser(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = cfg = config
        temb = cfg.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(temb, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.conv_in = nn.Conv2d(cfg.latent_channels + cfg.cond_channels, cfg.width(0), 3, padding=1)
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        for i in range(cfg.levels):
            self.down.append(nn.ModuleList(ResBlock(cfg.width(i), cfg.width(i), temb) for _ in range(cfg.res_blocks)))
            self.downsample.append(nn.Conv2d(cfg.width(i), cfg.width(i + 1), 3, stride=2, padding=1))
        cmid = cfg.width(cfg.levels)
        self.mid1 = ResBlock(cmid, cmid, temb)
        if cfg.conditioning_mode == CROSS_ATTENTION:
            self.text = CrossAttention(cmid, cfg.text_d)
        else:
            self.text = PooledText(cmid, cfg.text_d)
        self.mid2 = ResBlock(cmid, cmid, temb)
        self.upsample = nn.ModuleList()
        self.up = nn.ModuleList()
        for i in reversed(range(cfg.levels)):
            self.upsample.append(nn.Conv2d(cfg.width(i + 1), cfg.width(i), 3, padding=1))
            blocks = [ResBlock(2 * cfg.width(i), cfg.width(i), temb)]
            blocks += [ResBlock(cfg.width(i), cfg.width(i), temb) for _ in range(cfg.res_blocks - 1)]
            self.up.append(nn.ModuleList(blocks))
        self.norm_out = nn.GroupNorm(group_count(cfg.width(0)), cfg.width(0))
        self.conv_out = nn.Conv2d(cfg.width(0), cfg.latent_channels, 3, padding=1)
        seeded_init_(self, cfg.seed, zero=("conv_out.",))

    def _check_inputs(self, z_t, t, e_T, e_I):
        cfg = self.config
        if z_t.ndim != 4 or z_t.shape[1] != cfg.latent_channels:
            raise ShapeError(f"z_t must be (B, {cfg.latent_channels}, H, W), got {tuple(z_t.shape)}")
        f = 2**cfg.levels
        if z_t.shape[2] % f or z_t.shape[3] % f:
            raise ShapeError(f"latent spatial size {tuple(z_t.shape[2:])} not divisible by {f}")
        if e_T.shape != (z_t.shape[0], cfg.text_m, cfg.text_d):
            raise ShapeError(f"e_T must be (B, {cfg.text_m}, {cfg.text_d}), got {tuple(e_T.shape)}")
        if cfg.cond_channels:
            if e_I is None:
                raise ShapeError("model expects image conditioning, got None")
            if e_I.shape != (z_t.shape[0], cfg.cond_channels) + tuple(z_t.shape[2:]):
                raise ShapeError(f"e_I shape {tuple(e_I.shape)} does not match z_t {tuple(z_t.shape)}")
        if t.shape != (z_t.shape[0],):
            raise ShapeError(f"t must have shape ({z_t.shape[0]},), got {tuple(t.shape)}")

    def forward(self, z_t, t, e_T=None, e_I=None):
        """Predict the noise in ``z_t``; ``e_T=None`` selects the null (all-zero) embedding."""
        cfg = self.config
        b = z_t.shape[0]
        if not torch.is_tensor(t) or t.ndim == 0:
            t = torch.full((b,), int(t), dtype=torch.long)
        if e_T is None:
            e_T = torch.zeros(b, cfg.text_m, cfg.text_d, dtype=z_t.dtype)
        e_T = torch.as_tensor(e_T, dtype=z_t.dtype)
        if e_T.ndim == 2:
            e_T = e_T.unsqueeze(0).expand(b, -1, -1)
        if e_I is not None and e_I.ndim == 3:
            e_I = e_I.unsqueeze(0).expand(b, -1, -1, -1)
        self._check_inputs(z_t, t, e_T, e_I)
        out = self._run(z_t, t, e_T, e_I, trace=None)
        if not torch.isfinite(out).all():
            trace = []
            self._run(z_t, t, e_T, e_I, trace=trace)
            bad = next((name for name, ok in trace if not ok), "conv_out")
            raise NumericError(f"non-finite activations first produced by layer {bad!r}")
        return out

    def _run(self, z_t, t, e_T, e_I, trace):
        def mark(name, x):
            if trace is not None:
                trace.append((name, bool(torch.isfinite(x).all())))
            return x

        temb = mark("time_mlp", self.time_mlp(timestep_embedding(t, self.config.time_embed_dim).to(z_t.dtype)))
        x = z_t if not self.config.cond_channels else torch.cat([z_t, e_I], dim=1)
        h = mark("conv_in", self.conv_in(x))
        skips = []
        for i, (blocks, down) in enumerate(zip(self.down, self.downsample)):
            for j, blk in enumerate(blocks):
                h = mark(f"down.{i}.{j}", blk(h, temb))
            skips.append(h)
            h = mark(f"downsample.{i}", down(h))
        h = mark("mid1", self.mid1(h, temb))
        h = mark("text", self.text(h, e_T))
        h = mark("mid2", self.mid2(h, temb))
        for i, (up, blocks) in enumerate(zip(self.upsample, self.up)):
            h = mark(f"upsample.{i}", up(F.interpolate(h, scale_factor=2, mode="nearest")))
            h = torch.cat([h, skips.pop()], dim=1)
            for j, blk in enumerate(blocks):
                h = mark(f"up.{i}.{j}", blk(h, temb))
        return mark("conv_out", self.conv_out(F.silu(self.norm_out(h))))


def build_denoiser(config: DenoiserConfig) -> Denoiser:
    torch.use_deterministic_algorithms(True)
    return Denoiser(config)


def param_count(config: DenoiserConfig) -> int:
    return sum(p.numel() for p in Denoiser(config).parameters())


def predict_noise(model: Denoiser, z_t, t, e_T, e_I):
    return model(z_t, t, e_T, e_I)


def backward(model: Denoiser, z0, t, eps, e_T, e_I, schedule) -> tuple[float, dict]:
    """Loss value and exact gradients ``{name: tensor}`` of the training loss."""
    from .diffusion import training_loss

    model.zero_grad(set_to_none=True)
    loss = training_loss(model, z0, t, eps, e_T, e_I, schedule)
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    out = {}
    for n, p, g in zip(names, params, grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {n}")
        out[n] = g
    return float(loss.detach()), out


def save_denoiser(path, model: Denoiser, extra: dict | None = None) -> None:
    save_checkpoint(path, model, "denoiser", asdict(model.config), extra)


def load_denoiser(path) -> Denoiser:
    header, state = read_checkpoint(path, kind="denoiser")
    model = Denoiser(DenoiserConfig(**header["config"]))
    return load_state(model, state)
