"""Noise schedule, forward noising, training loss, reverse update and sampling.

Timesteps are 1-based (``t = 1..T``).  Schedules are computed in float64 and
narrowed to float32 only when applied to tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import rng as rng_mod
from .errors import DegenerateStepError, InvalidArgumentError, NumericError, ShapeError


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def check_t(self, t):
        tt = np.asarray(t.cpu().numpy() if torch.is_tensor(t) else t)
        if tt.size and (tt.min() < 1 or tt.max() > self.T):
            raise InvalidArgumentError(f"timestep out of range 1..{self.T}: {t}")

    def _coef(self, arr: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
        self.check_t(t)
        if torch.is_tensor(t) and t.ndim > 0:
            vals = torch.as_tensor(arr[t.cpu().numpy() - 1], dtype=like.dtype)
            return vals.reshape((-1,) + (1,) * (like.ndim - 1))
        return torch.tensor(arr[int(t) - 1], dtype=like.dtype)


@dataclass(frozen=True)
class GuidanceConfig:
    w: float = 7.5
    # null the image conditioning as well as the text in the unconditional branch
    null_image: bool = False

    def __post_init__(self):
        if not self.w >= 0:
            raise InvalidArgumentError(f"guidance scale must be >= 0, got {self.w}")


def schedule_from_betas(beta) -> NoiseSchedule:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or beta.size < 1 or not np.all((beta > 0) & (beta < 1)):
        raise InvalidArgumentError("betas must be a 1-D sequence in (0, 1)")
    alpha = 1.0 - beta
    return NoiseSchedule(beta, alpha, np.cumprod(alpha))


def make_schedule(T: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule over ``T`` steps."""
    if T < 2:
        raise InvalidArgumentError(f"T must be >= 2, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise InvalidArgumentError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return schedule_from_betas(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def _match(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def forward_diffuse(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps``; ``t`` is an int or a batch of ints."""
    _match(x0, eps, "forward_diffuse")
    ab = schedule._coef(schedule.alpha_bar, t, x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def forward_diffuse_abar(x0: torch.Tensor, alpha_bar: float, eps: torch.Tensor) -> torch.Tensor:
    _match(x0, eps, "forward_diffuse")
    return math.sqrt(alpha_bar) * x0 + math.sqrt(1.0 - alpha_bar) * eps


def training_loss(model, z0, t, eps, e_T, e_I, schedule: NoiseSchedule) -> torch.Tensor:
    """Mean squared error between the drawn noise and the model's prediction."""
    z_t = forward_diffuse(z0, t, eps, schedule)
    pred = model(z_t, t, e_T, e_I)
    _match(pred, eps, "training_loss")
    return torch.mean((eps - pred) ** 2)


def cfg_predict(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, w: float) -> torch.Tensor:
    """Guided noise ``w * eps_cond + (1 - w) * eps_uncond``.

    Evaluated in float64 and rounded once to the input dtype, so equal branches
    return the branch itself and large ``w`` does not amplify product rounding.
    """
    _match(eps_cond, eps_uncond, "cfg_predict")
    out = w * eps_cond.double() + (1.0 - w) * eps_uncond.double()
    return out.to(torch.promote_types(eps_cond.dtype, eps_uncond.dtype))


def reverse_coefficients(t: int, schedule: NoiseSchedule) -> tuple[float, float]:
    """``(1 / sqrt(alpha_t), (1 - alpha_t) / sqrt(1 - abar_t))`` in float64."""
    schedule.check_t(t)
    a, ab = schedule.alpha[t - 1], schedule.alpha_bar[t - 1]
    if ab >= 1.0:
        raise DegenerateStepError(f"alpha_bar_{t} = 1: reverse step divides by zero")
    return 1.0 / math.sqrt(a), (1.0 - a) / math.sqrt(1.0 - ab)


def reverse_step(eps_hat: torch.Tensor, z_t: torch.Tensor, t: int, schedule: NoiseSchedule) -> torch.Tensor:
    """Deterministic posterior-mean update ``z_t -> z_{t-1}`` (no added noise).

    Evaluated in float64 and rounded once to the input dtype, which keeps the
    result accurate when ``z_t`` and the noise term nearly cancel.
    """
    _match(eps_hat, z_t, "reverse_step")
    c1, c2 = reverse_coefficients(t, schedule)
    out = c1 * (z_t.double() - c2 * eps_hat.double())
    return out.to(torch.promote_types(z_t.dtype, eps_hat.dtype))


def _stack_conds(cond):
    conds = cond if isinstance(cond, (list, tuple)) else [cond]
    e_T = torch.as_tensor(np.stack([c.e_cond for c in conds]), dtype=torch.float32)
    e_null = torch.as_tensor(np.stack([c.e_null for c in conds]), dtype=torch.float32)
    return e_T, e_null, isinstance(cond, (list, tuple))


@torch.no_grad()
def sample(model, schedule: NoiseSchedule, cond, e_I, guidance: GuidanceConfig, seed: int,
           latent_shape=None, ancestral: bool = False) -> torch.Tensor:
    """Generate latents by iterating the guided reverse update from ``t = T`` down to 1.

    ``cond`` is one :class:`MixedConditioning` or a list (one per sample);
    ``e_I`` is the matching image latent (``(C, H, W)`` or ``(B, C, H, W)``) or
    ``None`` for a model without image conditioning, in which case
    ``latent_shape`` gives the per-sample shape.  Each step makes two model
    calls: conditional and unconditional (null text).  ``seed`` is one int for
    the whole batch or a list giving each sample its own noise stream.
    """
    e_T, e_null, batched = _stack_conds(cond)
    b = e_T.shape[0]
    if e_I is not None:
        e_I = torch.as_tensor(e_I, dtype=torch.float32)
        if e_I.ndim == 3:
            e_I = e_I.unsqueeze(0).expand(b, *e_I.shape)
        if e_I.shape[0] != b:
            raise ShapeError(f"{b} conditionings but {e_I.shape[0]} image latents")
        shape = tuple(latent_shape) if latent_shape is not None else tuple(e_I.shape[1:])
    elif latent_shape is None:
        raise ShapeError("latent_shape is required without image conditioning")
    else:
        shape = tuple(latent_shape)
    e_I_uncond = None if e_I is None else (torch.zeros_like(e_I) if guidance.null_image else e_I)

    if isinstance(seed, (list, tuple)):
        if len(seed) != b:
            raise ShapeError(f"{b} conditionings but {len(seed)} seeds")
        gens = [rng_mod.torch_generator(s, "sample") for s in seed]
    else:
        gens = [rng_mod.torch_generator(seed, "sample")]

    def noise():
        if len(gens) == 1:
            return torch.randn((b,) + shape, generator=gens[0], dtype=torch.float32)
        return torch.stack([torch.randn(shape, generator=g, dtype=torch.float32) for g in gens])

    z = noise()
    for t in range(schedule.T, 0, -1):
        tt = torch.full((b,), t, dtype=torch.long)
        eps_c = model(z, tt, e_T, e_I)
        eps_u = model(z, tt, e_null, e_I_uncond)
        z = reverse_step(cfg_predict(eps_c, eps_u, guidance.w), z, t, schedule)
        if ancestral and t > 1:
            z = z + math.sqrt(schedule.beta[t - 1]) * noise()
        if not torch.isfinite(z).all():
            raise NumericError(f"sampling diverged at step t={t}")
    return z if batched else z[0]
