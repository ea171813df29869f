"""Shared network plumbing: seeded init, Adam update, checkpoint container."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from . import rng as rng_mod
from .container import read_container, write_container
from .errors import InvalidArgumentError, NumericError, ParseError, ShapeError

CHECKPOINT_VERSION = 1


def group_count(channels: int, max_groups: int = 8) -> int:
    return math.gcd(channels, max_groups)


@torch.no_grad()
def seeded_init_(module: nn.Module, seed: int, zero: tuple[str, ...] = ()) -> None:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for conv/linear weights and biases.

    Norm layers get unit scale and zero shift.  Parameters whose name starts
    with an entry of ``zero`` are zeroed.  Draws follow ``named_parameters``
    order from one seeded generator.
    """
    gen = rng_mod.torch_generator(seed, "init")
    fan_in = {}
    for name, mod in module.named_modules():
        if isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            w = mod.weight
            fan = w.shape[1] * (w[0, 0].numel() if w.ndim > 2 else 1)
            if isinstance(mod, nn.ConvTranspose2d):
                fan = w.shape[0] * w[0, 0].numel()
            fan_in[f"{name}.weight"] = fan
            fan_in[f"{name}.bias"] = fan
    for name, p in module.named_parameters():
        if any(name.startswith(z) for z in zero):
            p.zero_()
        elif name in fan_in:
            bound = 1.0 / math.sqrt(fan_in[name])
            p.copy_(torch.rand(p.shape, generator=gen) * (2 * bound) - bound)
        elif name.endswith("weight"):
            p.fill_(1.0)
        else:
            p.zero_()


@dataclass
class AdamState:
    """Adam moments.

    Update, per tensor, at step ``n`` (1-based)::

        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g**2
        p = p - lr * (m / (1 - beta1**n)) / (sqrt(v / (1 - beta2**n)) + eps)
    """
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@torch.no_grad()
def optimizer_step(params: dict, grads: dict, state: AdamState, lr: float, inplace: bool = False):
    """One Adam step over named tensors; returns ``(params, state)``.

    With ``inplace=False`` neither the inputs nor ``state`` are modified.
    """
    if not lr > 0:
        raise InvalidArgumentError(f"learning rate must be > 0, got {lr}")
    n = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1, bc2 = 1.0 - b1**n, 1.0 - b2**n
    new_m, new_v, new_p = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
        m = state.m.get(name)
        v = state.v.get(name)
        if inplace and m is not None:
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
        else:
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        upd = (m / bc1) / (torch.sqrt(v / bc2) + state.eps)
        if inplace:
            p.sub_(lr * upd)
            new_p[name] = p
        else:
            new_p[name] = p - lr * upd
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(n, new_m, new_v, b1, b2, state.eps)


class Adam:
    """Stateful wrapper applying :func:`optimizer_step` to a module in place."""

    def __init__(self, module: nn.Module, lr: float):
        self.module = module
        self.lr = lr
        self.state = AdamState()

    def step(self, lr: float | None = None):
        params = dict(self.module.named_parameters())
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        _, self.state = optimizer_step(params, grads, self.state, lr or self.lr, inplace=True)

    def zero_grad(self):
        for p in self.module.parameters():
            p.grad = None


def check_finite(x: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite values in {where}")
    return x


def config_dict(cfg) -> dict:
    return asdict(cfg)


def save_checkpoint(path, module: nn.Module, kind: str, config: dict, extra: dict | None = None) -> None:
    """Write ``module``'s state as JSON header + little-endian float32 tensors."""
    tensors, arrays, offset = [], [], 0
    for name, t in module.state_dict().items():
        a = t.detach().cpu().numpy().astype(np.float32)
        tensors.append({"name": name, "shape": list(a.shape), "offset": offset})
        arrays.append(a)
        offset += a.size * 4
    header = {"version": CHECKPOINT_VERSION, "kind": kind, "config": config, "tensors": tensors}
    if extra:
        header["extra"] = extra
    write_container(path, header, arrays)


def read_checkpoint(path, kind: str | None = None) -> tuple[dict, dict]:
    """Return ``(header, {name: tensor})``."""
    header, payload = read_container(path)
    if header.get("version") != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {header.get('version')}")
    if kind is not None and header.get("kind") != kind:
        raise ParseError(f"{path}: checkpoint kind {header.get('kind')!r}, expected {kind!r}")
    raw = payload.tobytes()
    state = {}
    for rec in header.get("tensors", []):
        shape = tuple(rec["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = rec["offset"]
        if start % 4 or start + 4 * count > len(raw):
            raise ParseError(f"{path}: tensor {rec['name']} overruns payload")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=start).reshape(shape)
        state[rec["name"]] = torch.from_numpy(arr.astype(np.float32))
    return header, state


def load_state(module: nn.Module, state: dict) -> nn.Module:
    own = module.state_dict()
    if set(own) != set(state):
        raise ParseError(f"checkpoint tensors {sorted(set(state) ^ set(own))} do not match the model")
    for k, v in state.items():
        if own[k].shape != v.shape:
            raise ShapeError(f"checkpoint tensor {k} has shape {tuple(v.shape)}, model {tuple(own[k].shape)}")
    module.load_state_dict(state)
    return module
