"""Run configuration: one YAML file, nested sections, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError, StorageError

CONFIG_VERSION = 1


@dataclass
class EmbedderSection:
    m: int = 16
    d: int = 32
    seed: int = 0


@dataclass
class MixerSection:
    P: int = 1
    Q: int = 2
    N_y: int = 8


@dataclass
class ScheduleSection:
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class GuidanceSection:
    w: float = 7.5
    null_image: bool = False
    ancestral: bool = False


@dataclass
class DenoiserSection:
    base_width: int = 32
    levels: int = 2
    time_embed_dim: int = 64
    conditioning_mode: str = "cross_attention"
    res_blocks: int = 1


@dataclass
class CodecSection:
    mode: str = "learned"
    latent_channels: int = 4
    f: int = 4
    width: int = 32
    steps: int = 1500
    lr: float = 2e-3
    batch_size: int = 16


@dataclass
class DataSection:
    image_size: int = 32
    channels: int = 1


@dataclass
class PipelineSection:
    ratio: float = 3.0
    steps: int = 2000
    batch_size: int = 16
    lr: float = 2e-3
    refresh_every: int = 500
    uncond_prob: float = 0.1
    gen_batch_size: int = 1


@dataclass
class PhaseSection:
    steps: int = 400
    lr: float = 2e-3


@dataclass
class ClassifierSection:
    strategies: list = field(default_factory=lambda: ["baseline", "combined", "rsp", "two_phase"])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    steps: int = 400
    lr: float = 2e-3
    batch_size: int = 32
    p: float = 0.8
    phase1: PhaseSection = field(default_factory=PhaseSection)
    phase2: PhaseSection = field(default_factory=lambda: PhaseSection(100, 2e-4))
    widths: list = field(default_factory=lambda: [16, 32])


@dataclass
class PathsSection:
    run_root: str = "runs"


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    embedder: EmbedderSection = field(default_factory=EmbedderSection)
    mixer: MixerSection = field(default_factory=MixerSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    codec: CodecSection = field(default_factory=CodecSection)
    data: DataSection = field(default_factory=DataSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path) -> None:
        try:
            Path(path).write_text(self.dump())
        except OSError as exc:
            raise StorageError(f"cannot write config {path}: {exc}") from exc

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:10]

    def validate(self) -> "RunConfig":
        from .classifier import KINDS

        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        checks = [
            (self.embedder.m >= 2 and self.embedder.d >= 2, "embedder.m and embedder.d must be >= 2"),
            (self.mixer.P >= 0 and self.mixer.Q >= 0 and self.mixer.N_y >= 1, "mixer: P, Q >= 0 and N_y >= 1"),
            (self.schedule.T >= 2, "schedule.T must be >= 2"),
            (0 < self.schedule.beta_start <= self.schedule.beta_end < 1, "schedule betas out of range"),
            (self.guidance.w >= 0, "guidance.w must be >= 0"),
            (self.codec.mode in ("identity", "learned"), "codec.mode must be identity or learned"),
            (self.denoiser.conditioning_mode in ("cross_attention", "pooled_additive"),
             "denoiser.conditioning_mode must be cross_attention or pooled_additive"),
            (self.pipeline.ratio > 0, "pipeline.ratio must be > 0"),
            (0 < self.classifier.p <= 1, "classifier.p must be in (0, 1]"),
            (all(s in KINDS for s in self.classifier.strategies), f"classifier.strategies must be from {KINDS}"),
            (len(self.classifier.seeds) >= 1, "classifier.seeds must be non-empty"),
            (self.classifier.phase2.lr < self.classifier.phase1.lr, "classifier.phase2.lr must be < phase1.lr"),
            (self.classifier.phase2.steps < self.classifier.phase1.steps,
             "classifier.phase2.steps must be < phase1.steps"),
            (self.codec.mode == "identity" or self.data.image_size % self.codec.f == 0,
             "data.image_size must be divisible by codec.f"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown config keys in {where or 'top level'}: {sorted(unknown)}")
    defaults = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for name, value in data.items():
        typ = hints[name]
        key = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(typ):
            # partial sections keep the parent's defaults for omitted keys
            if isinstance(value, dict) and defaults[name].default_factory is not dataclasses.MISSING:
                value = {**dataclasses.asdict(defaults[name].default_factory()), **value}
            kwargs[name] = _build(typ, value, key)
        else:
            kwargs[name] = _coerce(typ, value, key)
    return cls(**kwargs)


def _coerce(typ, value, key):
    try:
        if typ is bool:
            if isinstance(value, str):
                if value.lower() in ("true", "1", "yes"):
                    return True
                if value.lower() in ("false", "0", "no"):
                    return False
                raise ValueError(value)
            return bool(value)
        if typ is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if typ is float:
            return float(value)
        if typ is str:
            return str(value)
        if typ is list:
            if isinstance(value, str):
                value = [v for v in value.split(",") if v]
            return list(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot interpret {value!r} as {getattr(typ, '__name__', typ)}") from exc
    return value


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data or {}, "").validate()


def load_config(path=None, overrides=None) -> RunConfig:
    """Load ``path`` (or defaults), apply ``key.path=value`` overrides, validate."""
    data: dict = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise StorageError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a scalar")
        node[parts[-1]] = yaml.safe_load(raw)
    return config_from_dict(data)
