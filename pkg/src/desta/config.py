"""Project configuration with strict key checking.

A config file is YAML with the top-level keys ``seed``, ``encoder``,
``adapter``, ``lm``, ``lora``, ``trainer``, ``trainer_instruct``,
``pipeline``, ``eval`` and ``paths``. Unknown keys at any level are errors.
Sections never carry their own seed: every module's seed is derived from the
top-level one with :func:`desta.seeding.derive_seed`.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .encoder import EncoderConfig
from .lm import TinyLMConfig
from .lora import LoRAConfig
from .model import AdapterSettings, ModelConfig
from .seeding import derive_seed
from .trainer import TrainerConfig


class ConfigError(ValueError):
    pass


@dataclass
class EncoderSection:
    num_layers: int = 4
    dim: int = 16
    frames: int = 50
    feature_dim: int = 8


@dataclass
class LMSection:
    num_layers: int = 2
    num_heads: int = 4
    d_model: int = 32
    max_seq_len: int = 256
    ffn_mult: int = 4
    tie_embeddings: bool = True


@dataclass
class LoRASection:
    rank: int = 8
    alpha: float = 8.0
    targets: tuple[str, ...] = ("q", "k", "v")
    test_scale: float = 1.0


@dataclass
class TrainerSection:
    lr_max: float = 1e-4
    lr_min: float = 0.0
    epochs: int = 5
    batch_size: int = 12
    warmup_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 1.0
    max_steps: int | None = None
    stop_loss: float | None = None
    caption_prompts: tuple[str, ...] = ("Describe the speech.", "What can be inferred from this audio?")


@dataclass
class PipelineSection:
    captions_per_audio: int = 3
    generator: str = "offline"
    endpoint: str | None = None
    timeout_s: float = 30.0
    retries: int = 3
    templates_path: str | None = None
    prompts_path: str | None = None
    max_skip_ratio: float = 0.5


@dataclass
class EvalSection:
    scales: tuple[float, ...] = (1.0, 0.75, 0.5, 0.25, 0.0)
    max_new_tokens: int = 16


@dataclass
class PathsSection:
    metadata: str | None = None
    features_dir: str | None = None
    tasks: str | None = None


@dataclass
class ProjectConfig:
    seed: int = 0
    encoder: EncoderSection = field(default_factory=EncoderSection)
    adapter: AdapterSettings = field(default_factory=lambda: AdapterSettings(num_queries=32))
    lm: LMSection = field(default_factory=LMSection)
    lora: LoRASection = field(default_factory=LoRASection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    trainer_instruct: TrainerSection = field(default_factory=TrainerSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    eval: EvalSection = field(default_factory=EvalSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def model_config(self, vocab_size: int) -> ModelConfig:
        e, l, r = self.encoder, self.lm, self.lora
        return ModelConfig(
            encoder=EncoderConfig(e.num_layers, e.dim, e.frames, e.feature_dim),
            adapter=self.adapter,
            lm=TinyLMConfig(vocab_size, l.num_layers, l.num_heads, l.d_model, l.max_seq_len, l.ffn_mult,
                            l.tie_embeddings),
            lora=LoRAConfig(r.rank, r.alpha, tuple(r.targets), r.test_scale),
            seed=self.seed,
        )

    def trainer_config(self, profile: str = "trainer", **overrides) -> TrainerConfig:
        if profile not in ("trainer", "trainer_instruct"):
            raise ConfigError(f"unknown trainer profile {profile!r}")
        sec = dataclasses.asdict(getattr(self, profile))
        sec.pop("caption_prompts")
        sec.update(overrides)
        return TrainerConfig(seed=derive_seed(self.seed, profile), **sec)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: Any, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        default = getattr(cls(), key) if key in names else None
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        if key == "layer_indices" and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


_SECTIONS = {
    "encoder": EncoderSection, "adapter": AdapterSettings, "lm": LMSection, "lora": LoRASection,
    "trainer": TrainerSection, "trainer_instruct": TrainerSection, "pipeline": PipelineSection,
    "eval": EvalSection, "paths": PathsSection,
}


def config_from_dict(data: dict | None) -> ProjectConfig:
    data = dict(data or {})
    unknown = sorted(set(data) - set(_SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    seed = data.pop("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    kwargs = {name: _build(cls, data.get(name), name) for name, cls in _SECTIONS.items() if name in data}
    if "adapter" not in kwargs:
        kwargs["adapter"] = ProjectConfig().adapter
    cfg = ProjectConfig(seed=seed, **kwargs)
    if cfg.adapter.kind not in ("cnn", "qformer"):
        raise ConfigError(f"adapter.kind must be 'cnn' or 'qformer', got {cfg.adapter.kind!r}")
    if cfg.pipeline.generator not in ("offline", "remote"):
        raise ConfigError(f"pipeline.generator must be 'offline' or 'remote', got {cfg.pipeline.generator!r}")
    for s in cfg.eval.scales:
        if not 0.0 <= float(s) <= 1.0:
            raise ConfigError(f"eval.scales entry {s} outside [0, 1]")
    return cfg


def load_config(path: str | Path | None) -> ProjectConfig:
    if path is None:
        return ProjectConfig()
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    return config_from_dict(data)


def dump_config(cfg: ProjectConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True, indent=2)
