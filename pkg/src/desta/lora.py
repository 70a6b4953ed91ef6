"""LoRA attachment on attention projections and the test-time scale knob."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Linear, LoRAPair, Module, lora_forward

__all__ = ["LoRAConfig", "LoRAPair", "attach_lora", "set_lora_scale", "lora_pairs", "lora_forward",
           "lora_param_count", "LoRAConfigError", "merged_weight"]

VALID_TARGETS = ("q", "k", "v")


class LoRAConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LoRAConfig:
    rank: int = 32
    alpha: float = 32.0
    targets: tuple[str, ...] = VALID_TARGETS
    test_scale: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise LoRAConfigError(f"rank must be >= 1, got {self.rank}")
        if not 0.0 <= self.test_scale <= 1.0:
            raise LoRAConfigError(f"test_scale must lie in [0, 1], got {self.test_scale}")
        unknown = [t for t in self.targets if t not in VALID_TARGETS]
        if unknown:
            raise LoRAConfigError(f"unknown LoRA targets {unknown}; expected a subset of {VALID_TARGETS}")
        object.__setattr__(self, "targets", tuple(self.targets))


def _attention_projections(model: Module, prefix: str = ""):
    """Yield (path, Linear) for every q/k/v projection in ``model.blocks``."""
    for i, block in enumerate(model.blocks):
        for t in VALID_TARGETS:
            yield f"{prefix}blocks.{i}.attn.{t}", t, getattr(block.attn, t)


def attach_lora(model: Module, cfg: LoRAConfig) -> list[LoRAPair]:
    """Attach one pair per targeted projection per layer; the backbone stays frozen.

    LoRA initialisation draws from its own generator, so the backbone is the
    same as an un-adapted model built from the same seed.
    """
    rng = np.random.default_rng([cfg.seed & 0xFFFFFFFF, 0x10BA])
    pairs = []
    for path, target, linear in _attention_projections(model):
        if target not in cfg.targets:
            continue
        if linear.lora is not None:
            raise LoRAConfigError(f"{path} already carries a LoRA pair")
        pair = LoRAPair(linear.d_in, linear.d_out, cfg.rank, cfg.alpha, rng, host=path)
        pair.scale = cfg.test_scale
        linear.lora = pair
        pairs.append(pair)
    return pairs


def lora_pairs(model: Module) -> list[LoRAPair]:
    return [lin.lora for _, _, lin in _attention_projections(model) if lin.lora is not None]


def set_lora_scale(model: Module, s: float) -> None:
    """Set the inference-time branch multiplier on every pair (0 removes LoRA)."""
    s = float(s)
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"LoRA scale must lie in [0, 1], got {s}")
    for pair in lora_pairs(model):
        pair.scale = s


def lora_param_count(num_layers: int, num_targets: int, rank: int, d_in: int, d_out: int) -> int:
    return num_layers * num_targets * rank * (d_in + d_out)


def merged_weight(linear: Linear, scale: float | None = None) -> np.ndarray:
    """Dense ``W + s * (alpha / r) * B A`` for a host projection (no LoRA: ``W``)."""
    w = linear.weight.data
    pair = linear.lora
    if pair is None:
        return w.copy()
    s = pair.scale if scale is None else float(scale)
    return w + s * (pair.alpha / pair.rank) * (pair.B.data @ pair.A.data)
