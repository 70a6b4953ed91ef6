"""The assembled speech language model.

Frozen encoder stub -> trainable modality adapter -> frozen tiny LM with
trainable LoRA pairs. The adapter output is used as a prefix of embeddings
ahead of the transcript, prompt and response tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .adapter import CnnAdapterConfig, ModalityAdapter, QformerConfig
from .encoder import EncoderConfig, EncoderOutput, EncoderStub
from .lm import TinyLM, TinyLMConfig, generate_greedy, lm_forward
from .lora import LoRAConfig, attach_lora, lora_pairs, set_lora_scale
from .nn import Module
from .seeding import derive_rng, derive_seed
from .tensor import Tensor, no_grad
from .tokenizer import ByteTokenizer


@dataclass(frozen=True)
class AdapterSettings:
    kind: str = "qformer"
    layer_indices: tuple[int, ...] | None = None
    # cnn
    cnn_mid_dim: int = 32
    kernel: int = 5
    stride: int = 5
    padding: int = 0
    cnn_layers: int = 2
    # qformer
    qformer_dim: int = 32
    num_queries: int = 64
    num_blocks: int = 2
    num_heads: int = 4
    ffn_mult: int = 4
    encoder_positions: bool = False

    def body_config(self, in_dim: int, out_dim: int) -> CnnAdapterConfig | QformerConfig:
        if self.kind == "cnn":
            return CnnAdapterConfig(in_dim, self.cnn_mid_dim, out_dim, self.kernel, self.stride,
                                    self.padding, self.cnn_layers)
        return QformerConfig(in_dim, self.qformer_dim, out_dim, self.num_queries, self.num_blocks,
                             self.num_heads, self.ffn_mult, self.encoder_positions)


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    adapter: AdapterSettings = field(default_factory=AdapterSettings)
    lm: TinyLMConfig | None = None
    lora: LoRAConfig | None = field(default_factory=lambda: LoRAConfig(rank=4, alpha=4.0))
    seed: int = 0

    def resolved_lm(self, vocab_size: int) -> TinyLMConfig:
        return self.lm if self.lm is not None else TinyLMConfig(vocab_size=vocab_size)


class SpeechLM(Module):
    """Encoder stub, modality adapter and LM+LoRA wired together."""

    def __init__(self, config: ModelConfig, tokenizer: ByteTokenizer | None = None) -> None:
        self._tokenizer = tokenizer or ByteTokenizer.default()
        lm_cfg = config.resolved_lm(self._tokenizer.vocab_size)
        if lm_cfg.vocab_size < self._tokenizer.vocab_size:
            raise ValueError(f"LM vocab {lm_cfg.vocab_size} smaller than tokenizer vocab {self._tokenizer.vocab_size}")
        seed = config.seed
        enc_cfg = replace(config.encoder, seed=derive_seed(seed, "encoder"))
        lm_cfg = replace(lm_cfg, seed=derive_seed(seed, "lm"))
        self._config = config
        self.encoder = EncoderStub(enc_cfg)
        self.adapter = ModalityAdapter(
            config.adapter.kind, enc_cfg.num_layers,
            config.adapter.body_config(enc_cfg.dim, lm_cfg.d_model),
            derive_rng(seed, "adapter"), config.adapter.layer_indices,
        )
        self.lm = TinyLM(lm_cfg)
        if config.lora is not None:
            attach_lora(self.lm, replace(config.lora, seed=derive_seed(seed, "lora")))

    @property
    def config(self) -> ModelConfig:
        return self._config

    @property
    def tokenizer(self) -> ByteTokenizer:
        return self._tokenizer

    def prefix_length(self) -> int:
        return self.adapter.output_length(self.encoder.config.frames)

    def encode(self, features) -> EncoderOutput:
        return self.encoder.encode(features)

    def prefix(self, enc: EncoderOutput) -> Tensor:
        return self.adapter(enc)

    def logits(self, enc: EncoderOutput | None, token_ids: Sequence[int]) -> Tensor:
        prefix = None if enc is None else self.prefix(enc)
        return lm_forward(self.lm, prefix, token_ids)

    def set_lora_scale(self, s: float) -> None:
        set_lora_scale(self.lm, s)

    def lora_pairs(self):
        return lora_pairs(self.lm)

    def frozen_state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters() if p.frozen}

    def trainable_state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters() if not p.frozen}

    def generate(self, enc: EncoderOutput | None, context_ids: Sequence[int], max_new: int = 64) -> list[int]:
        with no_grad():
            prefix = None if enc is None else self.prefix(enc)
        return generate_greedy(self.lm, prefix, context_ids, max_new)
