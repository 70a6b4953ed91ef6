"""Tiny frozen decoder-only language model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import Attention, Embedding, FeedForward, LayerNorm, Linear, Module, causal_mask
from .tensor import Parameter, Tensor, no_grad
from .tokenizer import EOS


class SequenceTooLong(ValueError):
    pass


@dataclass(frozen=True)
class TinyLMConfig:
    vocab_size: int
    num_layers: int = 2
    num_heads: int = 4
    d_model: int = 32
    max_seq_len: int = 256
    ffn_mult: int = 4
    tie_embeddings: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}")
        if min(self.vocab_size, self.num_layers, self.max_seq_len) < 1:
            raise ValueError(f"invalid LM config: {self}")


class DecoderBlock(Module):
    def __init__(self, cfg: TinyLMConfig, rng: np.random.Generator) -> None:
        self.ln_attn = LayerNorm(cfg.d_model)
        self.attn = Attention(cfg.d_model, cfg.num_heads, rng)
        self.ln_ffn = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_mult * cfg.d_model, rng)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        x = T.add(x, self.attn(self.ln_attn(x), mask=mask))
        return T.add(x, self.ffn(self.ln_ffn(x)))


class TinyLM(Module):
    """Pre-norm transformer decoder with learned positions.

    Every backbone parameter is frozen at construction; only LoRA pairs
    attached later are trainable.
    """

    def __init__(self, cfg: TinyLMConfig) -> None:
        self._cfg = cfg
        rng = np.random.default_rng([cfg.seed & 0xFFFFFFFF, 0x11A])
        self.tok_emb = Embedding(cfg.vocab_size, cfg.d_model, rng, std=1.0)
        self.pos_emb = Parameter(rng.normal(0.0, 0.1, size=(cfg.max_seq_len, cfg.d_model)), name="pos_emb")
        self.blocks = [DecoderBlock(cfg, rng) for _ in range(cfg.num_layers)]
        self.ln_f = LayerNorm(cfg.d_model)
        self.head = None if cfg.tie_embeddings else Linear(cfg.d_model, cfg.vocab_size, rng, bias=False)
        self.freeze()

    @property
    def config(self) -> TinyLMConfig:
        return self._cfg

    def embed_tokens(self, token_ids: Sequence[int]) -> Tensor:
        return self.tok_emb(np.asarray(token_ids, dtype=np.int64))

    def __call__(self, prefix_embeddings: Tensor | None, token_ids: Sequence[int]) -> Tensor:
        return lm_forward(self, prefix_embeddings, token_ids)


def lm_forward(model: TinyLM, prefix_embeddings: Tensor | None, token_ids: Sequence[int]) -> Tensor:
    """Logits for ``[prefix_embeddings ; embedded tokens]`` under causal attention.

    Positions run 0..S+n-1 across the joint sequence. Returns (S + n, V).
    """
    cfg = model.config
    token_ids = list(token_ids)
    S = 0 if prefix_embeddings is None else prefix_embeddings.shape[0]
    n = S + len(token_ids)
    if n > cfg.max_seq_len:
        raise SequenceTooLong(f"sequence of {S} prefix + {len(token_ids)} tokens = {n} exceeds max_seq_len {cfg.max_seq_len}")
    if n == 0:
        raise ValueError("empty input: no prefix and no tokens")
    parts = []
    if S:
        if prefix_embeddings.shape[1] != cfg.d_model:
            raise T.ShapeError(f"prefix width {prefix_embeddings.shape[1]} != d_model {cfg.d_model}")
        parts.append(prefix_embeddings)
    if token_ids:
        parts.append(model.embed_tokens(token_ids))
    x = parts[0] if len(parts) == 1 else T.concat(parts, axis=0)
    x = T.add(x, T.embedding_lookup(model.pos_emb, np.arange(n)))
    mask = causal_mask(n, n)
    for block in model.blocks:
        x = block(x, mask)
    x = model.ln_f(x)
    if model.head is not None:
        return model.head(x)
    return T.matmul(x, T.transpose(model.tok_emb.weight))


def generate_greedy(model: TinyLM, prefix_embeddings: Tensor | None, prompt_tokens: Sequence[int],
                    max_new: int, eos_id: int = EOS) -> list[int]:
    """Argmax decoding; stops after ``eos_id`` (not returned) or ``max_new`` tokens."""
    out: list[int] = []
    tokens = list(prompt_tokens)
    S = 0 if prefix_embeddings is None else prefix_embeddings.shape[0]
    with no_grad():
        prefix = None if prefix_embeddings is None else Tensor(prefix_embeddings.data)
        for _ in range(max_new):
            if S + len(tokens) >= model.config.max_seq_len:
                break
            logits = lm_forward(model, prefix, tokens)
            nxt = int(np.argmax(logits.data[-1]))
            if nxt == eos_id:
                break
            out.append(nxt)
            tokens.append(nxt)
    return out
