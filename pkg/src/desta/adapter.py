"""Modality adapters: layer-weighted sum, CNN or Q-former body, projection."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import EncoderOutput
from .nn import Attention, FeedForward, LayerNorm, Linear, Module
from .tensor import Parameter, Tensor

ADAPTER_KINDS = ("cnn", "qformer")


class AdapterConfigError(ValueError):
    pass


class LayerWeights(Module):
    """Learnable logits over encoder layers; effective weights are their softmax."""

    def __init__(self, num_layers: int) -> None:
        self.logits = Parameter(np.zeros(num_layers), name="logits")

    @property
    def num_layers(self) -> int:
        return self.logits.shape[0]

    def weights(self) -> Tensor:
        return T.softmax(self.logits)


def weighted_layer_sum(enc: EncoderOutput | np.ndarray | Tensor, w: LayerWeights) -> Tensor:
    """sum_l softmax(logits)_l * layer_l over an (L, T, D) stack."""
    stack = enc.layers if isinstance(enc, EncoderOutput) else enc
    stack = stack if isinstance(stack, Tensor) else Tensor(stack)
    L, n, d = stack.shape
    if L != w.num_layers:
        raise T.ShapeError(f"encoder has {L} layers but layer weights cover {w.num_layers}")
    mix = T.matmul(T.reshape(w.weights(), (1, L)), T.reshape(stack, (L, n * d)))
    return T.reshape(mix, (n, d))


@dataclass(frozen=True)
class CnnAdapterConfig:
    in_dim: int
    mid_dim: int
    out_dim: int
    kernel: int = 5
    stride: int = 5
    padding: int = 0
    num_layers: int = 2

    def __post_init__(self) -> None:
        if self.num_layers < 1 or self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise AdapterConfigError(f"invalid CNN geometry: {self}")

    def output_length(self, frames: int) -> int:
        n = frames
        for _ in range(self.num_layers):
            n = T.conv1d_length(n, self.kernel, self.stride, self.padding)
        return n

    def min_frames(self) -> int:
        n = 1
        for _ in range(self.num_layers):
            # smallest input giving length n: (n - 1) * stride + kernel - 2 * padding
            n = max(1, (n - 1) * self.stride + self.kernel - 2 * self.padding)
        return n


@dataclass(frozen=True)
class QformerConfig:
    in_dim: int
    d_model: int
    out_dim: int
    num_queries: int = 64
    num_blocks: int = 2
    num_heads: int = 4
    ffn_mult: int = 4
    encoder_positions: bool = False

    def __post_init__(self) -> None:
        if self.d_model % self.num_heads:
            raise AdapterConfigError(f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}")
        if self.num_queries < 1 or self.num_blocks < 1:
            raise AdapterConfigError(f"invalid Q-former size: {self}")


class CnnAdapter(Module):
    """Strided temporal convolutions with GELU between layers."""

    def __init__(self, cfg: CnnAdapterConfig, rng: np.random.Generator) -> None:
        self._cfg = cfg
        self.convs = []
        dims = [cfg.in_dim] * cfg.num_layers + [cfg.mid_dim]
        for i in range(cfg.num_layers):
            fan_in = dims[i] * cfg.kernel
            w = Parameter(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(dims[i + 1], dims[i], cfg.kernel)),
                          name=f"conv{i}.weight")
            b = Parameter(np.zeros(dims[i + 1]), name=f"conv{i}.bias")
            self.convs.append(_Conv(w, b))

    @property
    def config(self) -> CnnAdapterConfig:
        return self._cfg

    @property
    def out_features(self) -> int:
        return self._cfg.mid_dim

    def output_length(self, frames: int) -> int:
        return self._cfg.output_length(frames)

    def __call__(self, x: Tensor) -> Tensor:
        cfg = self._cfg
        if cfg.output_length(x.shape[0]) < 1:
            raise T.ShapeError(f"CNN adapter needs at least {cfg.min_frames()} frames, got {x.shape[0]}")
        for i, conv in enumerate(self.convs):
            if i:
                x = T.gelu(x)
            x = T.conv1d(x, conv.weight, conv.bias, cfg.stride, cfg.padding)
        return x


class _Conv(Module):
    def __init__(self, weight: Parameter, bias: Parameter) -> None:
        self.weight = weight
        self.bias = bias


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class QformerBlock(Module):
    """Pre-norm block: query self-attention, cross-attention to the input, FFN."""

    def __init__(self, cfg: QformerConfig, rng: np.random.Generator) -> None:
        self.ln_self = LayerNorm(cfg.d_model)
        self.self_attn = Attention(cfg.d_model, cfg.num_heads, rng)
        self.ln_cross = LayerNorm(cfg.d_model)
        self.cross_attn = Attention(cfg.d_model, cfg.num_heads, rng, d_kv=cfg.in_dim)
        self.ln_ffn = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_mult * cfg.d_model, rng)

    def __call__(self, q: Tensor, x: Tensor) -> Tensor:
        q = T.add(q, self.self_attn(self.ln_self(q)))
        q = T.add(q, self.cross_attn(self.ln_cross(q), context=x))
        return T.add(q, self.ffn(self.ln_ffn(q)))


class Qformer(Module):
    """Learnable queries summarising a variable-length input into a fixed count."""

    def __init__(self, cfg: QformerConfig, rng: np.random.Generator) -> None:
        self._cfg = cfg
        self.queries = Parameter(rng.normal(0.0, 1.0, size=(cfg.num_queries, cfg.d_model)), name="queries")
        self.blocks = [QformerBlock(cfg, rng) for _ in range(cfg.num_blocks)]
        self.ln_out = LayerNorm(cfg.d_model)

    @property
    def config(self) -> QformerConfig:
        return self._cfg

    @property
    def out_features(self) -> int:
        return self._cfg.d_model

    def output_length(self, frames: int) -> int:
        return self._cfg.num_queries

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self._cfg.in_dim:
            raise T.ShapeError(f"Q-former expects (T, {self._cfg.in_dim}) input, got {x.shape}")
        if self._cfg.encoder_positions:
            x = T.add(x, Tensor(sinusoidal_positions(*x.shape)))
        q = self.queries
        for block in self.blocks:
            q = block(q, x)
        return self.ln_out(q)


class Projection(Linear):
    """Single affine map into the language model's embedding width."""


def project(x: Tensor, proj: Projection) -> Tensor:
    return proj(x)


class ModalityAdapter(Module):
    """Layer-weighted encoder sum, then the adapter body, then the projection."""

    def __init__(self, kind: str, num_encoder_layers: int, body_cfg: CnnAdapterConfig | QformerConfig,
                 rng: np.random.Generator, layer_indices: tuple[int, ...] | None = None) -> None:
        if kind not in ADAPTER_KINDS:
            raise AdapterConfigError(f"unknown adapter kind {kind!r}; expected one of {ADAPTER_KINDS}")
        self._kind = kind
        self._layer_indices = tuple(layer_indices) if layer_indices else None
        n_used = len(self._layer_indices) if self._layer_indices else num_encoder_layers
        self.layer_weights = LayerWeights(n_used)
        if kind == "cnn":
            if not isinstance(body_cfg, CnnAdapterConfig):
                raise AdapterConfigError("cnn adapter needs a CnnAdapterConfig")
            self.body = CnnAdapter(body_cfg, rng)
        else:
            if not isinstance(body_cfg, QformerConfig):
                raise AdapterConfigError("qformer adapter needs a QformerConfig")
            self.body = Qformer(body_cfg, rng)
        self.projection = Projection(self.body.out_features, body_cfg.out_dim, rng)

    @property
    def kind(self) -> str:
        return self._kind

    @property
    def out_dim(self) -> int:
        return self.projection.d_out

    def output_length(self, frames: int) -> int:
        return self.body.output_length(frames)

    def __call__(self, enc: EncoderOutput) -> Tensor:
        if self._layer_indices:
            enc = enc.select(self._layer_indices)
        x = weighted_layer_sum(enc, self.layer_weights)
        return self.projection(self.body(x))


def cnn_adapt(x: Tensor, adapter: CnnAdapter, projection: Projection | None = None) -> Tensor:
    y = adapter(x)
    return projection(y) if projection is not None else y


def qformer_adapt(x: Tensor, adapter: Qformer, projection: Projection | None = None) -> Tensor:
    y = adapter(x)
    return projection(y) if projection is not None else y
