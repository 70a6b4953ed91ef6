"""Layer building blocks over :mod:`desta.tensor`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

__all__ = ["Module", "Linear", "LayerNorm", "Embedding", "Attention", "FeedForward", "LoRAPair"]


class Module:
    """Container that discovers parameters and sub-modules from its attributes.

    Attribute insertion order fixes parameter order, so names and iteration
    are deterministic.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            path = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield path, val
            elif isinstance(val, Module):
                yield from val.named_parameters(path + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if not p.frozen]

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.frozen = True
        return self

    def unfreeze(self) -> "Module":
        for p in self.parameters():
            p.frozen = False
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(p.data.size for p in self.parameters() if not (trainable_only and p.frozen))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, arr in state.items():
            if name not in own:
                continue
            p = own[name]
            if p.shape != tuple(arr.shape):
                raise T.ShapeError(f"{name}: checkpoint shape {tuple(arr.shape)} != parameter shape {p.shape}")
            p.data[...] = arr


class LoRAPair(Module):
    """Low-rank update ``B @ A`` for a host projection.

    ``A`` is (rank, d_in), ``B`` is (d_out, rank) and starts at zero, so the
    branch contributes nothing until trained.
    """

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float,
                 rng: np.random.Generator, host: str = "") -> None:
        if rank < 1:
            raise ValueError(f"LoRA rank must be >= 1, got {rank}")
        self.A = Parameter(rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(rank, d_in)), name="A")
        self.B = Parameter(np.zeros((d_out, rank)), name="B")
        self._rank = rank
        self._alpha = float(alpha)
        self._scale = 1.0
        self._host = host

    @property
    def rank(self) -> int:
        return self._rank

    @property
    def alpha(self) -> float:
        return self._alpha

    @property
    def host(self) -> str:
        return self._host

    @property
    def scale(self) -> float:
        return self._scale

    @scale.setter
    def scale(self, s: float) -> None:
        s = float(s)
        if not 0.0 <= s <= 1.0:
            raise ValueError(f"LoRA test-time scale must lie in [0, 1], got {s}")
        self._scale = s


def lora_forward(x: Tensor, weight: Tensor, pair: LoRAPair | None, scale: float | None = None,
                 bias: Tensor | None = None) -> Tensor:
    """Row-vector form of ``W x + s * (alpha / r) * B (A x)``.

    ``weight`` is (d_out, d_in); ``x`` is (n, d_in). Training uses ``s = 1``.
    """
    y = T.matmul(x, T.transpose(weight))
    if bias is not None:
        y = T.add(y, bias)
    if pair is None:
        return y
    s = pair.scale if scale is None else float(scale)
    branch = T.matmul(T.matmul(x, T.transpose(pair.A)), T.transpose(pair.B))
    return T.add(y, T.scalar_mul(branch, s * pair.alpha / pair.rank))


class Linear(Module):
    """Affine map ``x W^T + b`` with an optional LoRA branch."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 std: float | None = None) -> None:
        std = 1.0 / math.sqrt(d_in) if std is None else std
        self.weight = Parameter(rng.normal(0.0, std, size=(d_out, d_in)), name="weight")
        self.bias = Parameter(np.zeros(d_out), name="bias") if bias else None
        self.lora: LoRAPair | None = None
        self._d_in = d_in
        self._d_out = d_out

    @property
    def d_in(self) -> int:
        return self._d_in

    @property
    def d_out(self) -> int:
        return self._d_out

    def __call__(self, x: Tensor) -> Tensor:
        return lora_forward(x, self.weight, self.lora, bias=self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5) -> None:
        self.gamma = Parameter(np.ones(d), name="gamma")
        self.beta = Parameter(np.zeros(d), name="beta")
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self._eps)


class Embedding(Module):
    def __init__(self, num: int, d: int, rng: np.random.Generator, std: float = 1.0) -> None:
        self.weight = Parameter(rng.normal(0.0, std, size=(num, d)), name="weight")

    def __call__(self, ids) -> Tensor:
        return T.embedding_lookup(self.weight, ids)


def causal_mask(n_query: int, n_key: int) -> np.ndarray:
    """Additive mask: position i may attend to keys j <= i."""
    m = np.zeros((n_query, n_key))
    m[np.triu_indices(n_query, k=1, m=n_key)] = -np.inf
    return m


class Attention(Module):
    """Multi-head attention with separate q/k/v/o projections.

    Keys and values may come from a different sequence (cross-attention) with
    its own width ``d_kv``.
    """

    def __init__(self, d_model: int, num_heads: int, rng: np.random.Generator,
                 d_kv: int | None = None, bias: bool = False) -> None:
        if d_model % num_heads:
            raise ValueError(f"d_model={d_model} is not divisible by num_heads={num_heads}")
        d_kv = d_model if d_kv is None else d_kv
        self.q = Linear(d_model, d_model, rng, bias=bias)
        self.k = Linear(d_kv, d_model, rng, bias=bias)
        self.v = Linear(d_kv, d_model, rng, bias=bias)
        self.o = Linear(d_model, d_model, rng, bias=bias)
        self._heads = num_heads
        self._d_model = d_model

    def _split(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        h = self._heads
        return T.transpose(T.reshape(x, (n, h, self._d_model // h)), (1, 0, 2))

    def __call__(self, x: Tensor, context: Tensor | None = None, mask: np.ndarray | None = None) -> Tensor:
        ctx = x if context is None else context
        n = x.shape[0]
        q = self._split(self.q(x))
        k = self._split(self.k(ctx))
        v = self._split(self.v(ctx))
        scores = T.scalar_mul(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(self._d_model // self._heads))
        if mask is not None:
            scores = T.add(scores, Tensor(mask))
        att = T.softmax(scores, axis=-1)
        y = T.matmul(att, v)  # (h, n, dh)
        y = T.reshape(T.transpose(y, (1, 0, 2)), (n, self._d_model))
        return self.o(y)


class FeedForward(Module):
    def __init__(self, d_model: int, d_hidden: int, rng: np.random.Generator) -> None:
        self.fc1 = Linear(d_model, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))
