"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable primitive records a node on the active tape when at least
one input participates (requires a gradient). :func:`backward` replays the
tape in reverse. The tape is reset explicitly with :func:`reset_tape`, once per
optimisation step.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "TapeError",
    "tensor",
    "no_grad",
    "reset_tape",
    "tape_size",
    "backward",
    "matmul",
    "add",
    "mul",
    "scalar_mul",
    "softmax",
    "log_softmax",
    "layer_norm",
    "gelu",
    "conv1d",
    "conv1d_length",
    "embedding_lookup",
    "concat",
    "transpose",
    "reshape",
    "cross_entropy_masked",
]

# tanh-approximation constants for GELU
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


class ShapeError(ValueError):
    """Operand shapes violate a primitive's contract."""


class TapeError(RuntimeError):
    """Backward requested on a tensor that is not on the active tape."""


class _Tape:
    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self.enabled = True
        self.generation = 0

    def record(self, node: "Tensor") -> None:
        node.tape_id = (self.generation, len(self.nodes))
        self.nodes.append(node)

    def reset(self) -> None:
        for node in self.nodes:
            node._backward = None
            node._parents = ()
        self.nodes = []
        self.generation += 1


_TAPE = _Tape()


def reset_tape() -> None:
    """Drop every recorded node. Call once per training step."""
    _TAPE.reset()


def tape_size() -> int:
    return len(_TAPE.nodes)


@contextlib.contextmanager
def no_grad():
    """Run primitives without recording anything on the tape."""
    prev = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = prev


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    ``requires_grad`` marks a leaf as participating in differentiation.
    Results of primitives participate whenever any of their inputs do.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape_id: tuple[int, int] | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar for small expressions and tests
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __sub__(self, other):
        return add(self, scalar_mul(_as_tensor(other), -1.0))

    @property
    def T(self) -> "Tensor":
        return transpose(self)


class Parameter(Tensor):
    """A named leaf tensor. Frozen parameters never join the tape."""

    def __init__(self, data, name: str = "", frozen: bool = False) -> None:
        super().__init__(data, requires_grad=not frozen)
        self.name = name
        self._frozen = bool(frozen)

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self._frozen = bool(value)
        self.requires_grad = not self._frozen
        if self._frozen:
            self.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _TAPE.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        _TAPE.record(out)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every participating leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    if loss.tape_id is None or loss.tape_id[0] != _TAPE.generation or loss._backward is None:
        raise TapeError("loss is detached from the active tape; nothing to differentiate")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    upto = loss.tape_id[1]
    for node in reversed(_TAPE.nodes[: upto + 1]):
        g = grads.pop(id(node), None)
        if g is None or node._backward is None:
            continue
        node._pending = grads  # type: ignore[attr-defined]
        node._backward(g)
        del node._pending  # type: ignore[attr-defined]


def _send(parent: Tensor, g: np.ndarray, grads: dict[int, np.ndarray]) -> None:
    if not parent.requires_grad:
        return
    if parent._backward is None:
        # leaf
        parent._accumulate(g)
        return
    key = id(parent)
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D @ 2-D, or batched 3-D @ 3-D with equal leading dimension."""
    _check(
        a.ndim in (2, 3) and a.ndim == b.ndim and a.shape[-1] == b.shape[-2]
        and (a.ndim == 2 or a.shape[0] == b.shape[0]),
        f"matmul shape mismatch: {a.shape} @ {b.shape}",
    )
    out_data = a.data @ b.data

    def _bw(g):
        grads = out._pending
        if a.requires_grad:
            _send(a, g @ np.swapaxes(b.data, -1, -2), grads)
        if b.requires_grad:
            _send(b, np.swapaxes(a.data, -1, -2) @ g, grads)

    out = _make(out_data, (a, b), _bw)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum. ``b`` may match a trailing suffix of ``a``'s shape."""
    lead = a.ndim - b.ndim
    _check(
        lead >= 0 and a.shape[lead:] == b.shape,
        f"add shape mismatch: {a.shape} + {b.shape}",
    )
    out_data = a.data + b.data

    def _bw(g):
        grads = out._pending
        if a.requires_grad:
            _send(a, g, grads)
        if b.requires_grad:
            _send(b, g.sum(axis=tuple(range(lead))) if lead else g, grads)

    out = _make(out_data, (a, b), _bw)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equal shapes (or trailing-suffix ``b``)."""
    lead = a.ndim - b.ndim
    _check(
        lead >= 0 and a.shape[lead:] == b.shape,
        f"mul shape mismatch: {a.shape} * {b.shape}",
    )
    out_data = a.data * b.data

    def _bw(g):
        grads = out._pending
        if a.requires_grad:
            _send(a, g * b.data, grads)
        if b.requires_grad:
            gb = g * a.data
            _send(b, gb.sum(axis=tuple(range(lead))) if lead else gb, grads)

    out = _make(out_data, (a, b), _bw)
    return out


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def _bw(g):
        _send(a, g * c, out._pending)

    out = _make(a.data * c, (a,), _bw)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        _send(x, y * (g - (g * y).sum(axis=axis, keepdims=True)), out._pending)

    out = _make(y, (x,), _bw)
    return out


def _log_softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    m = z.max(axis=axis, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=axis, keepdims=True))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = _log_softmax_np(x.data, axis)

    def _bw(g):
        p = np.exp(y)
        _send(x, g - p * g.sum(axis=axis, keepdims=True), out._pending)

    out = _make(y, (x,), _bw)
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    d = x.shape[-1]
    _check(
        gamma.shape == (d,) and beta.shape == (d,),
        f"layer_norm shape mismatch: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}",
    )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def _bw(g):
        grads = out._pending
        lead = tuple(range(x.ndim - 1))
        if gamma.requires_grad:
            _send(gamma, (g * xhat).sum(axis=lead), grads)
        if beta.requires_grad:
            _send(beta, g.sum(axis=lead), grads)
        if x.requires_grad:
            gx = g * gamma.data
            dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _send(x, dx, grads)

    out = _make(y, (x, gamma, beta), _bw)
    return out


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(c (x + a x^3)))."""
    z = x.data
    u = GELU_C * (z + GELU_A * z**3)
    t = np.tanh(u)
    y = 0.5 * z * (1.0 + t)

    def _bw(g):
        du = GELU_C * (1.0 + 3.0 * GELU_A * z * z)
        dy = 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * du
        _send(x, g * dy, out._pending)

    out = _make(y, (x,), _bw)
    return out


def conv1d_length(T: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    """Output length floor((T + 2*padding - kernel) / stride) + 1."""
    return (T + 2 * padding - kernel) // stride + 1


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Temporal convolution.

    Args:
        x: (T, in_channels) input, time-major.
        weight: (out_channels, in_channels, kernel).
        bias: optional (out_channels,).

    Returns:
        (T_out, out_channels) with T_out = ``conv1d_length(T, kernel, stride, padding)``.
    """
    _check(x.ndim == 2 and weight.ndim == 3 and weight.shape[1] == x.shape[1],
           f"conv1d shape mismatch: x {x.shape}, weight {weight.shape}")
    if bias is not None:
        _check(bias.shape == (weight.shape[0],),
               f"conv1d shape mismatch: weight {weight.shape}, bias {bias.shape}")
    T, cin = x.shape
    cout, _, k = weight.shape
    t_out = conv1d_length(T, k, stride, padding)
    _check(t_out >= 1, f"conv1d input too short: T={T}, kernel={k}, padding={padding}")
    xp = np.pad(x.data, ((padding, padding), (0, 0))) if padding else x.data
    idx = np.arange(t_out)[:, None] * stride + np.arange(k)[None, :]  # (t_out, k)
    cols = xp[idx]  # (t_out, k, cin)
    w2 = weight.data.transpose(2, 1, 0).reshape(k * cin, cout)
    y = cols.reshape(t_out, k * cin) @ w2
    if bias is not None:
        y = y + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _bw(g):
        grads = out._pending
        if weight.requires_grad:
            gw = cols.reshape(t_out, k * cin).T @ g  # (k*cin, cout)
            _send(weight, gw.reshape(k, cin, cout).transpose(2, 1, 0), grads)
        if bias is not None and bias.requires_grad:
            _send(bias, g.sum(axis=0), grads)
        if x.requires_grad:
            gcols = (g @ w2.T).reshape(t_out, k, cin)
            gxp = np.zeros_like(xp)
            np.add.at(gxp, idx, gcols)
            _send(x, gxp[padding:padding + T] if padding else gxp, grads)

    out = _make(y, parents, _bw)
    return out


def embedding_lookup(table: Tensor, ids: Sequence[int] | np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    _check(table.ndim == 2 and ids.ndim == 1, f"embedding_lookup shape mismatch: table {table.shape}, ids {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup id out of range for table {table.shape}")

    def _bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        _send(table, gt, out._pending)

    out = _make(table.data[ids], (table,), _bw)
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    _check(len(tensors) > 0, "concat of an empty list")
    ref = list(tensors[0].shape)
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        s = list(t.shape)
        _check(len(s) == len(ref) and all(s[i] == ref[i] for i in range(len(s)) if i != ax),
               f"concat shape mismatch: {tuple(ref)} vs {tuple(s)} on axis {axis}")
    y = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def _bw(g):
        grads = out._pending
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                _send(t, g[tuple(sl)], grads)

    out = _make(y, tensors, _bw)
    return out


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def _bw(g):
        _send(x, g.transpose(inv), out._pending)

    out = _make(x.data.transpose(axes), (x,), _bw)
    return out


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape

    def _bw(g):
        _send(x, g.reshape(src), out._pending)

    out = _make(x.data.reshape(tuple(shape)), (x,), _bw)
    return out


def cross_entropy_masked(logits: Tensor, targets: Sequence[int] | np.ndarray,
                         mask: Sequence[bool] | np.ndarray) -> tuple[Tensor, bool]:
    """Mean next-token negative log-likelihood over masked-in positions.

    Returns ``(loss, empty)``. When the mask selects nothing the loss is a
    zero scalar and ``empty`` is True.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    _check(logits.ndim == 2 and targets.shape == (logits.shape[0],) and mask.shape == targets.shape,
           f"cross_entropy_masked shape mismatch: logits {logits.shape}, targets {targets.shape}, mask {mask.shape}")
    V = logits.shape[1]
    pos = np.flatnonzero(mask)
    bad = [int(p) for p in pos if not 0 <= targets[p] < V]
    if bad:
        raise ValueError(f"target id {int(targets[bad[0]])} at position {bad[0]} outside vocabulary [0, {V})")
    n = pos.size
    if n == 0:
        return Tensor(np.zeros(())), True
    logp = _log_softmax_np(logits.data[pos], axis=-1)
    loss = -logp[np.arange(n), targets[pos]].sum() / n

    def _bw(g):
        p = np.exp(logp)
        p[np.arange(n), targets[pos]] -= 1.0
        full = np.zeros_like(logits.data)
        full[pos] = p * (float(g) / n)
        _send(logits, full, out._pending)

    out = _make(np.asarray(loss), (logits,), _bw)
    return out, False


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return math.sqrt(total)
