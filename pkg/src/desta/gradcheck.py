"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Parameter, Tensor, backward, no_grad, reset_tape


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(numeric))


def finite_difference(loss_fn: Callable[[], Tensor], param: Tensor, index: tuple, h: float = 1e-5) -> float:
    """Central difference of ``loss_fn`` with respect to one entry of ``param``."""
    orig = param.data[index]
    try:
        with no_grad():
            param.data[index] = orig + h
            plus = loss_fn().item()
            param.data[index] = orig - h
            minus = loss_fn().item()
    finally:
        param.data[index] = orig
    return (plus - minus) / (2.0 * h)


def check_gradients(loss_fn: Callable[[], Tensor], params: Iterable[tuple[str, Parameter]],
                    samples_per_param: int = 3, h: float = 1e-5,
                    rng: np.random.Generator | None = None) -> list[dict]:
    """Compare autograd against central differences on sampled entries.

    Returns one record per sampled entry with keys ``name``, ``index``,
    ``analytic``, ``numeric`` and ``rel_error``.
    """
    rng = rng or np.random.default_rng(0)
    params = list(params)
    reset_tape()
    for _, p in params:
        p.grad = None
    loss = loss_fn()
    backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in params}
    reset_tape()
    out = []
    for name, p in params:
        k = min(samples_per_param, p.data.size)
        flat = rng.choice(p.data.size, size=k, replace=False)
        for f in flat:
            idx = np.unravel_index(int(f), p.shape)
            num = finite_difference(loss_fn, p, idx, h)
            a = float(analytic[name][idx])
            out.append({"name": name, "index": tuple(int(i) for i in idx), "analytic": a,
                        "numeric": num, "rel_error": relative_error(a, num)})
    return out


def strict_relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    """|a - n| / max(|a|, |n|, floor); no absolute-error escape hatch."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients_by_component(loss_fn: Callable[[], Tensor], params: Iterable[tuple[str, Parameter]],
                                 component_of: Callable[[str], str], samples_per_component: int = 20,
                                 h: float = 1e-5, rng: np.random.Generator | None = None) -> list[dict]:
    """Like :func:`check_gradients` but samples entries per component.

    Entries are drawn uniformly over all scalars of a component, so large
    matrices do not crowd out small vectors. A component with fewer scalars
    than ``samples_per_component`` is checked exhaustively.
    """
    rng = rng or np.random.default_rng(0)
    params = list(params)
    reset_tape()
    for _, p in params:
        p.grad = None
    backward(loss_fn())
    reset_tape()
    groups: dict[str, list[tuple[str, Parameter]]] = {}
    for name, p in params:
        groups.setdefault(component_of(name), []).append((name, p))
    out = []
    for comp, members in sorted(groups.items()):
        sizes = np.array([p.data.size for _, p in members])
        total = int(sizes.sum())
        picks = rng.choice(total, size=min(samples_per_component, total), replace=False)
        bounds = np.cumsum(sizes)
        for f in sorted(int(x) for x in picks):
            j = int(np.searchsorted(bounds, f, side="right"))
            name, p = members[j]
            idx = np.unravel_index(f - (int(bounds[j - 1]) if j else 0), p.shape)
            a = float(p.grad[idx]) if p.grad is not None else 0.0
            num = finite_difference(loss_fn, p, idx, h)
            out.append({"component": comp, "name": name, "index": tuple(int(i) for i in idx), "analytic": a,
                        "numeric": num, "rel_error": relative_error(a, num),
                        "strict_rel_error": strict_relative_error(a, num)})
    return out
