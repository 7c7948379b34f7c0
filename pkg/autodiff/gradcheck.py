from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from autodiff.tensor import Graph, ShapeError, Tensor


def _check_eps(eps: float) -> None:
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")


def _scalar(out: Tensor) -> float:
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar-valued function, got output shape {out.shape}")
    return out.item()


def grad_check(fn: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    Inputs sitting exactly on a relu kink are not differentiable there and
    must be avoided by the caller.
    """
    _check_eps(eps)
    leaf = Tensor(x.data.copy(), requires_grad=True)
    with Graph() as graph:
        out = fn(leaf)
    _scalar(out)
    graph.backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)

    base = x.data.copy()
    worst = 0.0
    for index in np.ndindex(base.shape):
        shifted = base.copy()
        shifted[index] += eps
        upper = _scalar(fn(Tensor(shifted)))
        shifted[index] -= 2.0 * eps
        lower = _scalar(fn(Tensor(shifted)))
        numeric = (upper - lower) / (2.0 * eps)
        value = float(analytic[index])
        worst = max(worst, abs(value - numeric) / max(1.0, abs(value)))
    return worst


def grad_check_parameters(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Same metric as :func:`grad_check`, taken over every entry of every parameter.

    ``loss_fn`` must be deterministic: any dropout stream has to be rebuilt
    from the same seed on each call.
    """
    _check_eps(eps)
    for param in params:
        param.zero_grad()
    with Graph() as graph:
        out = loss_fn()
    _scalar(out)
    graph.backward(out)

    worst = 0.0
    for param in params:
        analytic = param.grad if param.grad is not None else np.zeros_like(param.data)
        for index in np.ndindex(param.data.shape):
            original = float(param.data[index])
            param.data[index] = original + eps
            upper = _scalar(loss_fn())
            param.data[index] = original - eps
            lower = _scalar(loss_fn())
            param.data[index] = original
            numeric = (upper - lower) / (2.0 * eps)
            value = float(analytic[index])
            worst = max(worst, abs(value - numeric) / max(1.0, abs(value)))
    return worst
