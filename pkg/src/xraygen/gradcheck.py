"""Central finite-difference checks for the autograd engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numeric_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """d fn / d arrays[i] by central differences; ``fn`` must return a scalar Tensor."""
    grads = []
    for i, base in enumerate(arrays):
        g = np.zeros_like(base, dtype=np.float64)
        for idx in np.ndindex(base.shape):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i][idx] += h
            minus[i][idx] -= h
            fp = fn(*[Tensor(a) for a in plus]).item()
            fm = fn(*[Tensor(a) for a in minus]).item()
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def analytic_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    backward(fn(*leaves))
    return [np.zeros_like(a) if t.grad is None else t.grad for a, t in zip(arrays, leaves)]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the larger of the two gradients' max magnitudes."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-5) -> float:
    """Worst relative error over all inputs of ``fn``."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    ana = analytic_grad(fn, arrays)
    num = numeric_grad(fn, arrays, h)
    return max(relative_error(a, n) for a, n in zip(ana, num))


def projected(op: Callable[..., Tensor], out_shape, rng: np.random.Generator) -> Callable[..., Tensor]:
    """Reduce a tensor-valued op to a scalar with a fixed random weighting."""
    w = Tensor(rng.normal(size=out_shape))
    return lambda *xs: (op(*xs) * w).sum()
