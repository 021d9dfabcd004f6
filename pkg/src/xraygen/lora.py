"""Low-rank adapters for frozen linear layers: W = W0 + (alpha / r) * B @ A."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .nn import Linear, Module, param, trunc_normal
from .tensor import Tensor

DEFAULT_RANK = 16
DEFAULT_ALPHA = 16.0


class LoraConfigError(ValueError):
    pass


class LoraLinear(Module):
    """A frozen ``Linear`` plus a trainable rank-r update.

    ``weight`` (W0, ``[d, k]``) and ``bias`` are frozen on wrap. ``lora_B`` starts
    at zero so a freshly wrapped layer computes exactly what the original did.
    """

    def __init__(self, base: Linear, r: int, alpha: float, rng: np.random.Generator, init_std: float = 0.02):
        d, k = base.weight.shape
        if r < 1 or r >= min(d, k):
            raise LoraConfigError(f"rank {r} must satisfy 1 <= r < min(d, k) = {min(d, k)}")
        if alpha <= 0:
            raise LoraConfigError(f"alpha must be positive, got {alpha}")
        self.weight = base.weight
        self.bias = base.bias
        self.weight.requires_grad = False
        if self.bias is not None:
            self.bias.requires_grad = False
        self.lora_A = param(trunc_normal(rng, (r, k), init_std))
        self.lora_B = param(np.zeros((d, r)))
        self._r = r
        self._alpha = float(alpha)

    @property
    def r(self) -> int:
        return self._r

    @property
    def alpha(self) -> float:
        return self._alpha

    @alpha.setter
    def alpha(self, value: float) -> None:
        self._alpha = float(value)

    @property
    def scale(self) -> float:
        return self._alpha / self._r

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise T.DimensionError(f"LoraLinear expects width {self.in_features}, got input {x.shape}")
        y = T.matmul(x, T.transpose(self.weight))
        if self.bias is not None:
            y = y + self.bias
        delta = T.matmul(T.matmul(x, T.transpose(self.lora_A)), T.transpose(self.lora_B))
        return y + delta * self.scale

    def effective_weight(self) -> np.ndarray:
        return self.weight.data + self.scale * (self.lora_B.data @ self.lora_A.data)

    def merge(self) -> Linear:
        """Fold the adapter into a plain ``Linear``; the wrapped layer is left untouched."""
        merged = Linear.__new__(Linear)
        merged.weight = Tensor(self.effective_weight())
        merged.bias = None if self.bias is None else Tensor(self.bias.data.copy())
        return merged


def wrap(handle, r: int = DEFAULT_RANK, alpha: float = DEFAULT_ALPHA, rng=None) -> LoraLinear:
    """Replace the projection behind an encoder handle with a :class:`LoraLinear`.

    ``handle`` is either a bare ``Linear`` (returned wrapped, nothing replaced) or a
    ``(layer, role, module)`` projection handle with a ``block`` to patch.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    module = handle.module if hasattr(handle, "module") else handle
    if isinstance(module, LoraLinear):
        raise LoraConfigError("projection already wrapped")
    return LoraLinear(module, r, alpha, rng)


def apply_lora(encoder, r: int = DEFAULT_RANK, alpha: float = DEFAULT_ALPHA, roles=("query", "value"), seed: int = 0):
    """Wrap every targeted projection of ``encoder`` in place; returns the adapters."""
    rng = np.random.default_rng(seed)
    adapters = []
    for h in encoder.attention_projections(roles):
        block = encoder.layers[h.layer]
        if isinstance(h.module, LoraLinear):
            adapters.append(h.module)
            continue
        lora = wrap(h, r, alpha, rng)
        setattr(block, h.role, lora)
        adapters.append(lora)
    return adapters


def lora_modules(module: Module) -> list[tuple[str, LoraLinear]]:
    return [(name, m) for name, m in module.named_modules() if isinstance(m, LoraLinear)]


def merge_lora(encoder) -> None:
    """Fold every adapter of ``encoder`` back into plain frozen linears, in place."""
    for block in encoder.layers:
        for role in ("query", "key", "value", "output", "mlp_in", "mlp_out"):
            m = getattr(block, role)
            if isinstance(m, LoraLinear):
                merged = m.merge()
                merged.weight.requires_grad = False
                setattr(block, role, merged)


def lora_param_count(targets: Iterable, r: int) -> int:
    """Sum of r * (d + k) over target weight shapes (or handles exposing ``.shape``)."""
    if r < 1:
        raise LoraConfigError(f"rank must be >= 1, got {r}")
    total = 0
    for t in targets:
        d, k = t.shape if hasattr(t, "shape") else t
        total += r * (d + k)
    return total


def qv_shapes(widths_by_layer: Sequence[int]) -> list[tuple[int, int]]:
    """Square query and value shapes for a stack of layers with the given widths."""
    return [(w, w) for w in widths_by_layer for _ in ("query", "value")]
