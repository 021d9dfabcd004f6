"""Parameter containers and transformer building blocks shared by the encoder and the LM."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Attribute-walking parameter registry.

    Tensor attributes are parameters; Module attributes are children. Names are
    dotted attribute paths in insertion order, e.g. ``layer0.query.weight``.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, value in vars(self).items():
            if not name.startswith("_") and isinstance(value, Module):
                yield from value.named_modules(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

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
            if own[name].shape != tuple(arr.shape):
                raise T.DimensionError(f"{name}: expected {own[name].shape}, got {tuple(arr.shape)}")
            own[name].data = np.array(arr, dtype=own[name].data.dtype)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    """y = x W^T + b with W stored as [out, in]."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, std: float = 0.02):
        self.weight = param(trunc_normal(rng, (d_out, d_in), std))
        if bias:
            self.bias = param(np.zeros(d_out))
        else:
            self.bias = None

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise T.DimensionError(f"Linear expects width {self.in_features}, got input {x.shape}")
        y = T.matmul(x, T.transpose(self.weight))
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.weight = param(np.ones(d))
        self.bias = param(np.zeros(d))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self._eps)


class Block(Module):
    """Pre-norm transformer block with separately addressable Q/K/V/O projections."""

    def __init__(self, d: int, num_heads: int, mlp_ratio: int, rng: np.random.Generator, causal: bool):
        if d % num_heads:
            raise ValueError(f"width {d} not divisible by {num_heads} heads")
        self.norm1 = LayerNorm(d)
        self.query = Linear(d, d, rng)
        self.key = Linear(d, d, rng)
        self.value = Linear(d, d, rng)
        self.output = Linear(d, d, rng)
        self.norm2 = LayerNorm(d)
        self.mlp_in = Linear(d, mlp_ratio * d, rng)
        self.mlp_out = Linear(mlp_ratio * d, d, rng)
        self._heads = num_heads
        self._causal = causal

    PROJECTIONS = ("query", "key", "value", "output", "mlp_in", "mlp_out")

    def attention(self, x: Tensor, return_weights: bool = False):
        B, L, d = x.shape
        h = self._heads
        dh = d // h

        def split(t):
            return T.transpose(T.reshape(t, (B, L, h, dh)), (0, 2, 1, 3))

        q, k, v = split(self.query(x)), split(self.key(x)), split(self.value(x))
        scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
        if self._causal:
            scores = T.masked_fill(scores, _causal_mask(L), -np.inf)
        weights = T.softmax(scores, axis=-1)
        ctx = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (B, L, d))
        out = self.output(ctx)
        return (out, weights) if return_weights else out

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attention(self.norm1(x))
        return x + self.mlp_out(T.gelu(self.mlp_in(self.norm2(x))))


_MASKS: dict[int, np.ndarray] = {}


def _causal_mask(n: int) -> np.ndarray:
    m = _MASKS.get(n)
    if m is None:
        m = np.triu(np.ones((n, n), dtype=bool), k=1)
        _MASKS[n] = m
    return m


def block_param_count(d: int, mlp_ratio: int = 4) -> int:
    """Closed-form size of one :class:`Block`: four d x d projections, the MLP, two norms."""
    return 4 * (d * d + d) + (mlp_ratio * d * d + mlp_ratio * d) + (mlp_ratio * d * d + d) + 4 * d

