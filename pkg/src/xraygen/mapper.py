"""Linear projection of visual features into the language model's embedding space."""

from __future__ import annotations

import numpy as np

from .nn import Linear, Module
from .tensor import DimensionError, Tensor


class VisualMapper(Module):
    """H_v = Z_v W^T (+ b): one affine map applied per visual token.

    The weight is stored ``[d_llm, d_v]``; the bias is off by default.
    """

    def __init__(self, d_v: int, d_llm: int, rng: np.random.Generator, bias: bool = False):
        self.proj = Linear(d_v, d_llm, rng, bias=bias)

    @property
    def weight(self) -> Tensor:
        return self.proj.weight

    @property
    def d_v(self) -> int:
        return self.proj.in_features

    @property
    def d_llm(self) -> int:
        return self.proj.out_features

    def named_parameters(self, prefix: str = ""):
        # flatten so names read ``mapper.weight`` / ``mapper.bias``
        yield f"{prefix}weight", self.proj.weight
        if self.proj.bias is not None:
            yield f"{prefix}bias", self.proj.bias

    def __call__(self, z: Tensor) -> Tensor:
        if z.shape[-1] != self.d_v:
            raise DimensionError(f"mapper expects feature width {self.d_v}, got {z.shape}")
        return self.proj(z)

    project = __call__

    def param_count(self) -> int:
        return mapper_param_count(self.d_v, self.d_llm, self.proj.bias is not None)


def mapper_param_count(d_v: int, d_llm: int, bias: bool = False) -> int:
    return d_llm * d_v + (d_llm if bias else 0)
