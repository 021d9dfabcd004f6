"""Patch-based transformer image encoder producing a grid of visual features."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .nn import Block, LayerNorm, Linear, Module, param, trunc_normal
from .tensor import DimensionError, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    in_channels: int = 1
    embed_dim: int = 32
    num_layers: int = 2
    num_heads: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size**2


class ProjectionHandle(NamedTuple):
    layer: int
    role: str
    module: Linear

    @property
    def name(self) -> str:
        return f"encoder.layer{self.layer}.{self.role}"

    @property
    def shape(self) -> tuple[int, int]:
        return self.module.weight.shape


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """[B, C, H, W] -> [B, (H/p)*(W/p), C*p*p], patches in row-major grid order."""
    B, C, H, W = images.shape
    gh, gw = H // patch, W // patch
    x = images.reshape(B, C, gh, patch, gw, patch)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(B, gh * gw, C * patch * patch)


class VisualEncoder(Module):
    """Linear patch embedding, learned absolute positions, pre-norm blocks, final norm.

    The output is the last layer's token grid with no pooling and no class token.
    """

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        self.patch_embed = Linear(config.patch_dim, config.embed_dim, rng)
        self.pos_embed = param(trunc_normal(rng, (config.num_patches, config.embed_dim)))
        for i in range(config.num_layers):
            setattr(self, f"layer{i}", Block(config.embed_dim, config.num_heads, config.mlp_ratio, rng, causal=False))
        self.norm = LayerNorm(config.embed_dim)

    @property
    def layers(self) -> list[Block]:
        return [getattr(self, f"layer{i}") for i in range(self.config.num_layers)]

    def _check(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images.data if isinstance(images, Tensor) else images)
        c = self.config
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:] != (c.in_channels, c.image_size, c.image_size):
            raise DimensionError(
                f"expected images of shape (B, {c.in_channels}, {c.image_size}, {c.image_size}), got {images.shape}"
            )
        return images

    def embed_patches(self, images) -> Tensor:
        """Patch projection only, before positional terms are added."""
        images = self._check(images)
        return self.patch_embed(Tensor(patchify(images, self.config.patch_size)))

    def __call__(self, images) -> Tensor:
        x = self.embed_patches(images) + self.pos_embed
        for block in self.layers:
            x = block(x)
        return self.norm(x)

    encode = __call__

    def named_projections(self) -> list[ProjectionHandle]:
        return [
            ProjectionHandle(i, role, getattr(block, role))
            for i, block in enumerate(self.layers)
            for role in Block.PROJECTIONS
        ]

    def attention_projections(self, roles=("query", "value")) -> list[ProjectionHandle]:
        return [h for h in self.named_projections() if h.role in roles]
