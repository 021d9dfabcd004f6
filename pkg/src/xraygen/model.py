"""Encoder -> mapper -> frozen causal LM, wired into one parameter tree."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .archive import load_archive, read_manifest, save_archive
from .data import report_vocabulary
from .encoder import EncoderConfig, VisualEncoder
from .lm import CausalLM, LMConfig, PromptSequence, PromptTemplate, Tokenizer, assemble_batch, nll_loss
from .lora import DEFAULT_ALPHA, DEFAULT_RANK, LoraLinear, apply_lora, lora_modules
from .mapper import VisualMapper
from .nn import Module
from .tensor import Tensor


@dataclass
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    in_channels: int = 1
    d_v: int = 32
    encoder_layers: int = 2
    encoder_heads: int = 4
    d_llm: int = 64
    lm_layers: int = 2
    lm_heads: int = 4
    max_len: int = 160
    mlp_ratio: int = 4
    mapper_bias: bool = False
    template: str = PromptTemplate.template
    instruction: str = PromptTemplate.instruction

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            self.image_size, self.patch_size, self.in_channels, self.d_v,
            self.encoder_layers, self.encoder_heads, self.mlp_ratio,
        )

    def lm_config(self, vocab_size: int) -> LMConfig:
        return LMConfig(vocab_size, self.d_llm, self.lm_layers, self.lm_heads, self.max_len, self.mlp_ratio)

    def prompt_template(self) -> PromptTemplate:
        return PromptTemplate(self.template, self.instruction)

    def to_dict(self) -> dict:
        return asdict(self)


def build_tokenizer(config: Optional[ModelConfig] = None) -> Tokenizer:
    """Vocabulary covering every report word plus the prompt scaffold; independent of any corpus."""
    config = config or ModelConfig()
    return Tokenizer.from_texts(report_vocabulary() + config.prompt_template().texts())


class ReportModel(Module):
    """Parameter names are prefixed ``encoder.``, ``mapper.`` and ``lm.``."""

    def __init__(self, config: ModelConfig, tokenizer: Tokenizer, seed: int = 0):
        rng = np.random.default_rng(seed)
        self._config = config
        self._tokenizer = tokenizer
        self._template = config.prompt_template()
        self.encoder = VisualEncoder(config.encoder_config(), rng)
        self.mapper = VisualMapper(config.d_v, config.d_llm, rng, bias=config.mapper_bias)
        self.lm = CausalLM(config.lm_config(len(tokenizer)), rng)
        self._lora: Optional[dict] = None

    @property
    def config(self) -> ModelConfig:
        return self._config

    @property
    def tokenizer(self) -> Tokenizer:
        return self._tokenizer

    @property
    def template(self) -> PromptTemplate:
        return self._template

    @property
    def lora_settings(self) -> Optional[dict]:
        return self._lora

    def add_lora(self, r: int = DEFAULT_RANK, alpha: float = DEFAULT_ALPHA, seed: int = 0) -> list[LoraLinear]:
        adapters = apply_lora(self.encoder, r, alpha, seed=seed)
        self._lora = {"r": r, "alpha": alpha, "seed": seed}
        return adapters

    def has_lora(self) -> bool:
        return bool(lora_modules(self.encoder))

    def visual_tokens(self, images) -> Tensor:
        return self.mapper(self.encoder(images))

    def prompt(self, images, reports: Optional[Sequence[str]] = None, report_ids=None) -> PromptSequence:
        return assemble_batch(self.visual_tokens(images), self.lm, self._tokenizer, reports, self._template, report_ids)

    def loss(self, images, reports: Optional[Sequence[str]] = None, report_ids=None) -> Tensor:
        seq = self.prompt(images, reports, report_ids)
        return nll_loss(self.lm(seq.embeddings), seq)

    def encode_reports(self, reports: Sequence[str]) -> list[list[int]]:
        eos = self._tokenizer.eos_id
        return [self._tokenizer.encode(r) + [eos] for r in reports]

    def component_names(self, component: str) -> list[str]:
        return [n for n, _ in self.named_parameters() if n.startswith(component + ".")]

    def save_lm(self, path) -> None:
        """Persist the (pretrained) language model on its own, with its vocabulary."""
        save_archive(path, self.lm.state_dict(), {"vocab": self._tokenizer.vocab, "model": self._config.to_dict()})

    def load_lm(self, path) -> None:
        meta = read_manifest(path).get("meta", {})
        if meta.get("vocab") != self._tokenizer.vocab:
            raise ValueError(f"{path}: language model vocabulary does not match the tokenizer")
        self.lm.load_state_dict(load_archive(path))
        self.lm.requires_grad_(False)


@dataclass
class Geometry:
    """Closed-form parameter arithmetic for a (possibly hierarchical) encoder stack.

    Each stage is a run of ``depth`` identical pre-norm blocks of width ``w``.
    ``patch_merging`` adds a Linear(4w -> 2w, no bias) + LayerNorm(4w) between
    stages, as in a hierarchical vision transformer.
    """

    stage_widths: tuple[int, ...]
    stage_depths: tuple[int, ...]
    patch_dim: int
    d_llm: int
    num_patches: int = 0
    mlp_ratio: int = 4
    patch_norm: bool = False
    patch_merging: bool = False
    final_norm: bool = True
    mapper_bias: bool = False
    lora_r: int = DEFAULT_RANK
    lora_roles: tuple[str, ...] = field(default=("query", "value"))

    @property
    def d_v(self) -> int:
        return self.stage_widths[-1]

    def block_count(self, w: int) -> int:
        r = self.mlp_ratio
        return 4 * (w * w + w) + (r * w * w + r * w) + (r * w * w + w) + 4 * w

    def encoder_count(self) -> int:
        w0 = self.stage_widths[0]
        total = self.patch_dim * w0 + w0
        if self.patch_norm:
            total += 2 * w0
        total += self.num_patches * w0
        for i, (w, depth) in enumerate(zip(self.stage_widths, self.stage_depths)):
            total += depth * self.block_count(w)
            if self.patch_merging and i + 1 < len(self.stage_widths):
                total += 4 * w * 2 * w + 2 * 4 * w
        if self.final_norm:
            total += 2 * self.d_v
        return total

    def mapper_count(self) -> int:
        return self.d_llm * self.d_v + (self.d_llm if self.mapper_bias else 0)

    def lora_count(self) -> int:
        # every targeted projection is square w x w, so r * (d + k) = 2 r w
        return sum(
            depth * len(self.lora_roles) * self.lora_r * 2 * w
            for w, depth in zip(self.stage_widths, self.stage_depths)
        )

    def count(self, mode) -> int:
        from .trainer import AlignmentMode

        mode = AlignmentMode.parse(mode)
        if mode is AlignmentMode.SHALLOW:
            return self.mapper_count()
        if mode is AlignmentMode.DELTA:
            return self.mapper_count() + self.lora_count()
        return self.mapper_count() + self.encoder_count()

    @classmethod
    def full_size(cls) -> "Geometry":
        """Base hierarchical encoder (patch 4, RGB, widths 128..1024) feeding a 4096-wide LM."""
        return cls(
            stage_widths=(128, 256, 512, 1024),
            stage_depths=(2, 2, 18, 2),
            patch_dim=3 * 4 * 4,
            d_llm=4096,
            patch_norm=True,
            patch_merging=True,
        )

    @classmethod
    def from_config(cls, config: ModelConfig, lora_r: int = DEFAULT_RANK) -> "Geometry":
        return cls(
            stage_widths=(config.d_v,),
            stage_depths=(config.encoder_layers,),
            patch_dim=config.in_channels * config.patch_size**2,
            d_llm=config.d_llm,
            num_patches=(config.image_size // config.patch_size) ** 2,
            mlp_ratio=config.mlp_ratio,
            mapper_bias=config.mapper_bias,
            lora_r=lora_r,
        )
