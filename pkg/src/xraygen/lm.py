"""Word-level tokenizer, prompt assembly, and a small decoder-only causal LM."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .nn import Block, LayerNorm, Module, param, trunc_normal
from .tensor import DimensionError, Tensor

PAD, BOS, EOS, IMG_OPEN, IMG_CLOSE, UNK = "<pad>", "<s>", "</s>", "<Img>", "</Img>", "<unk>"
SPECIALS = (PAD, BOS, EOS, IMG_OPEN, IMG_CLOSE, UNK)
IGNORE_INDEX = -100

DEFAULT_INSTRUCTION = "Generate a comprehensive and detailed diagnosis report for this chest xray image."
DEFAULT_TEMPLATE = "Human: <Img>{image}</Img>, {instruction} \n Assistant:"

_TOKEN_RE = re.compile(r"</?Img>|</?s>|<pad>|<unk>|\n|[A-Za-z0-9]+|[^\sA-Za-z0-9]")


def split_words(text: str) -> list[str]:
    """Lower-cased word/punctuation split; special markers and newlines are kept whole."""
    return [t if t in SPECIALS or t == "\n" else t.lower() for t in _TOKEN_RE.findall(text)]


class Tokenizer:
    def __init__(self, words: Iterable[str]):
        content = [w for w in dict.fromkeys(words) if w not in SPECIALS]
        self.vocab: list[str] = list(SPECIALS) + content
        self._index = {w: i for i, w in enumerate(self.vocab)}

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Tokenizer":
        words: list[str] = []
        for t in texts:
            words.extend(split_words(t))
        return cls(sorted(set(words)))

    def __len__(self) -> int:
        return len(self.vocab)

    def __eq__(self, other) -> bool:
        return isinstance(other, Tokenizer) and self.vocab == other.vocab

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    @property
    def bos_id(self) -> int:
        return self._index[BOS]

    @property
    def eos_id(self) -> int:
        return self._index[EOS]

    @property
    def unk_id(self) -> int:
        return self._index[UNK]

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(self._index[s] for s in SPECIALS)

    def token_id(self, word: str) -> int:
        return self._index.get(word, self.unk_id)

    def encode(self, text: str) -> list[int]:
        return [self.token_id(w) for w in split_words(text)]

    def decode(self, ids: Iterable[int], skip_special: bool = False) -> str:
        words = [self.vocab[i] for i in ids]
        if skip_special:
            words = [w for w in words if w not in SPECIALS]
        return " ".join(words)


@dataclass(frozen=True)
class PromptTemplate:
    """Text scaffold around the visual slot; ``{image}`` and ``{instruction}`` are placeholders."""

    template: str = DEFAULT_TEMPLATE
    instruction: str = DEFAULT_INSTRUCTION
    add_bos: bool = True

    def __post_init__(self):
        if self.template.count("{image}") != 1:
            raise ValueError("template must contain exactly one {image} slot")
        if not self.instruction.strip():
            raise ValueError("instruction must be nonempty")

    def parts(self, tokenizer: Tokenizer) -> tuple[list[int], list[int]]:
        before, after = self.template.split("{image}")
        before = before.replace("{instruction}", self.instruction)
        after = after.replace("{instruction}", self.instruction)
        prefix = ([tokenizer.bos_id] if self.add_bos else []) + tokenizer.encode(before)
        return prefix, tokenizer.encode(after)

    def texts(self) -> list[str]:
        return [self.template.replace("{image}", " ").replace("{instruction}", self.instruction)]


VISUAL, PROMPT, REPORT, PADDING = 0, 1, 2, 3


class PromptLengthError(ValueError):
    pass


@dataclass
class PromptSequence:
    """Embedded LM input with per-position targets, loss mask and segment tags.

    Arrays carry an optional leading batch axis: ``embeddings`` is ``[T, d]`` or
    ``[B, T, d]`` and the integer arrays match its leading shape. Visual and
    prompt positions are excluded from the loss; report positions (including the
    closing ``</s>``) are included. Right padding is excluded.
    """

    embeddings: Tensor
    target_ids: np.ndarray
    loss_mask: np.ndarray
    segments: np.ndarray
    report_start: int

    @property
    def length(self) -> int:
        return self.target_ids.shape[-1]

    def serialized_targets(self) -> np.ndarray:
        """Target ids with excluded positions written as -100."""
        return np.where(self.loss_mask, self.target_ids, IGNORE_INDEX)


@dataclass(frozen=True)
class LMConfig:
    vocab_size: int
    d_model: int = 64
    num_layers: int = 2
    num_heads: int = 4
    max_len: int = 160
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")


class CausalLM(Module):
    """Pre-norm decoder with learned positions and an output head tied to the token table."""

    def __init__(self, config: LMConfig, rng: np.random.Generator):
        self.config = config
        self.tok_embed = param(trunc_normal(rng, (config.vocab_size, config.d_model)))
        self.pos_embed = param(trunc_normal(rng, (config.max_len, config.d_model)))
        for i in range(config.num_layers):
            setattr(self, f"layer{i}", Block(config.d_model, config.num_heads, config.mlp_ratio, rng, causal=True))
        self.norm = LayerNorm(config.d_model)

    @property
    def layers(self) -> list[Block]:
        return [getattr(self, f"layer{i}") for i in range(self.config.num_layers)]

    @property
    def d_model(self) -> int:
        return self.config.d_model

    def embed(self, ids) -> Tensor:
        return T.embedding(self.tok_embed, ids)

    def __call__(self, embeddings: Tensor) -> Tensor:
        """``[B, T, d]`` (or ``[T, d]``) input embeddings -> logits of the same leading shape."""
        squeeze = embeddings.ndim == 2
        if squeeze:
            embeddings = T.reshape(embeddings, (1,) + embeddings.shape)
        L = embeddings.shape[1]
        if L > self.config.max_len:
            raise PromptLengthError(f"sequence length {L} exceeds max_len {self.config.max_len}")
        if embeddings.shape[-1] != self.d_model:
            raise DimensionError(f"LM expects width {self.d_model}, got {embeddings.shape}")
        x = embeddings + self.pos_embed[:L]
        for block in self.layers:
            x = block(x)
        logits = T.matmul(self.norm(x), T.transpose(self.tok_embed))
        if squeeze:
            logits = T.reshape(logits, logits.shape[1:])
        return logits

    forward = __call__


def assemble_prompt(
    h_v: Tensor,
    lm: CausalLM,
    tokenizer: Tokenizer,
    report: Optional[str] = None,
    template: PromptTemplate = PromptTemplate(),
) -> PromptSequence:
    """Splice visual tokens ``[N, d]`` into the prompt for one sample."""
    if h_v.ndim != 2:
        raise DimensionError(f"expected visual tokens [N, d], got {h_v.shape}")
    seq = assemble_batch(T.reshape(h_v, (1,) + h_v.shape), lm, tokenizer, None if report is None else [report], template)
    return PromptSequence(
        T.reshape(seq.embeddings, seq.embeddings.shape[1:]),
        seq.target_ids[0],
        seq.loss_mask[0],
        seq.segments[0],
        seq.report_start,
    )


def assemble_batch(
    h_v: Tensor,
    lm: CausalLM,
    tokenizer: Tokenizer,
    reports: Optional[Sequence[str]] = None,
    template: PromptTemplate = PromptTemplate(),
    report_ids: Optional[Sequence[Sequence[int]]] = None,
) -> PromptSequence:
    """Build ``[B, T, d]`` inputs: prefix text, visual tokens, suffix text, report + ``</s>``.

    Reports are right-padded to a common length; padding is excluded from the loss.
    Without reports the sequence ends at the ``Assistant:`` scaffold.
    """
    B, N, d = h_v.shape
    if d != lm.d_model:
        raise DimensionError(f"visual tokens have width {d}, LM expects {lm.d_model}")
    prefix, suffix = template.parts(tokenizer)
    if report_ids is None:
        if reports is None:
            report_ids = [[] for _ in range(B)]
        else:
            if len(reports) != B:
                raise ValueError(f"{len(reports)} reports for {B} images")
            report_ids = [tokenizer.encode(r) + [tokenizer.eos_id] for r in reports]
    R = max(len(r) for r in report_ids)
    P, S = len(prefix), len(suffix)
    L = P + N + S + R
    if L > lm.config.max_len:
        raise PromptLengthError(f"prompt length {L} exceeds max_len {lm.config.max_len}")

    text_ids = np.full((B, P + S + R), tokenizer.pad_id, dtype=np.int64)
    text_ids[:, :P] = prefix
    text_ids[:, P : P + S] = suffix
    mask = np.zeros((B, L), dtype=bool)
    segments = np.full((B, L), PROMPT, dtype=np.int8)
    segments[:, P : P + N] = VISUAL
    start = P + N + S
    for b, ids in enumerate(report_ids):
        text_ids[b, P + S : P + S + len(ids)] = ids
        mask[b, start : start + len(ids)] = True
        segments[b, start : start + len(ids)] = REPORT
        segments[b, start + len(ids) :] = PADDING

    targets = np.full((B, L), tokenizer.pad_id, dtype=np.int64)
    targets[:, :P] = text_ids[:, :P]
    targets[:, P + N :] = text_ids[:, P:]

    emb = lm.embed(text_ids)
    parts = [emb[:, :P], h_v, emb[:, P:]] if P else [h_v, emb]
    embeddings = T.concat(parts, axis=1)
    return PromptSequence(embeddings, targets, mask, segments, start)


def nll_loss(logits: Tensor, seq: PromptSequence) -> Tensor:
    """Next-token negative log-likelihood averaged over included (report) positions.

    Position t's logits score the token at t + 1, so conditioning on the visual
    and prompt prefix comes from the causal forward pass alone.
    """
    mask = seq.loss_mask
    if not mask.any():
        raise T.EmptyMaskError("nll_loss: no report positions to score")
    if mask[..., 0].any():
        raise ValueError("the first position cannot be a scored target")
    if logits.ndim == 2:
        pred = logits[:-1]
        return T.cross_entropy(pred, seq.target_ids[1:], mask[1:])
    pred = logits[:, :-1]
    return T.cross_entropy(pred, seq.target_ids[:, 1:], mask[:, 1:])
