"""Language pretraining for the toy LM before it is frozen.

A large pretrained LLM already knows how to verbalise vectors that live in
its word-embedding space. A randomly initialised toy decoder does not, so a
frozen random LM gives the alignment modes nothing to align to. This stage
stands in for that pretraining. The LM learns to write reports while the
visual slot holds *concept vectors*. Each finding contributes one slot equal
to the sum of its severity, category and location word embeddings, placed at
a random slot index. Every other slot is Gaussian noise at the embedding
scale. The encoder and mapper are never involved, so the alignment problem
(pixels -> that embedding space) is left to the three training modes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .data import parse_report
from .lm import assemble_batch, nll_loss
from .model import ReportModel, build_tokenizer
from .trainer import AdamW, clip_grad_norm

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    steps: int = 3000
    lr: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    clip_norm: Optional[float] = 1.0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


def concept_slots(findings: Sequence[Sequence], embed: np.ndarray, tokenizer, num_slots: int,
                  rng: np.random.Generator) -> np.ndarray:
    """``[B, num_slots, d]`` visual-slot stand-ins carrying each report's findings."""
    d = embed.shape[1]
    slots = rng.normal(0.0, float(embed.std()), size=(len(findings), num_slots, d))
    for b, fs in enumerate(findings):
        if len(fs) > num_slots:
            raise ValueError(f"{len(fs)} findings do not fit in {num_slots} slots")
        where = rng.choice(num_slots, size=len(fs), replace=False)
        for pos, f in zip(where, fs):
            slots[b, pos] = sum(embed[tokenizer.token_id(w)] for w in (f.severity, f.category, f.location))
    return slots


def pretrain_lm(model, reports: Sequence[str], config: PretrainConfig = PretrainConfig()) -> list[float]:
    """Train ``model.lm`` in place on report texts; the LM is left frozen. Returns per-step losses."""
    if len(reports) == 0:
        raise ValueError("empty pretraining set")
    lm = model.lm
    params = list(lm.named_parameters())
    for _, p in params:
        p.requires_grad = True
    opt = AdamW(params, lr=config.lr)
    rng = np.random.default_rng([config.seed, 0x1A])
    num_slots = model.config.encoder_config().num_patches
    bs = min(config.batch_size, len(reports))
    findings = [parse_report(r) for r in reports]
    report_ids = model.encode_reports(reports)
    losses = []
    try:
        for step in range(config.steps):
            idx = rng.choice(len(reports), bs, replace=False)
            slots = concept_slots([findings[i] for i in idx], lm.tok_embed.data, model.tokenizer, num_slots, rng)
            ids = [report_ids[i] for i in idx]
            for _, p in params:
                p.grad = None
            seq = assemble_batch(T.Tensor(slots), lm, model.tokenizer, template=model.template, report_ids=ids)
            loss = nll_loss(lm(seq.embeddings), seq)
            T.backward(loss)
            if config.clip_norm:
                clip_grad_norm(params, config.clip_norm)
            opt.step()
            losses.append(loss.item())
            if step % 500 == 0:
                log.info("pretrain step %d loss %.4f", step, losses[-1])
    finally:
        for _, p in params:
            p.requires_grad = False
            p.grad = None
    return losses


def pretrained_model(config, reports: Sequence[str], pretrain: PretrainConfig = PretrainConfig(), seed: int = 0):
    """A fresh :class:`~xraygen.model.ReportModel` whose LM has been pretrained on ``reports`` and frozen."""
    model = ReportModel(config, build_tokenizer(config), seed=seed)
    pretrain_lm(model, reports, pretrain)
    return model
