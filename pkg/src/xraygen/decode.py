"""Greedy and beam-search report generation over the frozen LM."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .lm import EOS, assemble_batch

DEFAULT_BEAM_SIZE = 3
DEFAULT_MAX_LEN = 60

# prefixes (all the same length) -> log-probabilities [len(prefixes), V]
StepFn = Callable[[list[list[int]]], np.ndarray]


class DecodeConfigError(ValueError):
    pass


@dataclass
class Beam:
    tokens: list[int] = field(default_factory=list)
    logprob: float = 0.0
    step_logprobs: list[float] = field(default_factory=list)
    finished: bool = False

    def extend(self, token: int, lp: float, eos_id: int) -> "Beam":
        if self.finished:
            raise RuntimeError("finished beams cannot be extended")
        return Beam(self.tokens + [token], self.logprob + lp, self.step_logprobs + [lp], token == eos_id)

    def score(self, length_penalty: float = 1.0) -> float:
        n = max(len(self.tokens), 1)
        return self.logprob / (n**length_penalty)

    def content(self, eos_id: int) -> list[int]:
        return self.tokens[:-1] if self.tokens and self.tokens[-1] == eos_id else list(self.tokens)


def greedy_search(step: StepFn, eos_id: int, max_len: int = DEFAULT_MAX_LEN) -> Beam:
    """Argmax each step; ties go to the lowest token id."""
    if max_len < 1:
        raise DecodeConfigError(f"max_len must be >= 1, got {max_len}")
    beam = Beam()
    while len(beam.tokens) < max_len and not beam.finished:
        lp = step([beam.tokens])[0]
        tok = int(np.argmax(lp))
        beam = beam.extend(tok, float(lp[tok]), eos_id)
    return beam


def beam_search_fn(step: StepFn, eos_id: int, beam_size: int = DEFAULT_BEAM_SIZE,
                   max_len: int = DEFAULT_MAX_LEN, length_penalty: float = 1.0) -> list[Beam]:
    """Width-``beam_size`` search; returns finished hypotheses, best first.

    Each step keeps the ``beam_size`` best one-token expansions of the live
    beams. Expansions ending in ``</s>`` retire as finished hypotheses; beams
    still alive at ``max_len`` are retired as they are. Hypotheses are ranked
    by ``logprob / len ** length_penalty``; ties go to the lexicographically
    smaller token sequence.
    """
    if beam_size < 1:
        raise DecodeConfigError(f"beam_size must be >= 1, got {beam_size}")
    if max_len < 1:
        raise DecodeConfigError(f"max_len must be >= 1, got {max_len}")
    alive = [Beam()]
    finished: list[Beam] = []
    for _ in range(max_len):
        lp = step([b.tokens for b in alive])
        V = lp.shape[1]
        flat = (np.array([b.logprob for b in alive])[:, None] + lp).reshape(-1)
        k = min(beam_size, int(np.isfinite(flat).sum()))
        if k == 0:
            break
        # stable sort on -score keeps (beam, token) order for ties -> lowest id wins
        order = np.argsort(-flat, kind="stable")[:k]
        nxt = []
        for idx in order:
            b, tok = divmod(int(idx), V)
            child = alive[b].extend(tok, float(lp[b, tok]), eos_id)
            (finished if child.finished else nxt).append(child)
        alive = nxt
        if not alive:
            break
    finished.extend(alive)
    finished.sort(key=lambda b: (-b.score(length_penalty), b.tokens))
    return finished


# -- model-backed search -----------------------------------------------------------

def model_step_fn(model, image) -> StepFn:
    """Next-token log-probabilities from ``model`` for one image, specials other than ``</s>`` banned."""
    tok = model.tokenizer
    banned = np.array(sorted(tok.special_ids - {tok.eos_id}))
    with T.no_grad():
        h_v = model.visual_tokens(np.asarray(image)[None])

    def step(prefixes):
        with T.no_grad():
            B = len(prefixes)
            hv = T.Tensor(np.broadcast_to(h_v.data, (B,) + h_v.shape[1:]))
            seq = assemble_batch(hv, model.lm, tok, template=model.template, report_ids=[list(p) for p in prefixes])
            logits = model.lm(seq.embeddings).data[:, -1]
        logits = logits.copy()
        logits[:, banned] = -np.inf
        shifted = logits - logits.max(axis=1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    return step


def greedy(model, image, max_len: int = DEFAULT_MAX_LEN) -> list[int]:
    eos = model.tokenizer.eos_id
    return greedy_search(model_step_fn(model, image), eos, max_len).content(eos)


def beam_search(model, image, beam_size: int = DEFAULT_BEAM_SIZE, max_len: int = DEFAULT_MAX_LEN,
                length_penalty: float = 1.0) -> list[tuple[list[int], float]]:
    """Ranked (token ids without ``</s>``, normalised score) pairs."""
    eos = model.tokenizer.eos_id
    beams = beam_search_fn(model_step_fn(model, image), eos, beam_size, max_len, length_penalty)
    return [(b.content(eos), b.score(length_penalty)) for b in beams]


def generate(model, images, beam_size: int = DEFAULT_BEAM_SIZE, max_len: int = DEFAULT_MAX_LEN,
             length_penalty: float = 1.0) -> list[tuple[str, float]]:
    """Best report text and score per image."""
    out = []
    for img in images:
        ids, score = beam_search(model, img, beam_size, max_len, length_penalty)[0]
        out.append((model.tokenizer.decode(ids), score))
    return out


def write_generations(path, ids: Sequence[str], results: Sequence[tuple[str, float]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sid, (text, score) in zip(ids, results):
            fh.write(json.dumps({"id": sid, "text": text, "score": round(float(score), 12)}, sort_keys=True) + "\n")


def read_generations(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                records.append({"id": rec["id"], "text": rec["text"], "score": rec.get("score")})
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed generation record ({exc})") from exc
    return records


__all__ = ["Beam", "EOS", "beam_search", "beam_search_fn", "generate", "greedy", "greedy_search"]
