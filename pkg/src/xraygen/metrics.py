"""Caption metrics (BLEU, ROUGE-L, METEOR without synonyms, CIDEr) and clinical efficacy.

Aggregation follows the coco-caption conventions: BLEU sums clipped n-gram
counts over the corpus before dividing and uses the closest reference length;
ROUGE-L and METEOR average per-pair scores; CIDEr computes document
frequencies over the reference sets of the evaluated corpus.
"""

from __future__ import annotations

import math
import re
import warnings
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

from .data import CATEGORIES

PUNCTUATION = frozenset({"''", "'", "``", "`", ".", "?", "!", ",", ":", "-", "--", "...", ";"})
_WORD_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def tokenize(text: str) -> list[str]:
    """Lower-case, split off punctuation, then drop punctuation tokens."""
    return [t for t in _WORD_RE.findall(text.lower()) if t not in PUNCTUATION]


@dataclass
class EvalPair:
    candidate: list[str]
    references: list[list[str]]

    def __post_init__(self):
        if not self.references or not any(self.references):
            raise ValueError("an evaluation pair needs at least one nonempty reference")

    @classmethod
    def from_text(cls, candidate: str, references) -> "EvalPair":
        if isinstance(references, str):
            references = [references]
        return cls(tokenize(candidate), [tokenize(r) for r in references])


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# -- BLEU -------------------------------------------------------------------------

def bleu(pairs: Sequence[EvalPair], n: int = 4) -> float:
    """Corpus BLEU-n: geometric mean of clipped precisions 1..n times the brevity penalty."""
    if n not in (1, 2, 3, 4):
        raise ValueError(f"BLEU order must be 1..4, got {n}")
    return bleu_all(pairs, n)[n - 1]


def bleu_all(pairs: Sequence[EvalPair], max_n: int = 4) -> list[float]:
    """[BLEU-1, ..., BLEU-max_n] from one pass over the corpus."""
    matched = [0] * max_n
    total = [0] * max_n
    c_len = r_len = 0
    for p in pairs:
        cand = p.candidate
        c_len += len(cand)
        # closest reference length, ties broken toward the shorter one
        r_len += min((abs(len(r) - len(cand)), len(r)) for r in p.references)[1]
        for k in range(1, max_n + 1):
            counts = _ngrams(cand, k)
            if not counts:
                continue
            max_ref: Counter = Counter()
            for r in p.references:
                for g, c in _ngrams(r, k).items():
                    if c > max_ref[g]:
                        max_ref[g] = c
            matched[k - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            total[k - 1] += sum(counts.values())
    if c_len == 0:
        return [0.0] * max_n
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    scores = []
    log_sum = 0.0
    for k in range(max_n):
        if matched[k] == 0 or total[k] == 0:
            scores.extend([0.0] * (max_n - k))
            break
        log_sum += math.log(matched[k] / total[k])
        scores.append(bp * math.exp(log_sum / (k + 1)))
    return scores


# -- ROUGE-L ----------------------------------------------------------------------

def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l_pair(p: EvalPair, beta: float = 1.2) -> float:
    if not p.candidate:
        return 0.0
    precs, recs = [], []
    for r in p.references:
        lcs = lcs_length(p.candidate, r)
        precs.append(lcs / len(p.candidate))
        recs.append(lcs / len(r) if r else 0.0)
    prec, rec = max(precs), max(recs)
    if prec == 0 or rec == 0:
        return 0.0
    return (1 + beta**2) * prec * rec / (rec + beta**2 * prec)


def rouge_l(pairs: Sequence[EvalPair], beta: float = 1.2) -> float:
    if not pairs:
        return 0.0
    return sum(rouge_l_pair(p, beta) for p in pairs) / len(pairs)


# -- METEOR (exact + stem stages, no synonymy) ------------------------------------

_SUFFIXES = ("ations", "ation", "ings", "ing", "edly", "ed", "ies", "es", "ly", "s")


def stem(word: str) -> str:
    """Crude suffix stripper standing in for a Porter stemmer."""
    for suf in _SUFFIXES:
        if word.endswith(suf) and len(word) - len(suf) >= 3:
            base = word[: -len(suf)]
            return base + "y" if suf == "ies" else base
    return word


def align(candidate: Sequence[str], reference: Sequence[str]) -> list[tuple[int, int]]:
    """Unigram alignment: exact matches first, then stem matches on what is left.

    Each stage matches as many tokens as possible; among equal options a token
    prefers the reference slot right after its predecessor's, which keeps
    contiguous runs together and so keeps the chunk count low.
    """
    used_c: set[int] = set()
    used_r: set[int] = set()
    pairs: list[tuple[int, int]] = []
    for key in (lambda w: w, stem):
        slots: dict[str, list[int]] = {}
        for j, w in enumerate(reference):
            if j not in used_r:
                slots.setdefault(key(w), []).append(j)
        prev = -2
        for i, w in enumerate(candidate):
            if i in used_c:
                prev = dict(pairs).get(i, -2)
                continue
            free = [j for j in slots.get(key(w), []) if j not in used_r]
            if not free:
                continue
            j = prev + 1 if prev + 1 in free else free[0]
            pairs.append((i, j))
            used_c.add(i)
            used_r.add(j)
            prev = j
    return sorted(pairs)


def count_chunks(alignment: Sequence[tuple[int, int]]) -> int:
    if not alignment:
        return 0
    chunks = 1
    for (i0, j0), (i1, j1) in zip(alignment, alignment[1:]):
        if not (i1 == i0 + 1 and j1 == j0 + 1):
            chunks += 1
    return chunks


def meteor_pair(candidate: Sequence[str], reference: Sequence[str], alpha: float = 0.9,
                beta: float = 3.0, gamma: float = 0.5) -> float:
    a = align(candidate, reference)
    m = len(a)
    if m == 0:
        return 0.0
    prec = m / len(candidate)
    rec = m / len(reference)
    fmean = prec * rec / (alpha * prec + (1 - alpha) * rec)
    penalty = gamma * (count_chunks(a) / m) ** beta
    return fmean * (1 - penalty)


def meteor_simplified(pairs: Sequence[EvalPair]) -> float:
    """Mean over pairs of the best-reference score; F_mean = 10PR/(R+9P)."""
    if not pairs:
        return 0.0
    return sum(max(meteor_pair(p.candidate, r) for r in p.references) for p in pairs) / len(pairs)


# -- CIDEr ------------------------------------------------------------------------

def cider(pairs: Sequence[EvalPair], n: int = 4, variant: str = "cider", sigma: float = 6.0) -> float:
    """Corpus CIDEr (or CIDEr-D with ``variant="cider-d"``), scaled by 10."""
    scores = cider_scores(pairs, n, variant, sigma)
    return sum(scores) / len(scores) if scores else 0.0


def cider_scores(pairs: Sequence[EvalPair], n: int = 4, variant: str = "cider", sigma: float = 6.0) -> list[float]:
    if variant not in ("cider", "cider-d"):
        raise ValueError(f"unknown CIDEr variant {variant!r}")
    clipped = variant == "cider-d"
    df: Counter = Counter()
    for p in pairs:
        grams = set()
        for r in p.references:
            for k in range(1, n + 1):
                grams.update(_ngrams(r, k))
        df.update(grams)
    if len(pairs) < 2:
        warnings.warn("CIDEr on a single-document corpus: every IDF weight is zero", RuntimeWarning)
    log_n = math.log(float(len(pairs))) if pairs else 0.0

    def vec(tokens):
        out = []
        for k in range(1, n + 1):
            v = {g: c * (log_n - math.log(max(1.0, df[g]))) for g, c in _ngrams(tokens, k).items()}
            norm = math.sqrt(sum(x * x for x in v.values()))
            out.append((v, norm))
        return out

    scores = []
    for p in pairs:
        hv = vec(p.candidate)
        acc = [0.0] * n
        for r in p.references:
            rv = vec(r)
            delta = len(p.candidate) - len(r)
            for k in range(n):
                (vh, nh), (vr, nr) = hv[k], rv[k]
                if nh == 0 or nr == 0:
                    continue
                if clipped:
                    dot = sum(min(x, vr[g]) * vr[g] for g, x in vh.items() if g in vr)
                else:
                    dot = sum(x * vr[g] for g, x in vh.items() if g in vr)
                sim = dot / (nh * nr)
                if clipped:
                    sim *= math.exp(-(delta**2) / (2 * sigma**2))
                acc[k] += sim
        per_n = [a / len(p.references) for a in acc]
        scores.append(10.0 * sum(per_n) / n)
    return scores


# -- clinical efficacy ------------------------------------------------------------

POSITIVE, NEGATIVE, ABSENT = "positive", "negative", "absent"
NEGATION_CUES = ("no", "without", "free of")
DEFAULT_LEXICON: dict[str, tuple[str, ...]] = {c: (c,) for c in CATEGORIES}


@dataclass(frozen=True)
class FindingLabel:
    category: str
    state: str


def _sentences(text: str) -> list[list[str]]:
    return [_WORD_RE.findall(s) for s in re.split(r"[.;!?\n]", text.lower()) if s.strip()]


def _find(tokens: list[str], phrase: tuple[str, ...]) -> list[int]:
    k = len(phrase)
    return [i for i in range(len(tokens) - k + 1) if tuple(tokens[i : i + k]) == phrase]


def label_findings(report: str, lexicon: Optional[Mapping[str, Sequence[str]]] = None,
                   negation_cues: Sequence[str] = NEGATION_CUES) -> list[FindingLabel]:
    """Rule labeler: a category is positive if mentioned without a preceding negation
    cue in the same sentence, negative if every mention is negated, else absent."""
    lexicon = DEFAULT_LEXICON if lexicon is None else lexicon
    if not lexicon:
        raise ValueError("lexicon must not be empty")
    cues = [tuple(c.lower().split()) for c in negation_cues]
    sentences = _sentences(report)
    labels = []
    for category, terms in lexicon.items():
        seen = positive = False
        for toks in sentences:
            cue_pos = [i for c in cues for i in _find(toks, c)]
            for term in terms:
                for i in _find(toks, tuple(term.lower().split())):
                    seen = True
                    if not any(c < i for c in cue_pos):
                        positive = True
        labels.append(FindingLabel(category, POSITIVE if positive else NEGATIVE if seen else ABSENT))
    return labels


def positive_set(labels: Sequence[FindingLabel]) -> set[str]:
    return {l.category for l in labels if l.state == POSITIVE}


def clinical_efficacy(pred: Sequence[Sequence[FindingLabel]], true: Sequence[Sequence[FindingLabel]]):
    """Micro precision/recall/F1 over (sample, category) cells, positive vs not."""
    if len(pred) != len(true):
        raise ValueError(f"{len(pred)} predicted label sets vs {len(true)} reference sets")
    tp = fp = fn = 0
    for p, t in zip(pred, true):
        if {l.category for l in p} != {l.category for l in t}:
            raise ValueError("predicted and reference labels cover different categories")
        ps, ts = positive_set(p), positive_set(t)
        tp += len(ps & ts)
        fp += len(ps - ts)
        fn += len(ts - ps)
    return efficacy_from_counts(tp, fp, fn)


def efficacy_from_counts(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    if tp + fp == 0:
        warnings.warn("no predicted positives; precision set to 0", RuntimeWarning)
        precision = 0.0
    else:
        precision = tp / (tp + fp)
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


# -- report -----------------------------------------------------------------------

COLUMNS = ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE", "METEOR", "CIDEr", "Precision", "Recall", "F1")


def evaluate(candidates: Sequence[str], references: Sequence, lexicon=None) -> dict[str, float]:
    """All metrics for aligned candidate/reference texts (a reference may be a list)."""
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise ValueError("nothing to evaluate")
    pairs = [EvalPair.from_text(c, r) for c, r in zip(candidates, references)]
    b = bleu_all(pairs, 4)
    first_ref = [r if isinstance(r, str) else r[0] for r in references]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        prf = clinical_efficacy(
            [label_findings(c, lexicon) for c in candidates],
            [label_findings(r, lexicon) for r in first_ref],
        )
    values = b + [rouge_l(pairs), meteor_simplified(pairs), cider(pairs), *prf]
    return dict(zip(COLUMNS, values))


def format_table(results: Mapping[str, float]) -> str:
    head = " ".join(f"{c:>9}" for c in results)
    row = " ".join(f"{v:>9.4f}" for v in results.values())
    return f"{head}\n{row}"
