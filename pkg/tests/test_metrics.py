import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xraygen import metrics as M
from xraygen.data import CATEGORIES, generate_corpus
from xraygen.metrics import EvalPair


def pair(c, r):
    return EvalPair.from_text(c, r)


def test_tokenize_drops_punctuation_and_lowercases():
    assert M.tokenize("No Edema . Small, effusion!") == ["no", "edema", "small", "effusion"]


def test_eval_pair_needs_a_reference():
    with pytest.raises(ValueError):
        EvalPair(["a"], [])
    with pytest.raises(ValueError):
        EvalPair(["a"], [[]])


# -- BLEU ----------------------------------------------------------------------------

def test_bleu_identical_is_one():
    p = [pair("the cat sat on the mat", "the cat sat on the mat")]
    assert M.bleu_all(p) == [1.0, 1.0, 1.0, 1.0]


def test_bleu1_clipped_counts():
    # "the" appears at most once in the reference, so 1 of 3 candidate unigrams counts; c=3 > r=2
    assert M.bleu([pair("the the the", "the cat")], 1) == pytest.approx(1 / 3, abs=1e-12)


def test_bleu_disjoint_is_zero():
    assert M.bleu([pair("a b c", "d e f")], 1) == 0.0


def test_bleu_brevity_penalty():
    # all unigrams match; c=2, r=4 -> BP = exp(1 - 4/2)
    assert M.bleu([pair("a b", "a b c d")], 1) == pytest.approx(math.exp(-1.0), abs=1e-12)


def test_bleu_corpus_level_sums_counts():
    # per-pair p1 = 1/1 and 0/3; corpus p1 = 1/4 (not the mean 1/2); c = 4 = r
    p = [pair("a", "a"), pair("x y z", "b c d")]
    assert M.bleu(p, 1) == pytest.approx(0.25, abs=1e-12)


def test_bleu_empty_candidate_contributes_zero():
    assert M.bleu([pair("", "a b")], 1) == 0.0


def test_bleu_rejects_bad_order():
    with pytest.raises(ValueError):
        M.bleu([pair("a", "a")], 5)


@given(st.lists(st.tuples(st.lists(st.sampled_from("abcd"), min_size=4, max_size=8),
                          st.lists(st.sampled_from("abcd"), min_size=4, max_size=8)), min_size=1, max_size=5))
@settings(max_examples=60, deadline=None)
def test_bleu_nonincreasing_in_n_when_bp_is_one(raw):
    # make each candidate at least as long as its reference so BP = 1
    pairs = [EvalPair(c + r, [r]) for c, r in raw]
    scores = M.bleu_all(pairs)
    assert all(scores[i] >= scores[i + 1] - 1e-12 for i in range(3))


# -- ROUGE-L ---------------------------------------------------------------------------

def test_lcs_length():
    assert M.lcs_length("abcd", "acd") == 3
    assert M.lcs_length("", "abc") == 0


def test_rouge_l_lcs_example():
    p, r, b2 = 0.75, 1.0, 1.2**2
    expected = (1 + b2) * r * p / (r + b2 * p)
    assert expected == pytest.approx(0.8798, abs=1e-4)
    assert M.rouge_l([pair("a b c d", "a c d")]) == pytest.approx(expected, abs=1e-12)


def test_rouge_l_identical_and_disjoint():
    assert M.rouge_l([pair("a b c", "a b c")]) == 1.0
    assert M.rouge_l([pair("a b c", "d e")]) == 0.0


def test_rouge_l_takes_best_reference():
    assert M.rouge_l([pair("a b c", ["x y", "a b c"])]) == 1.0


# -- METEOR ------------------------------------------------------------------------------

def test_meteor_identical_four_words():
    assert M.meteor_simplified([pair("a b c d", "a b c d")]) == pytest.approx(1 - 0.5 * (1 / 4) ** 3, abs=1e-12)


def test_meteor_swap_two_chunks():
    assert M.meteor_simplified([pair("b a", "a b")]) == pytest.approx(0.5, abs=1e-12)


def test_meteor_no_matches():
    assert M.meteor_simplified([pair("a b", "c d")]) == 0.0


def test_meteor_stem_stage_matches_inflections():
    exact = M.meteor_simplified([pair("opacities", "opacity")])
    assert exact > 0.0


def test_count_chunks():
    assert M.count_chunks([(0, 0), (1, 1), (2, 2)]) == 1
    assert M.count_chunks([(0, 1), (1, 0)]) == 2


# -- CIDEr ---------------------------------------------------------------------------------

def test_cider_identical_two_disjoint_documents():
    p = [pair("a b c d e", "a b c d e"), pair("v w x y z", "v w x y z")]
    assert M.cider(p) == pytest.approx(10.0, abs=1e-9)


def _cider_bruteforce(pairs, n=4):
    """Independent TF-IDF cosine, written out without shared helpers."""
    N = len(pairs)
    def grams(toks, k):
        out = {}
        for i in range(len(toks) - k + 1):
            g = tuple(toks[i : i + k])
            out[g] = out.get(g, 0) + 1
        return out
    total = 0.0
    for p in pairs:
        sims = []
        for k in range(1, n + 1):
            df = {}
            for q in pairs:
                seen = set()
                for r in q.references:
                    seen |= set(grams(r, k))
                for g in seen:
                    df[g] = df.get(g, 0) + 1
            def vec(toks):
                return {g: c * (math.log(N) - math.log(max(df.get(g, 0), 1))) for g, c in grams(toks, k).items()}
            vc = vec(p.candidate)
            s = 0.0
            for r in p.references:
                vr = vec(r)
                dot = sum(vc[g] * vr.get(g, 0.0) for g in vc)
                nc = math.sqrt(sum(v * v for v in vc.values()))
                nr = math.sqrt(sum(v * v for v in vr.values()))
                s += dot / (nc * nr) if nc and nr else 0.0
            sims.append(s / len(p.references))
        total += 10.0 * sum(sims) / n
    return total / N


def test_cider_matches_bruteforce():
    p = [pair("a b c", "a b d"), pair("b c d a", "c d a"), pair("e a b", "e f")]
    assert M.cider(p) == pytest.approx(_cider_bruteforce(p), abs=1e-12)


def test_cider_no_shared_ngram_is_zero():
    p = [pair("x y", "a b"), pair("a b", "c d")]
    assert M.cider_scores(p)[0] == 0.0


def test_cider_single_document_warns_and_is_zero_safe():
    with pytest.warns(RuntimeWarning):
        s = M.cider([pair("a b", "a b")])
    assert s == 0.0


def test_cider_d_variant_available():
    p = [pair("a b c d e", "a b c d e"), pair("v w x y z", "v w x y z")]
    assert 0.0 < M.cider(p, variant="cider-d") <= 10.0 + 1e-9
    with pytest.raises(ValueError):
        M.cider(p, variant="spice")


# -- order invariance ---------------------------------------------------------------------

def test_all_scores_invariant_to_pair_order():
    rng = np.random.default_rng(0)
    corpus = generate_corpus(12, seed=5)
    cands = [corpus[(i + 1) % 12].report for i in range(12)]
    refs = [s.report for s in corpus]
    base = M.evaluate(cands, refs)
    perm = rng.permutation(12)
    shuffled = M.evaluate([cands[i] for i in perm], [refs[i] for i in perm])
    for k in base:
        assert shuffled[k] == pytest.approx(base[k], abs=1e-12), k


def test_identical_corpus_scores_one():
    refs = [s.report for s in generate_corpus(10, seed=2)]
    res = M.evaluate(refs, refs)
    for k in ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE"):
        assert res[k] == 1.0


# -- labeler and clinical efficacy ----------------------------------------------------------

def _states(labels):
    return {l.category: l.state for l in labels}


def test_label_findings_negation_example():
    s = _states(M.label_findings("no edema . small pleural effusion"))
    assert s["edema"] == "negative"
    assert s["effusion"] == "positive"
    assert s["opacity"] == "absent"


def test_label_findings_empty_and_idempotent():
    assert set(_states(M.label_findings("")).values()) == {"absent"}
    once = _states(M.label_findings("edema ."))
    twice = _states(M.label_findings("edema . edema ."))
    assert once == twice and once["edema"] == "positive"


def test_label_findings_case_insensitive_and_one_label_per_category():
    labels = M.label_findings("There is MILD Edema in the left lung . Without nodule .")
    assert len(labels) == len({l.category for l in labels}) == len(CATEGORIES)
    s = _states(labels)
    assert s["edema"] == "positive" and s["nodule"] == "negative"


def test_label_findings_recovers_corpus_findings():
    for sample in generate_corpus(60, seed=9, negation_prob=0.3):
        pos = M.positive_set(M.label_findings(sample.report))
        assert pos == {f.category for f in sample.findings}


def test_clinical_efficacy_counts_example():
    p, r, f = M.efficacy_from_counts(3, 1, 2)
    assert (p, r) == (0.75, 0.6)
    assert f == pytest.approx(2 * 0.75 * 0.6 / 1.35, abs=1e-12)
    assert f == pytest.approx(0.6667, abs=1e-4)


def test_clinical_efficacy_perfect_and_all_absent():
    truth = [M.label_findings("edema ."), M.label_findings("nodule . opacity .")]
    assert M.clinical_efficacy(truth, truth) == (1.0, 1.0, 1.0)
    empty = [M.label_findings(""), M.label_findings("")]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        p, r, f = M.clinical_efficacy(empty, truth)
    assert r == 0.0 and p == 0.0


def test_clinical_efficacy_warns_on_zero_predicted_positives():
    truth = [M.label_findings("edema .")]
    with pytest.warns(RuntimeWarning):
        M.clinical_efficacy([M.label_findings("")], truth)


def test_table_columns_and_format():
    res = M.evaluate(["a b c", "d e"], ["a b c", "d e"])
    assert tuple(res) == M.COLUMNS
    table = M.format_table(res)
    assert table.splitlines()[0].split() == list(M.COLUMNS)
