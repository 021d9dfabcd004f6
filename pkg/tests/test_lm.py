import math

import numpy as np
import pytest

from xraygen import tensor as T
from xraygen.lm import (
    DEFAULT_INSTRUCTION, IGNORE_INDEX, PROMPT, REPORT, VISUAL, CausalLM, LMConfig, PromptLengthError,
    PromptSequence, PromptTemplate, Tokenizer, assemble_batch, assemble_prompt, nll_loss, split_words,
)
from xraygen.tensor import Tensor


@pytest.fixture
def tok():
    return Tokenizer.from_texts(["a b c d e x y", "Human: Assistant: , ."])


@pytest.fixture
def lm(rng, tok):
    return CausalLM(LMConfig(len(tok), d_model=8, num_layers=2, num_heads=2, max_len=32), rng)


# six prompt tokens: <s> <Img> | </Img> a b :
SIX = PromptTemplate("<Img>{image}</Img> {instruction} :", "a b")


# -- tokenizer ------------------------------------------------------------------------

def test_tokenizer_round_trip(tok):
    text = "a b . c , x"
    assert tok.decode(tok.encode(text)) == text
    ids = [tok.eos_id, 7, 8, tok.bos_id]
    assert tok.encode(tok.decode(ids)) == ids


def test_specials_are_distinct_from_content(tok):
    assert len(tok.special_ids) == 6
    assert tok.vocab[: len(tok.special_ids)] == ["<pad>", "<s>", "</s>", "<Img>", "</Img>", "<unk>"]
    assert not set(tok.vocab[6:]) & {"<pad>", "<s>", "</s>", "<Img>", "</Img>", "<unk>"}
    assert tok.encode("zebra") == [tok.unk_id]


def test_split_words_keeps_markers():
    assert split_words("Human: <Img></Img>, Go \n") == ["human", ":", "<Img>", "</Img>", ",", "go", "\n"]


def test_default_instruction_verbatim():
    assert DEFAULT_INSTRUCTION == "Generate a comprehensive and detailed diagnosis report for this chest xray image."
    assert PromptTemplate().instruction == DEFAULT_INSTRUCTION


def test_template_validation():
    with pytest.raises(ValueError):
        PromptTemplate("no slot")
    with pytest.raises(ValueError):
        PromptTemplate(instruction="   ")


# -- prompt assembly -------------------------------------------------------------------

def test_layout_counts(lm, tok, rng):
    h = Tensor(rng.normal(size=(4, 8)))
    seq = assemble_prompt(h, lm, tok, "a b c", SIX)
    assert seq.length == 14
    np.testing.assert_array_equal(seq.loss_mask, [False] * 10 + [True] * 4)
    np.testing.assert_array_equal(seq.segments, [PROMPT] * 2 + [VISUAL] * 4 + [PROMPT] * 4 + [REPORT] * 4)
    assert seq.report_start == 10
    assert seq.target_ids[-1] == tok.eos_id
    ser = seq.serialized_targets()
    assert (ser[:10] == IGNORE_INDEX).all() and list(ser[10:]) == tok.encode("a b c") + [tok.eos_id]


def test_visual_slot_is_verbatim(lm, tok, rng):
    h = rng.normal(size=(4, 8))
    seq = assemble_prompt(Tensor(h), lm, tok, "a", SIX)
    np.testing.assert_array_equal(seq.embeddings.data[2:6], h)
    np.testing.assert_array_equal(seq.embeddings.data[0], lm.tok_embed.data[tok.bos_id])


def test_generation_prompt_has_no_targets(lm, tok, rng):
    seq = assemble_prompt(Tensor(rng.normal(size=(4, 8))), lm, tok, None, SIX)
    assert seq.length == 10 and not seq.loss_mask.any()
    assert seq.target_ids[-1] == tok.token_id(":")


def test_batch_right_pads_and_excludes_padding(lm, tok, rng):
    seq = assemble_batch(Tensor(rng.normal(size=(2, 4, 8))), lm, tok, ["a", "a b c"], SIX)
    assert seq.embeddings.shape == (2, 14, 8)
    assert seq.loss_mask[0].sum() == 2 and seq.loss_mask[1].sum() == 4


def test_too_long_reports_measured_length(lm, tok, rng):
    with pytest.raises(PromptLengthError, match="33"):
        assemble_prompt(Tensor(rng.normal(size=(4, 8))), lm, tok, " ".join(["a"] * 22), SIX)


# -- forward ---------------------------------------------------------------------------

def _reference_forward(lm, x):
    """Plain-numpy pre-norm decoder written out head by head."""
    def ln(v, w, b, eps=1e-5):
        mu = v.mean(-1, keepdims=True)
        var = ((v - mu) ** 2).mean(-1, keepdims=True)
        return (v - mu) / np.sqrt(var + eps) * w + b

    def gelu(v):
        return 0.5 * v * (1 + np.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v**3)))

    L, d = x.shape
    x = x + lm.pos_embed.data[:L]
    for blk in lm.layers:
        h = ln(x, blk.norm1.weight.data, blk.norm1.bias.data)
        q = h @ blk.query.weight.data.T + blk.query.bias.data
        k = h @ blk.key.weight.data.T + blk.key.bias.data
        v = h @ blk.value.weight.data.T + blk.value.bias.data
        H = blk._heads
        dh = d // H
        ctx = np.zeros_like(x)
        for head in range(H):
            sl = slice(head * dh, (head + 1) * dh)
            for i in range(L):
                s = np.array([q[i, sl] @ k[j, sl] / math.sqrt(dh) for j in range(i + 1)])
                w = np.exp(s - s.max())
                w /= w.sum()
                ctx[i, sl] = sum(w[j] * v[j, sl] for j in range(i + 1))
        x = x + ctx @ blk.output.weight.data.T + blk.output.bias.data
        h = ln(x, blk.norm2.weight.data, blk.norm2.bias.data)
        m = gelu(h @ blk.mlp_in.weight.data.T + blk.mlp_in.bias.data)
        x = x + m @ blk.mlp_out.weight.data.T + blk.mlp_out.bias.data
    x = ln(x, lm.norm.weight.data, lm.norm.bias.data)
    return x @ lm.tok_embed.data.T


def test_forward_matches_hand_trace(rng, tok):
    lm = CausalLM(LMConfig(len(tok), d_model=4, num_layers=1, num_heads=2, max_len=8), rng)
    for p in lm.parameters():
        p.data = rng.normal(scale=0.5, size=p.shape)
    x = rng.normal(size=(5, 4))
    np.testing.assert_allclose(lm(Tensor(x)).data, _reference_forward(lm, x), rtol=1e-10, atol=1e-12)


def test_causality(lm, rng):
    x = rng.normal(size=(1, 10, 8))
    base = lm(Tensor(x)).data
    for j in (0, 4, 9):
        y = x.copy()
        y[0, j] += 1.0
        out = lm(Tensor(y)).data
        np.testing.assert_array_equal(out[0, :j], base[0, :j])
        assert np.abs(out[0, j] - base[0, j]).max() > 0


def test_identical_rows_identical_logits(lm, rng):
    x = rng.normal(size=(1, 6, 8))
    out = lm(Tensor(np.repeat(x, 3, axis=0))).data
    np.testing.assert_array_equal(out[0], out[1])
    np.testing.assert_array_equal(out[0], out[2])


def test_forward_length_error(lm):
    with pytest.raises(PromptLengthError, match="33"):
        lm(Tensor(np.zeros((33, 8))))


# -- loss --------------------------------------------------------------------------------

def test_zero_head_gives_log_vocab(lm, tok, rng):
    lm.tok_embed.data = np.zeros_like(lm.tok_embed.data)
    seq = assemble_prompt(Tensor(rng.normal(size=(4, 8))), lm, tok, "a b c", SIX)
    assert nll_loss(lm(seq.embeddings), seq).item() == pytest.approx(math.log(len(tok)), abs=1e-12)


def test_hand_set_logits_two_report_tokens():
    V = 3
    logits = np.zeros((4, V))
    logits[1] = [2.0, 0.0, 0.0]   # scores target at position 2
    logits[2] = [0.0, 1.0, 3.0]   # scores target at position 3
    targets = np.array([0, 0, 0, 2])
    mask = np.array([False, False, True, True])
    seq = PromptSequence(Tensor(np.zeros((4, 1))), targets, mask, np.zeros(4), 2)
    want = (-(2 - math.log(math.e**2 + 2)) - (3 - math.log(1 + math.e + math.e**3))) / 2
    assert nll_loss(Tensor(logits), seq).item() == pytest.approx(want, abs=1e-12)


def test_excluded_targets_do_not_matter(lm, tok, rng):
    h = Tensor(rng.normal(size=(2, 4, 8)), requires_grad=True)
    seq = assemble_batch(h, lm, tok, ["a b", "c"], SIX)
    loss1 = nll_loss(lm(seq.embeddings), seq)
    T.backward(loss1)
    g1 = h.grad.copy()
    h.grad = None
    scrambled = seq.target_ids.copy()
    scrambled[~seq.loss_mask] = rng.integers(0, len(tok), size=(~seq.loss_mask).sum())
    seq2 = PromptSequence(seq.embeddings, scrambled, seq.loss_mask, seq.segments, seq.report_start)
    loss2 = nll_loss(lm(seq2.embeddings), seq2)
    T.backward(loss2)
    assert loss1.item() == loss2.item()
    assert g1.tobytes() == h.grad.tobytes()


def test_no_report_positions_is_a_contract_error(lm, tok, rng):
    seq = assemble_prompt(Tensor(rng.normal(size=(4, 8))), lm, tok, None, SIX)
    with pytest.raises(T.EmptyMaskError):
        nll_loss(lm(seq.embeddings), seq)


def test_visual_conditioning_and_frozen_lm(lm, tok, rng):
    lm.requires_grad_(False)
    h = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    seq = assemble_prompt(h, lm, tok, "a b", SIX)
    logits = lm(seq.embeddings)
    T.backward(nll_loss(logits, seq))
    assert all(p.grad is None for p in lm.parameters())
    assert np.abs(h.grad).sum() > 0
    other = assemble_prompt(Tensor(rng.normal(size=(4, 8))), lm, tok, "a b", SIX)
    assert np.abs(lm(other.embeddings).data[10:] - logits.data[10:]).max() > 1e-6
