import json

import numpy as np
import pytest

from xraygen import data as D
from xraygen.archive import ArchiveError
from xraygen.data import CATEGORIES, Finding
from xraygen.lm import split_words
from xraygen.metrics import label_findings, positive_set


def test_corpus_is_deterministic():
    a = D.generate_corpus(30, seed=4, negation_prob=0.2)
    b = D.generate_corpus(30, seed=4, negation_prob=0.2)
    assert a == b
    assert all(x.image.tobytes() == y.image.tobytes() for x, y in zip(a, b))
    assert D.generate_corpus(30, seed=5) != a


def test_normal_count_is_exact():
    corpus = D.generate_corpus(100, normal_fraction=0.7, seed=0)
    assert sum(s.is_normal for s in corpus) == 70
    assert all(1 <= len(s.findings) <= 3 for s in corpus if not s.is_normal)


def test_all_normal():
    corpus = D.generate_corpus(20, normal_fraction=1.0, seed=1)
    assert all(s.report == D.NORMAL_REPORT and not s.findings for s in corpus)
    empty = D.render_image([], 64, np.random.default_rng(0), noise=0.0)
    for s in corpus:
        # noise aside, every image is the finding-free background
        assert np.abs(s.image - empty).max() < 0.2


@pytest.mark.parametrize("n, frac", [(0, 0.5), (10, -0.1), (10, 1.5)])
def test_bad_arguments(n, frac):
    with pytest.raises(ValueError):
        D.generate_corpus(n, frac)


def test_images_shape_and_range():
    for s in D.generate_corpus(10, seed=2):
        assert s.image.shape == (1, 64, 64)
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0


def test_report_templates():
    f = [Finding("nodule", "left", "mild"), Finding("opacity", "bilateral", "severe")]
    text = D.write_report(f)
    assert text == (
        "there is severe opacity in the bilateral lung . there is mild nodule in the left lung . "
        "no effusion . no edema . no pneumothorax ."
    )
    assert D.write_report([]) == "the lungs are clear . no acute findings ."


def test_reports_are_paragraph_shaped_and_in_vocabulary():
    vocab = set(D.report_vocabulary())
    for s in D.generate_corpus(50, seed=3, negation_prob=0.5):
        assert set(split_words(s.report)) <= vocab
        if not s.is_normal:
            assert 3 <= s.report.count(" .") <= 11


def test_parse_report_inverts_writer():
    for s in D.generate_corpus(60, seed=8, negation_prob=0.4):
        assert D.parse_report(s.report) == s.findings


def test_label_consistency():
    for s in D.generate_corpus(80, seed=6, negation_prob=0.5):
        assert positive_set(label_findings(s.report)) == {f.category for f in s.findings}


def test_finding_validation():
    with pytest.raises(ValueError):
        Finding("fracture", "left", "mild")
    with pytest.raises(ValueError):
        Finding("edema", "middle", "mild")


def test_visual_separability():
    """Mean intensity inside a finding's region separates present from absent by > 3 SD."""
    corpus = D.generate_corpus(300, normal_fraction=0.5, seed=11)
    normals = [s for s in corpus if s.is_normal]
    for cat in CATEGORIES:
        f = Finding(cat, "left", "mild")
        mask = D.region_mask(f, 64)
        present = [s.image[0][D.region_mask(g, 64)].mean() for s in corpus for g in s.findings if g.category == cat]
        absent = [s.image[0][mask].mean() for s in normals]
        pooled = np.sqrt((np.var(present) + np.var(absent)) / 2)
        effect = (np.mean(present) - np.mean(absent)) / pooled
        assert effect > 3.0, (cat, effect)


def test_split_sizes_and_partition():
    corpus = D.generate_corpus(100, seed=0)
    tr, va, te = D.split(corpus, seed=3)
    assert (len(tr), len(va), len(te)) == (70, 10, 20)
    ids = [s.sample_id for s in tr + va + te]
    assert sorted(ids) == sorted(s.sample_id for s in corpus)
    assert len(set(ids)) == 100
    assert D.split(corpus, seed=3) == (tr, va, te)


@pytest.mark.parametrize("ratios", [(1, 0, 0), (0.5, 0.5, 0.5), (0.7, 0.3)])
def test_split_rejects_bad_ratios(ratios):
    with pytest.raises(ValueError):
        D.split(D.generate_corpus(10, seed=0), ratios)


def test_save_load_round_trip(tmp_path):
    corpus = D.generate_corpus(15, seed=7, negation_prob=0.3)
    D.save_corpus(corpus, tmp_path / "c")
    back = D.load_corpus(tmp_path / "c")
    assert back == corpus
    assert [s.report for s in back] == [s.report for s in corpus]
    manifest = json.loads((tmp_path / "c" / "manifest.json").read_text())
    assert manifest["n"] == 15


def test_save_is_byte_stable(tmp_path):
    corpus = D.generate_corpus(8, seed=1)
    D.save_corpus(corpus, tmp_path / "a")
    D.save_corpus(corpus, tmp_path / "b")
    for name in ("manifest.json", "records.jsonl", "images.json", "images.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_malformed_record_reports_line(tmp_path):
    D.save_corpus(D.generate_corpus(4, seed=1), tmp_path)
    lines = (tmp_path / "records.jsonl").read_text().splitlines()
    lines[2] = '{"id": "s2", "report": "x"'
    (tmp_path / "records.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(D.CorpusFormatError, match=r"records.jsonl:3"):
        D.load_corpus(tmp_path)


def test_truncated_images_name_the_tensor(tmp_path):
    D.save_corpus(D.generate_corpus(4, seed=1), tmp_path)
    payload = tmp_path / "images.bin"
    payload.write_bytes(payload.read_bytes()[:-100])
    with pytest.raises(ArchiveError, match="s3"):
        D.load_corpus(tmp_path)


def test_missing_corpus(tmp_path):
    with pytest.raises(FileNotFoundError):
        D.load_corpus(tmp_path / "nope")
