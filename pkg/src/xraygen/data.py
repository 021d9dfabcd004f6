"""Synthetic paired chest-film images and templated reports.

Images are 1 x S x S grayscale in [0, 1]: a noisy torso with two dark lung
fields. Each finding is drawn as a bright ellipse whose vertical band and
lateral/medial offset identify the category, whose lung side(s) give the
location, and whose size and brightness encode severity. Reports are a
deterministic function of the findings, so the labeler in :mod:`metrics`
recovers them exactly.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .archive import load_archive, save_archive

CATEGORIES = (
    "opacity",
    "effusion",
    "edema",
    "cardiomegaly",
    "pneumothorax",
    "consolidation",
    "atelectasis",
    "nodule",
)
LOCATIONS = ("left", "right", "bilateral")
SEVERITIES = ("mild", "moderate", "severe")
# stated as "no {category} ." whenever absent from an abnormal study
ROUTINE_NEGATIONS = ("effusion", "pneumothorax", "edema")
NORMAL_REPORT = "the lungs are clear . no acute findings ."


@dataclass(frozen=True)
class Finding:
    category: str
    location: str
    severity: str

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if self.location not in LOCATIONS:
            raise ValueError(f"unknown location {self.location!r}")
        if self.severity not in SEVERITIES:
            raise ValueError(f"unknown severity {self.severity!r}")

    def sentence(self) -> str:
        return f"there is {self.severity} {self.category} in the {self.location} lung ."

    def to_dict(self) -> dict:
        return {"category": self.category, "location": self.location, "severity": self.severity}


@dataclass
class Sample:
    sample_id: str
    image: np.ndarray
    report: str
    findings: list[Finding] = field(default_factory=list)

    @property
    def is_normal(self) -> bool:
        return not self.findings

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Sample)
            and self.sample_id == other.sample_id
            and self.report == other.report
            and self.findings == other.findings
            and self.image.shape == other.image.shape
            and np.array_equal(self.image, other.image)
        )


def report_vocabulary() -> list[str]:
    """Every word or mark a generated report can contain, in a fixed order."""
    words = ["there", "is", "in", "the", "lung", ".", "no", "lungs", "are", "clear", "acute", "findings"]
    return words + list(SEVERITIES) + list(CATEGORIES) + list(LOCATIONS)


def write_report(findings: Sequence[Finding], extra_negations: Sequence[str] = ()) -> str:
    """Finding sentences in category order, then negations for absent routine categories."""
    if not findings:
        return NORMAL_REPORT
    order = {c: i for i, c in enumerate(CATEGORIES)}
    ordered = sorted(findings, key=lambda f: order[f.category])
    present = {f.category for f in ordered}
    sentences = [f.sentence() for f in ordered]
    negated = [c for c in CATEGORIES if c not in present and (c in ROUTINE_NEGATIONS or c in extra_negations)]
    sentences += [f"no {c} ." for c in negated]
    return " ".join(sentences)


_FINDING_RE = re.compile(r"there is (\w+) (\w+) in the (\w+) lung")


def parse_report(report: str) -> list[Finding]:
    """Inverse of :func:`write_report` for the positive sentences; unknown words are skipped."""
    out = []
    for sev, cat, loc in _FINDING_RE.findall(report.lower()):
        if sev in SEVERITIES and cat in CATEGORIES and loc in LOCATIONS:
            out.append(Finding(cat, loc, sev))
    return out


# -- rendering -------------------------------------------------------------------

def _lung_centres(size: int) -> dict[str, tuple[float, float]]:
    # radiographic convention: the patient's left lung is on the image's right
    return {"right": (0.31 * size, 0.5 * size), "left": (0.69 * size, 0.5 * size)}


def finding_region(finding: Finding, size: int, side: str) -> tuple[float, float, float, float]:
    """(cy, cx, ry, rx) of the ellipse drawn for ``finding`` in lung ``side``."""
    k = CATEGORIES.index(finding.category)
    band, lateral = divmod(k, 2)
    cy_lung, cx_lung = _lung_centres(size)[side][1], _lung_centres(size)[side][0]
    cy = cy_lung + (band - 1.5) * 0.15 * size
    outward = -1.0 if side == "right" else 1.0
    cx = cx_lung + outward * (0.07 * size if lateral else -0.07 * size)
    sev = SEVERITIES.index(finding.severity)
    ry = (0.04 + 0.012 * sev) * size
    rx = (0.05 + 0.012 * sev) * size
    return cy, cx, ry, rx


def _sides(location: str) -> tuple[str, ...]:
    return ("left", "right") if location == "bilateral" else (location,)


def render_image(findings: Sequence[Finding], size: int, rng: np.random.Generator, noise: float = 0.03) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(float) + 0.5
    img = np.full((size, size), 0.08)
    torso = ((yy - 0.55 * size) / (0.48 * size)) ** 2 + ((xx - 0.5 * size) / (0.45 * size)) ** 2 <= 1.0
    img[torso] = 0.45
    for cx, cy in _lung_centres(size).values():
        lung = ((yy - cy) / (0.34 * size)) ** 2 + ((xx - cx) / (0.15 * size)) ** 2 <= 1.0
        img[lung] = 0.18
    heart = ((yy - 0.66 * size) / (0.12 * size)) ** 2 + ((xx - 0.53 * size) / (0.1 * size)) ** 2 <= 1.0
    img[heart] = 0.5
    for f in findings:
        amp = 0.3 + 0.15 * SEVERITIES.index(f.severity)
        for side in _sides(f.location):
            cy, cx, ry, rx = finding_region(f, size, side)
            blob = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
            img[blob] += amp
    img += rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)[None]


def region_mask(finding: Finding, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(float) + 0.5
    mask = np.zeros((size, size), dtype=bool)
    for side in _sides(finding.location):
        cy, cx, ry, rx = finding_region(finding, size, side)
        mask |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return mask


# -- corpus ----------------------------------------------------------------------

def _sample_findings(rng: np.random.Generator) -> list[Finding]:
    k = int(rng.integers(1, 4))
    cats = rng.choice(len(CATEGORIES), size=k, replace=False)
    return [
        Finding(CATEGORIES[c], LOCATIONS[int(rng.integers(3))], SEVERITIES[int(rng.integers(3))])
        for c in sorted(cats)
    ]


def generate_corpus(
    n: int,
    normal_fraction: float = 0.6,
    seed: int = 0,
    image_size: int = 64,
    negation_prob: float = 0.0,
    noise: float = 0.03,
) -> list[Sample]:
    """``round(n * normal_fraction)`` finding-free samples, the rest with 1-3 findings.

    Normal and abnormal slots are shuffled. ``negation_prob`` adds "no X ." for
    absent non-routine categories at random.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not 0.0 <= normal_fraction <= 1.0:
        raise ValueError(f"normal_fraction must lie in [0, 1], got {normal_fraction}")
    rng = np.random.default_rng(seed)
    n_normal = int(round(n * normal_fraction))
    is_normal = np.zeros(n, dtype=bool)
    is_normal[:n_normal] = True
    rng.shuffle(is_normal)
    width = len(str(n - 1))
    samples = []
    for i in range(n):
        srng = np.random.default_rng([seed, i])
        findings = [] if is_normal[i] else _sample_findings(srng)
        extra = [c for c in CATEGORIES if c not in ROUTINE_NEGATIONS and srng.random() < negation_prob]
        image = render_image(findings, image_size, srng, noise)
        samples.append(Sample(f"s{i:0{width}d}", image, write_report(findings, extra), findings))
    return samples


def split(corpus: Sequence[Sample], ratios=(0.7, 0.1, 0.2), seed: int = 0):
    """Seeded shuffle into (train, val, test) partitions; default 7:1:2."""
    ratios = np.asarray(ratios, dtype=float)
    if ratios.shape != (3,) or (ratios < 0).any() or not np.isclose(ratios.sum(), 1.0):
        raise ValueError(f"ratios must be three nonnegative numbers summing to 1, got {ratios.tolist()}")
    n = len(corpus)
    sizes = np.floor(ratios * n).astype(int)
    # hand leftovers to the largest fractional remainders
    rem = ratios * n - sizes
    for i in np.argsort(-rem, kind="stable")[: n - sizes.sum()]:
        sizes[i] += 1
    if (sizes == 0).any():
        raise ValueError(f"split sizes {sizes.tolist()} leave a partition empty for n={n}")
    order = np.random.default_rng(seed).permutation(n)
    a, b = sizes[0], sizes[0] + sizes[1]
    pick = lambda idx: [corpus[i] for i in sorted(idx)]
    return pick(order[:a]), pick(order[a:b]), pick(order[b:])


# -- files -----------------------------------------------------------------------

class CorpusFormatError(ValueError):
    pass


MANIFEST = "manifest.json"
RECORDS = "records.jsonl"
IMAGES = "images"


def save_corpus(corpus: Sequence[Sample], path, meta: Optional[dict] = None) -> Path:
    """Write ``manifest.json``, ``records.jsonl`` and an ``images`` tensor archive under ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = {s.sample_id: s.image for s in corpus}
    save_archive(path / IMAGES, tensors)
    with open(path / RECORDS, "w", encoding="utf-8") as fh:
        for s in corpus:
            rec = {
                "id": s.sample_id,
                "report": s.report,
                "findings": [f.to_dict() for f in s.findings],
                "image": s.sample_id,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    manifest = {"format": "xraygen-corpus/1", "n": len(corpus), "records": RECORDS, "images": IMAGES}
    manifest.update(meta or {})
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_corpus(path) -> list[Sample]:
    path = Path(path)
    if not (path / RECORDS).exists():
        raise FileNotFoundError(f"no corpus at {path}")
    images = load_archive(path / IMAGES)
    samples = []
    with open(path / RECORDS, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                findings = [Finding(**f) for f in rec["findings"]]
                image = images[rec["image"]]
                samples.append(Sample(rec["id"], image, rec["report"], findings))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CorpusFormatError(f"{path / RECORDS}:{lineno}: malformed record ({exc})") from exc
    return samples


def stack_images(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([s.image for s in samples])
