"""Synthetic labeled documents: words laid out on a page and rendered as dark boxes.

Each generated document carries gold word labels and the matching field texts,
so the annotation matcher can be checked against the generator.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .document import (BoundingBox, Document, FieldAnnotation, LabelSet, Word, atomic_write_text,
                       load_document, save_document)

FILLER = ("payment received for the order of customer please note that this is a computer "
          "generated statement thank you kindly transfer was made by our branch reference "
          "service charge applies to all accounts under terms and conditions any query contact "
          "office hours from monday until friday items sold are not returnable balance account "
          "holder name beneficiary bank details remarks").split()
CUES = {"company": ["from", "by"], "date": ["date", "on", "dated"],
        "address": ["at", "address"], "total": ["total", "amount", "rm"]}
COMPANY_WORDS = ("MAJU JAYA SINAR BINTANG PERDANA MEGAH SETIA EMAS MUTIARA CAHAYA GEMILANG "
                 "INDAH MAKMUR BERJAYA TIARA SURIA").split()
COMPANY_SUFFIX = [["SDN", "BHD"], ["ENTERPRISE"], ["TRADING"], ["HOLDINGS"], ["SDN.", "BHD."]]
STREETS = "MAWAR MELATI KENANGA ORKID CEMPAKA DAHLIA TERATAI ANGGERIK".split()
CITIES = [["KUALA", "LUMPUR"], ["SHAH", "ALAM"], ["PETALING", "JAYA"], ["JOHOR", "BAHRU"],
          ["IPOH"], ["KLANG"]]
MONTHS = "JAN FEB MAR APR MAY JUN JUL AUG SEP OCT NOV DEC".split()


def _company(rng):
    k = int(rng.integers(1, 3))
    names = [str(w) for w in rng.choice(COMPANY_WORDS, size=k, replace=False)]
    return names + list(COMPANY_SUFFIX[int(rng.integers(len(COMPANY_SUFFIX)))])


def _date(rng):
    d, m, y = int(rng.integers(1, 29)), int(rng.integers(1, 13)), int(rng.integers(2015, 2024))
    style = int(rng.integers(3))
    if style == 0:
        return [f"{d:02d}/{m:02d}/{y}"]
    if style == 1:
        return [f"{d:02d}-{m:02d}-{y}"]
    return [f"{d:02d}", MONTHS[m - 1], str(y)]


def _address(rng):
    words = ["NO", str(int(rng.integers(1, 200))), "JALAN", str(rng.choice(STREETS)),
             str(int(rng.integers(1, 20)))]
    return words + list(CITIES[int(rng.integers(len(CITIES)))])


def _amount(rng):
    return [f"{rng.integers(1, 5000)}.{rng.integers(0, 100):02d}"]


def _name(rng):
    return [str(w) for w in rng.choice(COMPANY_WORDS, size=2, replace=False)]


TEMPLATES = {"company": _company, "date": _date, "address": _address, "amount": _amount,
             "name": _name}
DEFAULT_TEMPLATES = {"company": "company", "date": "date", "address": "address", "total": "amount"}


@dataclass
class SyntheticSpec:
    labels: list = field(default_factory=lambda: ["company", "date", "address", "total"])
    templates: dict = field(default_factory=lambda: dict(DEFAULT_TEMPLATES))
    page_width: tuple = (256, 320)
    page_height: tuple = (320, 400)
    words_per_doc: tuple = (30, 50)
    layout: str = "free_text"
    distractor_rate: float = 0.0
    bbox_jitter: float = 0.0
    char_width: int = 5
    line_height: int = 14
    word_height: int = 9
    margin: int = 8
    seed: int = 0

    def __post_init__(self):
        for name in ("page_width", "page_height", "words_per_doc"):
            lo, hi = getattr(self, name)
            if lo > hi or lo <= 0:
                raise ValueError(f"{name} must be a nonempty positive range")
            setattr(self, name, (int(lo), int(hi)))
        if self.layout not in ("free_text", "tabular"):
            raise ValueError("layout must be free_text or tabular")
        for lab in self.labels:
            kind = self.templates.get(lab)
            if kind not in TEMPLATES:
                raise ValueError(f"label {lab!r} needs a template from {sorted(TEMPLATES)}")

    def label_set(self) -> LabelSet:
        return LabelSet(list(self.labels))


class InfeasibleSpec(ValueError):
    pass


def generate_synthetic(spec: SyntheticSpec, count: int, id_prefix: str = "syn") -> list[Document]:
    rng = np.random.default_rng(spec.seed)
    return [_one(spec, rng, f"{id_prefix}{i:05d}") for i in range(count)]


def _field_segments(spec, rng):
    segs = []
    for lab_id, lab in enumerate(spec.labels):
        segs.append((lab_id, TEMPLATES[spec.templates[lab]](rng)))
    return segs


def _distractor(rng):
    return [f"{rng.integers(1, 99)}.{rng.integers(0, 100):02d}"] if rng.random() < 0.5 else \
        [f"{rng.integers(1, 28):02d}{rng.integers(1, 12):02d}"]


def _one(spec: SyntheticSpec, rng, doc_id: str) -> Document:
    C = len(spec.labels)
    W = int(rng.integers(spec.page_width[0], spec.page_width[1] + 1))
    H = int(rng.integers(spec.page_height[0], spec.page_height[1] + 1))
    n_target = int(rng.integers(spec.words_per_doc[0], spec.words_per_doc[1] + 1))
    segs = _field_segments(spec, rng)
    order = rng.permutation(len(segs))
    if spec.layout == "free_text":
        words = _free_text(spec, rng, [segs[i] for i in order], n_target, C, W, H)
    else:
        words = _tabular(spec, rng, [segs[i] for i in order], n_target, C, W, H)
    if spec.bbox_jitter > 0:
        words = [_jitter(w, spec.bbox_jitter, rng, W, H) for w in words]
    image = _render(words, W, H)
    fields = [FieldAnnotation(lab, " ".join(toks)) for lab, toks in segs]
    return Document(doc_id, image, words, fields)


def _filler_words(spec, rng, n):
    out = []
    for _ in range(n):
        if spec.distractor_rate > 0 and rng.random() < spec.distractor_rate:
            out.extend(_distractor(rng))
        else:
            out.append(str(rng.choice(FILLER)))
    return out


def _free_text(spec, rng, segs, n_target, C, W, H):
    field_words = sum(len(t) for _, t in segs)
    n_fill = max(len(segs) + 1, n_target - field_words)
    cuts = np.sort(rng.choice(np.arange(1, n_fill), size=len(segs), replace=False)) \
        if n_fill > len(segs) else np.arange(1, len(segs) + 1)
    fill = _filler_words(spec, rng, n_fill)
    seq, prev = [], 0
    for (lab, toks), cut in zip(segs, cuts):
        seq += [(t, C) for t in fill[prev:cut]]
        name = spec.labels[lab]
        if name in CUES and rng.random() < 0.8:
            seq.append((str(rng.choice(CUES[name])), C))
        seq += [(t, lab) for t in toks]
        prev = cut
    seq += [(t, C) for t in fill[prev:]]
    return _flow(spec, seq, W, H)


def _flow(spec, seq, W, H):
    cw, lh, wh, m = spec.char_width, spec.line_height, spec.word_height, spec.margin
    words, x, y = [], m, m
    for text, lab in seq:
        w = cw * len(text)
        if w > W - 2 * m:
            raise InfeasibleSpec(f"word {text!r} is wider than the page")
        if x + w > W - m:
            x, y = m, y + lh
        if y + wh > H - m:
            raise InfeasibleSpec("words do not fit on the page")
        words.append(Word(text, BoundingBox(x, y, x + w, y + wh), lab))
        x += w + cw
    return words


def _tabular(spec, rng, segs, n_target, C, W, H):
    """Key column on the left, values aligned in a second column."""
    cw, lh, wh, m = spec.char_width, spec.line_height, spec.word_height, spec.margin
    rows = []
    for lab, toks in segs:
        name = spec.labels[lab]
        key = str(rng.choice(CUES.get(name, ["field"])))
        rows.append(([(key, C), (":", C)], [(t, lab) for t in toks]))
    used = sum(len(k) + len(v) for k, v in rows)
    while used < n_target:
        k = _filler_words(spec, rng, 1)
        v = _filler_words(spec, rng, int(rng.integers(1, 4)))
        rows.insert(int(rng.integers(len(rows) + 1)), ([(k[0], C), (":", C)], [(t, C) for t in v]))
        used += 2 + len(v)
    col = m + cw * 12
    words, y = [], m
    for key, value in rows:
        if y + wh > H - m:
            raise InfeasibleSpec("rows do not fit on the page")
        x = m
        for text, lab in key:
            words.append(Word(text, BoundingBox(x, y, x + cw * len(text), y + wh), lab))
            x += cw * (len(text) + 1)
        x = max(x, col)
        for text, lab in value:
            w = cw * len(text)
            if x + w > W - m:
                x, y = col, y + lh
                if y + wh > H - m:
                    raise InfeasibleSpec("rows do not fit on the page")
            if col + w > W - m:
                raise InfeasibleSpec(f"word {text!r} is wider than the value column")
            words.append(Word(text, BoundingBox(x, y, x + w, y + wh), lab))
            x += w + cw
        y += lh
    return words


def _jitter(word, amount, rng, W, H):
    b = word.bbox
    dx, dy = rng.uniform(-amount, amount, size=2)
    x0 = min(max(b.x_min + dx, 0.0), W - (b.x_max - b.x_min))
    y0 = min(max(b.y_min + dy, 0.0), H - (b.y_max - b.y_min))
    return Word(word.text, BoundingBox(x0, y0, x0 + b.x_max - b.x_min, y0 + b.y_max - b.y_min),
                word.label)


def _render(words, W, H):
    img = np.ones((H, W, 1), dtype=np.float32)
    for w in words:
        b = w.bbox
        img[int(b.y_min):int(np.ceil(b.y_max)), int(b.x_min):int(np.ceil(b.x_max))] = 0.15
    return img


# --------------------------------------------------------------------------
# dataset directories: labels.json + one <id>.json/<id>.png pair per document

def save_dataset(docs, labels: LabelSet, out_dir, spec: SyntheticSpec | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "labels.json", json.dumps({"names": labels.names}))
    if spec is not None:
        atomic_write_text(out / "spec.json", json.dumps(asdict(spec)))
    for doc in docs:
        save_document(doc, labels, out / f"{doc.id}.json")


def load_labels(data_dir) -> LabelSet:
    path = Path(data_dir) / "labels.json"
    return LabelSet(json.loads(path.read_text())["names"])


def load_dataset(data_dir, labels: LabelSet | None = None):
    data_dir = Path(data_dir)
    labels = labels or load_labels(data_dir)
    paths = sorted(p for p in data_dir.glob("*.json") if p.name not in ("labels.json", "spec.json"))
    return [load_document(p, labels) for p in paths], labels
