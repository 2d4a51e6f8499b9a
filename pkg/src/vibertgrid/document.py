"""Documents, OCR-file ingestion, rescaling, annotation matching and mask rasterization.

A :class:`Document` is the universal input record: a page image, the OCR words
in reading order with pixel bounding boxes, and (optionally) word labels.
Label ids follow one convention everywhere in the package: ``0..C-1`` are the
interesting fields and ``C`` is "other".
"""
from __future__ import annotations

import base64
import io
import json
import math
import os
import re
import string
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from rapidfuzz.distance import Levenshtein

COARSE_FIELD, COARSE_OTHER, COARSE_BACKGROUND = 0, 1, 2
BACKGROUND = -1  # fine-mask sentinel


class ValidationError(ValueError):
    """Input violates a schema or a domain invariant."""


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min <= self.x_max and self.y_min <= self.y_max):
            raise ValidationError(f"inverted bbox {self.as_list()}")
        if min(self.x_min, self.y_min) < 0:
            raise ValidationError(f"negative bbox coordinate {self.as_list()}")

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    def scaled(self, sx: float, sy: float) -> "BoundingBox":
        return BoundingBox(self.x_min * sx, self.y_min * sy, self.x_max * sx, self.y_max * sy)

    def contains(self, x: float, y: float) -> bool:
        # closed intervals on both axes
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max


@dataclass(frozen=True)
class Word:
    text: str
    bbox: BoundingBox
    label: Optional[int] = None  # None = not yet annotated

    def __post_init__(self):
        if not self.text:
            raise ValidationError("word text must be non-empty")


@dataclass(frozen=True)
class FieldAnnotation:
    label: int
    text: str


@dataclass
class LabelSet:
    """The C interesting field names; id ``C`` is the implicit "other" label."""

    names: list[str]
    label_priors: Optional[np.ndarray] = None

    def __post_init__(self):
        self.names = list(self.names)
        if len(set(self.names)) != len(self.names):
            raise ValidationError(f"duplicate label names in {self.names}")
        if "other" in self.names:
            raise ValidationError("'other' is implicit and must not be listed")
        if self.label_priors is not None:
            self.label_priors = np.asarray(self.label_priors, dtype=np.float64)
            if self.label_priors.shape != (self.num_labels,):
                raise ValidationError("label_priors must have C+1 entries")
            if abs(self.label_priors.sum() - 1.0) > 1e-9:
                raise ValidationError("label_priors must sum to 1")

    @property
    def C(self) -> int:
        return len(self.names)

    @property
    def num_labels(self) -> int:
        return len(self.names) + 1

    @property
    def other(self) -> int:
        return len(self.names)

    def name(self, label: int) -> str:
        return self.names[label] if label < self.C else "other"

    def id(self, name: Optional[str]) -> int:
        if name is None or name == "other":
            return self.other
        try:
            return self.names.index(name)
        except ValueError:
            raise ValidationError(f"unknown label {name!r}; known: {self.names}") from None

    def with_priors_from(self, docs: Sequence["Document"]) -> "LabelSet":
        counts = np.zeros(self.num_labels, dtype=np.float64)
        for doc in docs:
            for w in doc.words:
                if w.label is not None:
                    counts[w.label] += 1
        if counts.sum() == 0:
            raise ValidationError("no labeled words to estimate priors from")
        return LabelSet(self.names, counts / counts.sum())


@dataclass
class Document:
    """A page: ``image`` is H x W x channels float32 in [0, 1]."""

    id: str
    image: np.ndarray
    words: list[Word]
    fields: list[FieldAnnotation] = field(default_factory=list)

    def __post_init__(self):
        if self.image.ndim == 2:
            self.image = self.image[:, :, None]
        if self.image.ndim != 3:
            raise ValidationError("image must be H x W x channels")
        H, W = self.image.shape[:2]
        for i, w in enumerate(self.words):
            b = w.bbox
            if b.x_max > W or b.y_max > H:
                raise ValidationError(
                    f"word {i} bbox {b.as_list()} lies outside the {W}x{H} image")

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def labels(self) -> list[Optional[int]]:
        return [w.label for w in self.words]

    def with_labels(self, labels: Sequence[int]) -> "Document":
        if len(labels) != len(self.words):
            raise ValueError("need one label per word")
        words = [replace(w, label=int(lab)) for w, lab in zip(self.words, labels)]
        return replace(self, words=words)


# --------------------------------------------------------------------------
# file IO

def _require(obj: dict, key: str, kind, where: str):
    if key not in obj:
        raise ValidationError(f"{where}: missing field {key!r}")
    value = obj[key]
    if kind is not None and not isinstance(value, kind):
        raise ValidationError(f"{where}: field {key!r} has wrong type {type(value).__name__}")
    return value


def _decode_image(spec, base_dir: Path, width: int, height: int) -> np.ndarray:
    if spec is None:
        return np.ones((height, width, 1), dtype=np.float32)
    if isinstance(spec, str):
        img = Image.open(base_dir / spec)
    elif isinstance(spec, dict) and spec.get("encoding") == "png-base64":
        img = Image.open(io.BytesIO(base64.b64decode(spec["data"])))
    elif isinstance(spec, list):
        arr = np.asarray(spec, dtype=np.float32)
        return arr if arr.ndim == 3 else arr[:, :, None]
    else:
        raise ValidationError("image: expected a path, an inline pixel list, or png-base64")
    arr = np.asarray(img.convert("L" if img.mode in ("L", "1", "I", "F") else "RGB"),
                     dtype=np.float32) / 255.0
    return arr if arr.ndim == 3 else arr[:, :, None]


def parse_document(obj: dict, labels: LabelSet, base_dir: Path = Path(".")) -> Document:
    doc_id = _require(obj, "id", str, "document")
    width = _require(obj, "width", int, doc_id)
    height = _require(obj, "height", int, doc_id)
    raw_words = _require(obj, "words", list, doc_id)
    image = _decode_image(obj.get("image"), base_dir, width, height)
    if image.shape[:2] != (height, width):
        raise ValidationError(
            f"{doc_id}: image is {image.shape[1]}x{image.shape[0]}, header says {width}x{height}")
    words = []
    for i, rw in enumerate(raw_words):
        where = f"{doc_id}: words[{i}]"
        text = _require(rw, "text", str, where)
        bbox = _require(rw, "bbox", list, where)
        if len(bbox) != 4:
            raise ValidationError(f"{where}: bbox must have 4 numbers")
        try:
            box = BoundingBox(*(float(v) for v in bbox))
        except ValidationError as exc:
            raise ValidationError(f"{where}: {exc}") from None
        label = rw.get("label")
        try:
            words.append(Word(text, box, None if label is None else labels.id(label)))
        except ValidationError as exc:
            raise ValidationError(f"{where}: {exc}") from None
    fields = []
    for i, rf in enumerate(obj.get("fields", [])):
        where = f"{doc_id}: fields[{i}]"
        lab = labels.id(_require(rf, "label", str, where))
        if lab == labels.other:
            raise ValidationError(f"{where}: field label cannot be 'other'")
        fields.append(FieldAnnotation(lab, _require(rf, "text", str, where)))
    return Document(doc_id, image, words, fields)


def load_document(path, labels: LabelSet) -> Document:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from None
    return parse_document(obj, labels, path.parent)


def document_to_json(doc: Document, labels: LabelSet, image_ref=None) -> dict:
    """Serialize; ``image_ref`` is a relative path, else pixels are inlined as PNG."""
    if image_ref is None:
        buf = io.BytesIO()
        _to_pil(doc.image).save(buf, format="PNG")
        image_ref = {"encoding": "png-base64", "data": base64.b64encode(buf.getvalue()).decode()}
    return {
        "id": doc.id,
        "image": image_ref,
        "width": doc.width,
        "height": doc.height,
        "words": [{"text": w.text, "bbox": w.bbox.as_list(),
                   "label": None if w.label is None else labels.name(w.label)}
                  for w in doc.words],
        "fields": [{"label": labels.name(f.label), "text": f.text} for f in doc.fields],
    }


def _to_pil(image: np.ndarray) -> Image.Image:
    arr = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    return Image.fromarray(arr[:, :, 0] if arr.shape[2] == 1 else arr)


def atomic_write_text(path, text: str):
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_text(text)
    os.replace(tmp, path)


def save_document(doc: Document, labels: LabelSet, path, write_image: bool = True):
    """Write ``<path>`` (JSON) and, by default, a sibling PNG holding the pixels."""
    path = Path(path)
    image_ref = None
    if write_image:
        png = path.with_suffix(".png")
        tmp = png.with_name(f".{png.name}.tmp{os.getpid()}")
        _to_pil(doc.image).save(tmp, format="PNG")
        os.replace(tmp, png)
        image_ref = png.name
    atomic_write_text(path, json.dumps(document_to_json(doc, labels, image_ref)))


# --------------------------------------------------------------------------
# geometry

def rescale_document(doc: Document, shorter_side: int, max_longer_side: int) -> Document:
    """Resize so the shorter side is ``shorter_side`` unless that pushes the
    longer side past ``max_longer_side``, in which case the longer side is capped."""
    if shorter_side <= 0 or max_longer_side < shorter_side:
        raise ValueError("need 0 < shorter_side <= max_longer_side")
    H, W = doc.height, doc.width
    if H == 0 or W == 0:
        raise ValidationError(f"{doc.id}: zero-area image")
    scale = shorter_side / min(H, W)
    if max(H, W) * scale > max_longer_side:
        scale = max_longer_side / max(H, W)
    new_h, new_w = max(1, round(H * scale)), max(1, round(W * scale))
    if (new_h, new_w) == (H, W):
        return doc
    img = torch.from_numpy(np.ascontiguousarray(doc.image.transpose(2, 0, 1)))[None]
    img = F.interpolate(img, size=(new_h, new_w), mode="bilinear", align_corners=False)
    image = img[0].numpy().transpose(1, 2, 0).copy()
    sx, sy = new_w / W, new_h / H
    words = [replace(w, bbox=_clip_box(w.bbox.scaled(sx, sy), new_w, new_h)) for w in doc.words]
    return replace(doc, image=image, words=words)


def _clip_box(b: BoundingBox, W: int, H: int) -> BoundingBox:
    # guards float round-off at the page edge only
    return BoundingBox(min(b.x_min, W), min(b.y_min, H), min(b.x_max, W), min(b.y_max, H))


def inclusion_ranges(bbox: BoundingBox, stride: int, grid_w: int, grid_h: int):
    """Boolean column/row selectors of cells whose anchor (x*stride, y*stride) lies in ``bbox``."""
    xs = np.arange(grid_w) * stride
    ys = np.arange(grid_h) * stride
    return ((xs >= bbox.x_min) & (xs <= bbox.x_max),
            (ys >= bbox.y_min) & (ys <= bbox.y_max))


def grid_shape(height: int, width: int, stride: int) -> tuple[int, int]:
    return math.ceil(height / stride), math.ceil(width / stride)


def owner_map(doc: Document, stride: int) -> np.ndarray:
    """Index of the word owning each stride cell (last writer wins), -1 where empty."""
    gh, gw = grid_shape(doc.height, doc.width, stride)
    owner = np.full((gh, gw), -1, dtype=np.int64)
    for i, w in enumerate(doc.words):
        cols, rows = inclusion_ranges(w.bbox, stride, gw, gh)
        owner[np.ix_(rows, cols)] = i
    return owner


@dataclass
class PixelMasks:
    coarse_mask: np.ndarray  # {0 field, 1 other, 2 background}
    fine_mask: np.ndarray    # {0..C}, BACKGROUND elsewhere


def rasterize_masks(doc: Document, stride: int, num_fields: int) -> PixelMasks:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if any(w.label is None for w in doc.words):
        raise ValidationError(f"{doc.id}: all words must be labeled before rasterization")
    owner = owner_map(doc, stride)
    labels = np.array([w.label for w in doc.words] + [BACKGROUND], dtype=np.int64)
    fine = labels[owner]  # owner -1 picks the trailing BACKGROUND entry
    coarse = np.full(fine.shape, COARSE_BACKGROUND, dtype=np.int64)
    coarse[(fine >= 0) & (fine < num_fields)] = COARSE_FIELD
    coarse[fine == num_fields] = COARSE_OTHER
    return PixelMasks(coarse, fine)


# --------------------------------------------------------------------------
# annotation matching

_PUNCT = string.punctuation


@dataclass
class MatchPolicy:
    lowercase: bool = True
    strip_punctuation: bool = True
    collapse_whitespace: bool = True
    max_edit_distance: int = 1  # 0 disables the fuzzy fallback


def normalize_token(text: str, policy: MatchPolicy) -> str:
    if policy.lowercase:
        text = text.lower()
    text = text.strip()
    if policy.strip_punctuation:
        text = text.strip(_PUNCT)
    return text


def _field_tokens(text: str, policy: MatchPolicy) -> list[str]:
    parts = text.split() if policy.collapse_whitespace else text.split(" ")
    return [t for t in (normalize_token(p, policy) for p in parts) if t]


def match_field_annotations(doc: Document, fields: Sequence[FieldAnnotation], other: int,
                            policy: Optional[MatchPolicy] = None):
    """Label words by locating each field's text in the word sequence.

    Returns ``(labels, report)``; report entries are dicts with keys
    ``field``, ``status`` ("matched" | "fuzzy" | "unmatched"),
    ``matched_word_indices`` and ``note``.
    """
    policy = policy or MatchPolicy()
    norm = [normalize_token(w.text, policy) for w in doc.words]
    joiner = "" if policy.collapse_whitespace else " "
    labels = [other] * len(doc.words)
    taken = [False] * len(doc.words)
    report = []
    for f in fields:
        if not f.text.strip():
            raise ValidationError(f"{doc.id}: field with label {f.label} has empty text")
        tokens = _field_tokens(f.text, policy)
        target = joiner.join(tokens)
        span = _exact_span(norm, taken, target, joiner) if target else None
        status, note = "matched", ""
        if span is None and policy.max_edit_distance > 0 and tokens:
            span = _fuzzy_span(norm, taken, tokens, policy.max_edit_distance)
            status, note = "fuzzy", f"per-word edit distance <= {policy.max_edit_distance}"
        if span is None:
            status = "unmatched"
            note = _closest_candidate(doc, norm, tokens)
            indices = []
        else:
            indices = list(range(*span))
            for i in indices:
                labels[i] = f.label
                taken[i] = True
        report.append({"field": {"label": f.label, "text": f.text}, "status": status,
                       "matched_word_indices": indices, "note": note})
    return labels, report


def _exact_span(norm, taken, target, joiner):
    n = len(norm)
    for start in range(n):
        if taken[start] or not norm[start] or not target.startswith(norm[start]):
            continue
        acc = ""
        for end in range(start, n):
            if taken[end]:
                break
            if norm[end]:
                acc = norm[end] if not acc else acc + joiner + norm[end]
            if acc == target:
                return start, end + 1
            if len(acc) >= len(target) or not target.startswith(acc):
                break
    return None


def _fuzzy_span(norm, taken, tokens, max_dist):
    content = [i for i, t in enumerate(norm) if t]
    k = len(tokens)
    for s in range(len(content) - k + 1):
        idx = content[s:s + k]
        if any(taken[i] for i in range(idx[0], idx[-1] + 1)):
            continue
        if all(Levenshtein.distance(norm[i], t) <= max_dist for i, t in zip(idx, tokens)):
            return idx[0], idx[-1] + 1
    return None


def _closest_candidate(doc, norm, tokens) -> str:
    content = [i for i, t in enumerate(norm) if t]
    k = len(tokens)
    if not tokens or len(content) < k:
        return "no candidate"
    best = None
    for s in range(len(content) - k + 1):
        idx = content[s:s + k]
        cost = sum(Levenshtein.distance(norm[i], t) for i, t in zip(idx, tokens))
        if best is None or cost < best[0]:
            best = (cost, idx)
    cost, idx = best
    text = " ".join(doc.words[i].text for i in range(idx[0], idx[-1] + 1))
    return f"closest candidate words {idx[0]}..{idx[-1]} {text!r} (total edit distance {cost})"


_WS = re.compile(r"\s+")


def document_text(doc: Document) -> str:
    return _WS.sub(" ", " ".join(w.text for w in doc.words)).strip()
