"""Entity extraction, field-level and SROIE-style F1, rule post-processing, McNemar's test."""
from __future__ import annotations

import json
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from scipy.stats import chi2

from .document import Document, LabelSet, ValidationError
from .tags import TagScheme


@dataclass(frozen=True)
class FieldPrediction:
    label: int
    text: str
    span: tuple  # (start, end), end exclusive
    source: str = "model"

    def __post_init__(self):
        if self.span[1] <= self.span[0] and self.source == "model":
            raise ValueError("entity span must be non-empty")


def extract_entities(labels: Sequence[int], doc: Document, C: int,
                     scheme: str = "raw") -> list[FieldPrediction]:
    """Maximal runs of identically labeled field words become entities.

    Under ``scheme="bio"`` ``labels`` are BIO tags and a B tag starts a new run.
    """
    if len(labels) != len(doc.words):
        raise ValueError("need one label per word")
    return [FieldPrediction(lab, " ".join(w.text for w in doc.words[s:e]), (s, e))
            for lab, s, e in TagScheme(C, scheme).spans(labels)]


def gold_entities(doc: Document, C: int) -> list[FieldPrediction]:
    return extract_entities([w.label for w in doc.words], doc, C)


@dataclass
class LabelScore:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        return _f1(self.tp, self.fp, self.fn)

    def as_dict(self):
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                "tp": self.tp, "fp": self.fp, "fn": self.fn}


def _f1(tp, fp, fn) -> float:
    return 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 0.0


@dataclass
class F1Report:
    micro_f1: float
    macro_f1: float
    per_label: dict = field(default_factory=dict)

    def as_dict(self, labels: Optional[LabelSet] = None):
        name = labels.name if labels else str
        return {"micro_f1": self.micro_f1, "macro_f1": self.macro_f1,
                "per_label": {name(k): v.as_dict() for k, v in sorted(self.per_label.items())}}


def _entity_key(e: FieldPrediction, match: str):
    if match == "span":
        return (e.label, e.span[0], e.span[1])
    if match == "text":
        return (e.label, " ".join(e.text.split()).lower())
    raise ValueError("match must be 'span' or 'text'")


def field_f1(predicted: Mapping[str, Sequence[FieldPrediction]],
             gold: Mapping[str, Sequence[FieldPrediction]], C: int,
             match: str = "span") -> F1Report:
    """Entity-level F1; an entity is correct iff label and exact span (or text) agree.

    Both mappings are keyed by document id. Labels absent from both sides are
    left out of the macro average.
    """
    scores: dict[int, LabelScore] = defaultdict(LabelScore)
    for doc_id in set(predicted) | set(gold):
        pred_keys = defaultdict(int)
        for e in predicted.get(doc_id, []):
            pred_keys[_entity_key(e, match)] += 1
        gold_keys = defaultdict(int)
        for e in gold.get(doc_id, []):
            gold_keys[_entity_key(e, match)] += 1
        for key in set(pred_keys) | set(gold_keys):
            tp = min(pred_keys[key], gold_keys[key])
            s = scores[key[0]]
            s.tp += tp
            s.fp += pred_keys[key] - tp
            s.fn += gold_keys[key] - tp
    scores = {k: v for k, v in scores.items() if k < C and (v.tp + v.fp + v.fn) > 0}
    tp = sum(s.tp for s in scores.values())
    fp = sum(s.fp for s in scores.values())
    fn = sum(s.fn for s in scores.values())
    macro = sum(s.f1 for s in scores.values()) / len(scores) if scores else 0.0
    return F1Report(_f1(tp, fp, fn), macro, dict(scores))


def sroie_macro_f1(predicted: Mapping[str, Mapping[int, str]],
                   gold: Mapping[str, Mapping[int, str]], C: int,
                   normalize=str.strip) -> float:
    """Per document and label, a prediction counts iff its text equals the gold text
    after ``normalize`` (outer-whitespace trim by default); macro over the C labels.

    As in :func:`field_f1`, a label absent from both sides everywhere is left out
    of the average rather than scored 0.
    """
    scores = [LabelScore() for _ in range(C)]
    for doc_id in set(predicted) | set(gold):
        p, g = predicted.get(doc_id, {}), gold.get(doc_id, {})
        for c in range(C):
            pt = normalize(p[c]) if p.get(c) is not None else None
            gt = normalize(g[c]) if g.get(c) is not None else None
            if pt and gt and pt == gt:
                scores[c].tp += 1
            else:
                if pt:
                    scores[c].fp += 1
                if gt:
                    scores[c].fn += 1
    scored = [s for s in scores if s.tp + s.fp + s.fn]
    return sum(s.f1 for s in scored) / len(scored) if scored else 0.0


def fields_as_text(entities: Iterable[FieldPrediction]) -> dict[int, str]:
    """One string per label: the label's entities joined in reading order."""
    out: dict[int, list[str]] = defaultdict(list)
    for e in sorted(entities, key=lambda e: e.span):
        out[e.label].append(e.text)
    return {k: " ".join(v) for k, v in out.items()}


# --------------------------------------------------------------------------
# rule-based post-processing

@dataclass(frozen=True)
class Rule:
    label: int
    stage: str
    pattern: re.Pattern


def load_rules(obj, labels: LabelSet) -> list[Rule]:
    """``obj`` is a path or a parsed list of ``{label, stage, pattern}`` records."""
    if isinstance(obj, (str, Path)):
        obj = json.loads(Path(obj).read_text())
    rules = []
    for i, r in enumerate(obj):
        where = f"rule {i} ({r.get('label')!r}/{r.get('stage')!r})"
        if r.get("stage") not in ("remove", "fallback"):
            raise ValidationError(f"{where}: stage must be 'remove' or 'fallback'")
        try:
            pattern = re.compile(r["pattern"])
        except (KeyError, re.error) as exc:
            raise ValidationError(f"{where}: invalid pattern ({exc})") from None
        rules.append(Rule(labels.id(r["label"]), r["stage"], pattern))
    return rules


def postprocess(entities: Sequence[FieldPrediction], doc: Document,
                rules: Sequence[Rule]) -> list[FieldPrediction]:
    """Apply removal patterns, then fallback extraction for labels left empty.

    Fallback patterns run over the document words; the first matching word
    becomes a ``source="rule"`` entity.
    """
    out = list(entities)
    for rule in (r for r in rules if r.stage == "remove"):
        cleaned = []
        for e in out:
            if e.label == rule.label:
                text = " ".join(rule.pattern.sub(" ", e.text).split())
                if not text:
                    continue
                e = FieldPrediction(e.label, text, e.span, e.source)
            cleaned.append(e)
        out = cleaned
    for rule in (r for r in rules if r.stage == "fallback"):
        if any(e.label == rule.label for e in out):
            continue
        for i, w in enumerate(doc.words):
            m = rule.pattern.search(w.text)
            if m:
                out.append(FieldPrediction(rule.label, m.group(0), (i, i + 1), "rule"))
                break
    return out


# --------------------------------------------------------------------------
# McNemar

@dataclass(frozen=True)
class ContingencyPair:
    b: int
    c: int
    n_both_right: int
    n_both_wrong: int

    @property
    def total(self):
        return self.b + self.c + self.n_both_right + self.n_both_wrong


def mcnemar(correct_a: Sequence[bool], correct_b: Sequence[bool], exact_below: int = 25):
    """Two-sided McNemar p-value and the contingency counts.

    Exact binomial test when ``b + c < exact_below``; otherwise chi-square with
    continuity correction on 1 degree of freedom. ``b + c = 0`` gives p = 1.
    """
    if len(correct_a) != len(correct_b):
        raise ValueError("correctness vectors must be aligned")
    b = sum(1 for x, y in zip(correct_a, correct_b) if x and not y)
    c = sum(1 for x, y in zip(correct_a, correct_b) if y and not x)
    both = sum(1 for x, y in zip(correct_a, correct_b) if x and y)
    table = ContingencyPair(b, c, both, len(correct_a) - b - c - both)
    n = b + c
    if n == 0:
        return 1.0, table
    if n < exact_below:
        tail = sum(math.comb(n, i) for i in range(min(b, c) + 1))
        return min(1.0, 2.0 * tail / 2.0 ** n), table
    stat = (abs(b - c) - 1) ** 2 / n
    return float(chi2.sf(stat, 1)), table
