"""
Labeling OCR words from field texts
===================================

Receipts usually come with the field values (company, date, ...) but not
with per-word labels. The matcher finds each field's text in the word
sequence, tolerating case, punctuation and one-character OCR slips, and
reports anything it could not place.
"""
from dataclasses import replace

from vibertgrid.document import FieldAnnotation, MatchPolicy, match_field_annotations
from vibertgrid.synthetic import SyntheticSpec, generate_synthetic

spec = SyntheticSpec(seed=5)
labels = spec.label_set()
doc = generate_synthetic(spec, 1)[0]
gold = [w.label for w in doc.words]

# a noise-free document is labeled exactly
found, report = match_field_annotations(doc, doc.fields, labels.other)
print("exact copy: agreement", sum(a == b for a, b in zip(found, gold)), "/", len(gold))

# simulate OCR: one word of the address loses a character, the total gets a comma
words = list(doc.words)
addr = next(i for i, w in enumerate(words) if w.label == labels.id("address") and len(w.text) > 3)
words[addr] = replace(words[addr], text=words[addr].text[:-1])
noisy = replace(doc, words=words)
fields = [f if labels.name(f.label) != "total" else FieldAnnotation(f.label, f.text + ",")
          for f in doc.fields]
fields.append(FieldAnnotation(labels.id("company"), "NOT PRINTED ON THIS PAGE"))

for policy in (MatchPolicy(), MatchPolicy(max_edit_distance=0)):
    found, report = match_field_annotations(noisy, fields, labels.other, policy)
    print(f"\nmax_edit_distance={policy.max_edit_distance}:"
          f" agreement {sum(a == b for a, b in zip(found, gold))}/{len(gold)}")
    for r in report:
        print(f"  {labels.name(r['field']['label']):8s} {r['status']:9s} "
              f"{r['field']['text'][:30]!r:34s} {r['note']}")
