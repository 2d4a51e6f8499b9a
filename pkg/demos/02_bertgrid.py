"""
From words to a BERTgrid
========================

Words are split into word pieces, packed into 512-token chunks, encoded by a
small transformer and averaged back to one vector per word. Each word vector
is then painted into every stride-S cell whose anchor pixel falls in the
word's box.
"""
import numpy as np
import torch

from vibertgrid.encoding import (EncoderConfig, TextEncoder, Vocabulary, aggregate_word_embeddings,
                                 chunk, encode_tokens, tokenize)
from vibertgrid.grid import build_bertgrid
from vibertgrid.synthetic import SyntheticSpec, generate_synthetic

spec = SyntheticSpec(seed=7)
doc = generate_synthetic(spec, 1)[0]
texts = [w.text for w in doc.words]
print(doc.id, f"{doc.width}x{doc.height}", len(texts), "words:", " ".join(texts[:12]), "...")

# a vocabulary built from the document itself; unseen material becomes [UNK]
vocab = Vocabulary.build(texts, 300, min_count=1)
toks = tokenize(texts, vocab)
chunks = chunk(toks, vocab)
print(f"{len(toks)} word pieces in {len(chunks)} chunk(s), {chunks[0].pad_count} pads in the last")

torch.manual_seed(0)
enc = TextEncoder(EncoderConfig(vocab_size=len(vocab), dim=8, layers=1, heads=2))
with torch.no_grad():
    words = aggregate_word_embeddings(encode_tokens(chunks, enc, vocab, len(toks)),
                                      toks.word_index, len(texts))
    grid = build_bertgrid(words, doc, stride=8)
print("word embeddings", tuple(words.shape), "-> grid", tuple(grid.shape))

# which cells carry text: '#' for field words, '+' for other words, '.' for background
owner = -np.ones(grid.shape[1:], dtype=int)
for i, w in enumerate(doc.words):
    b = w.bbox
    ys = range(int(np.ceil(b.y_min / 8)), int(np.floor(b.y_max / 8)) + 1)
    xs = range(int(np.ceil(b.x_min / 8)), int(np.floor(b.x_max / 8)) + 1)
    for y in ys:
        for x in xs:
            if y < owner.shape[0] and x < owner.shape[1]:
                owner[y, x] = i
C = len(spec.labels)
last = int(np.nonzero((owner >= 0).any(1))[0].max()) + 2  # blank rows below the text are omitted
for row in owner[:last]:
    print("".join("." if o < 0 else ("#" if doc.words[o].label < C else "+") for o in row))
assert np.array_equal(owner >= 0, (grid.abs().sum(0) > 0).numpy())
