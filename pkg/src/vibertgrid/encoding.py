"""Wordpiece tokenization, 512-token chunking and a small trainable text encoder."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

CLS, SEP, PAD, UNK = "[CLS]", "[SEP]", "[PAD]", "[UNK]"
SPECIALS = (CLS, SEP, PAD, UNK)
CONT = "##"
MAX_LEN = 512
PAYLOAD = MAX_LEN - 2


class Vocabulary:
    def __init__(self, pieces: Sequence[str], lowercase: bool = True):
        pieces = list(pieces)
        if pieces[:4] != list(SPECIALS):
            raise ValueError(f"vocabulary must start with {SPECIALS}")
        if len(set(pieces)) != len(pieces):
            raise ValueError("duplicate pieces in vocabulary")
        self.pieces = pieces
        self.lowercase = lowercase
        self.index = {p: i for i, p in enumerate(pieces)}

    def __len__(self):
        return len(self.pieces)

    def __getitem__(self, piece: str) -> int:
        return self.index[piece]

    @property
    def cls_id(self):
        return 0

    @property
    def sep_id(self):
        return 1

    @property
    def pad_id(self):
        return 2

    @property
    def unk_id(self):
        return 3

    @classmethod
    def build(cls, words: Iterable[str], max_pieces: int = 2000, lowercase: bool = True,
              max_piece_len: int = 12, min_count: int = 5) -> "Vocabulary":
        """Induce a piece inventory from corpus words.

        All single characters (word-initial and continuation form) are always kept
        so every seen string is segmentable; the remaining budget goes to the
        most frequent word prefixes and continuation suffixes, scored by
        ``frequency * (length - 1)``. Pieces seen in fewer than ``min_count``
        word occurrences are dropped, so one-off strings such as amounts decompose
        into short reusable pieces instead of being memorized whole.
        """
        freq = Counter(w.lower() if lowercase else w for w in words)
        chars: set[str] = set()
        scores: Counter = Counter()
        support: Counter = Counter()
        for word, n in freq.items():
            for c in word:
                chars.add(c)
            for k in range(2, min(len(word), max_piece_len) + 1):
                scores[word[:k]] += n * (k - 1)
                support[word[:k]] += n
            for k in range(1, len(word) - 1):
                tail = word[k:]
                if 2 <= len(tail) <= max_piece_len:
                    scores[CONT + tail] += n * (len(tail) - 1)
                    support[CONT + tail] += n
        base = sorted(chars) + sorted(CONT + c for c in chars)
        budget = max(0, max_pieces - len(SPECIALS) - len(base))
        ranked = sorted(((p, v) for p, v in scores.items() if support[p] >= min_count), key=lambda kv: (-kv[1], kv[0]))[:budget]
        pieces = list(SPECIALS) + base + sorted(p for p, _ in ranked)
        return cls(pieces, lowercase)

    def save(self, path):
        Path(path).write_text("\n".join(self.pieces) + "\n")

    @classmethod
    def load(cls, path, lowercase: bool = True) -> "Vocabulary":
        return cls(Path(path).read_text().splitlines(), lowercase)

    def wordpiece(self, word: str) -> list[int]:
        """Greedy longest-match segmentation; an unsegmentable word becomes [UNK]."""
        if self.lowercase:
            word = word.lower()
        ids, start = [], 0
        while start < len(word):
            end, found = len(word), None
            while end > start:
                piece = word[start:end] if start == 0 else CONT + word[start:end]
                if piece in self.index:
                    found = self.index[piece]
                    break
                end -= 1
            if found is None:
                return [self.unk_id]
            ids.append(found)
            start = end
        return ids or [self.unk_id]


@dataclass
class TokenSequence:
    token_ids: list[int]
    word_index: list[int]

    def __len__(self):
        return len(self.token_ids)


def tokenize(words: Sequence[str], vocab: Vocabulary) -> TokenSequence:
    token_ids, word_index = [], []
    for j, text in enumerate(words):
        pieces = vocab.wordpiece(text)
        token_ids.extend(pieces)
        word_index.extend([j] * len(pieces))
    return TokenSequence(token_ids, word_index)


@dataclass
class Chunk:
    token_ids: list[int]
    payload_span: tuple[int, int]
    pad_count: int


def chunk(tokens: TokenSequence, vocab: Vocabulary, stride: int = PAYLOAD) -> list[Chunk]:
    """Split into [CLS] payload [SEP] [PAD]* windows of exactly 512 ids.

    ``stride < 510`` gives overlapping windows; an empty sequence still yields
    one fully padded chunk.
    """
    if not 0 < stride <= PAYLOAD:
        raise ValueError(f"stride must be in (0, {PAYLOAD}]")
    M = len(tokens)
    starts = [0]
    while starts[-1] + PAYLOAD < M:
        starts.append(starts[-1] + stride)
    chunks = []
    for s in starts:
        e = min(s + PAYLOAD, M)
        payload = tokens.token_ids[s:e]
        pad = PAYLOAD - len(payload)
        ids = [vocab.cls_id] + payload + [vocab.sep_id] + [vocab.pad_id] * pad
        chunks.append(Chunk(ids, (s, e), pad))
    return chunks


# --------------------------------------------------------------------------
# encoder

@dataclass
class EncoderConfig:
    vocab_size: int = 2000
    dim: int = 64
    layers: int = 2
    heads: int = 4
    ff_mult: int = 4
    max_len: int = MAX_LEN


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, ff_mult: int):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ff1 = nn.Linear(dim, ff_mult * dim)
        self.ff2 = nn.Linear(ff_mult * dim, dim)

    def forward(self, x, key_mask):
        B, L, D = x.shape
        h = self.heads
        q, k, v = self.qkv(self.norm1(x)).view(B, L, 3, h, D // h).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-1, -2)) / (D // h) ** 0.5
        att = att.masked_fill(~key_mask[:, None, None, :], float("-inf")).softmax(-1)
        x = x + self.out((att @ v).transpose(1, 2).reshape(B, L, D))
        return x + self.ff2(torch.nn.functional.gelu(self.ff1(self.norm2(x))))


class TextEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.dim)
        self.position = nn.Embedding(cfg.max_len, cfg.dim)
        self.blocks = nn.ModuleList(Block(cfg.dim, cfg.heads, cfg.ff_mult) for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(cfg.dim) if cfg.layers else nn.Identity()
        nn.init.normal_(self.embed.weight, std=0.1)
        nn.init.normal_(self.position.weight, std=0.02)

    def forward(self, ids: torch.Tensor, pad_id: int) -> torch.Tensor:
        """``ids`` (B, L) -> (B, L, dim)."""
        if ids.max() >= self.cfg.vocab_size or ids.min() < 0:
            raise ValueError("token id outside the vocabulary")
        L = ids.shape[1]
        x = self.embed(ids) + self.position(torch.arange(L, device=ids.device))[None]
        key_mask = ids != pad_id
        for blk in self.blocks:
            x = blk(x, key_mask)
        return self.norm(x)


def encode_tokens(chunks: Sequence[Chunk], encoder: TextEncoder, vocab: Vocabulary,
                  num_tokens: int) -> torch.Tensor:
    """Embeddings for every payload token, shape (M, dim).

    Tokens seen by several overlapping windows get the mean of their window outputs.
    """
    dim = encoder.cfg.dim
    param = encoder.embed.weight
    if num_tokens == 0:
        return param.new_zeros((0, dim))
    for c in chunks:
        if len(c.token_ids) != MAX_LEN:
            raise ValueError("every chunk must hold exactly 512 ids")
    ids = torch.tensor([c.token_ids for c in chunks], dtype=torch.long)
    out = encoder(ids, vocab.pad_id)
    pieces, where = [], []
    for k, c in enumerate(chunks):
        s, e = c.payload_span
        pieces.append(out[k, 1:1 + e - s])
        where.append(torch.arange(s, e))
    flat, where = torch.cat(pieces), torch.cat(where)
    if len(where) == num_tokens and bool((where == torch.arange(num_tokens)).all()):
        return flat
    summed = flat.new_zeros((num_tokens, dim)).index_add(0, where, flat)
    counts = torch.bincount(where, minlength=num_tokens).to(flat.dtype)
    return summed / counts[:, None]


def aggregate_word_embeddings(token_embeddings: torch.Tensor, word_index: Sequence[int],
                              num_words: int) -> torch.Tensor:
    """Mean of each word's token embeddings, shape (N, dim)."""
    dim = token_embeddings.shape[1]
    if num_words == 0:
        return token_embeddings.new_zeros((0, dim))
    idx = torch.as_tensor(np.asarray(word_index, dtype=np.int64))
    summed = token_embeddings.new_zeros((num_words, dim)).index_add(0, idx, token_embeddings)
    counts = torch.bincount(idx, minlength=num_words).to(token_embeddings.dtype)
    if bool((counts == 0).any()):
        raise ValueError("every word needs at least one token")
    return summed / counts[:, None]
