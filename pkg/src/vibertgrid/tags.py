"""Word label <-> tag conversion.

``raw`` tags are the labels themselves (``0..C-1`` fields, ``C`` other).
``bio`` uses ``B-c = 2c``, ``I-c = 2c + 1`` and ``O = 2C``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

SCHEMES = ("raw", "bio")


@dataclass(frozen=True)
class TagScheme:
    C: int
    scheme: str = "raw"

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"tag scheme must be one of {SCHEMES}")

    @property
    def num_labels(self) -> int:
        return self.C + 1

    @property
    def num_tags(self) -> int:
        return self.C + 1 if self.scheme == "raw" else 2 * self.C + 1

    @property
    def other_tag(self) -> int:
        return self.num_tags - 1

    def encode(self, labels: Sequence[int]) -> list[int]:
        if self.scheme == "raw":
            return list(labels)
        tags, prev = [], None
        for lab in labels:
            if lab == self.C:
                tags.append(2 * self.C)
            else:
                tags.append(2 * lab + (1 if prev == lab else 0))
            prev = lab
        return tags

    def decode(self, tags: Sequence[int]) -> list[int]:
        if self.scheme == "raw":
            return list(tags)
        return [self.C if t == 2 * self.C else t // 2 for t in tags]

    def spans(self, tags: Sequence[int]) -> list[tuple[int, int, int]]:
        """(label, start, end) entity spans; ``end`` exclusive."""
        out = []
        start, cur = None, None
        for i, t in enumerate(list(tags) + [self.other_tag]):
            if self.scheme == "raw":
                lab, begins = t, False
            else:
                lab, begins = (self.C, False) if t == 2 * self.C else (t // 2, t % 2 == 0)
            if cur is not None and (lab != cur or begins):
                out.append((cur, start, i))
                cur = None
            if lab != self.C and cur is None:
                cur, start = lab, i
        return out
