"""Shared token vocabulary and the pair-merging LLM re-segmentation.

Layout of the desk vocabulary (size 64 by default)::

    0 PAD | 1 BOS | 2 EOS | 3 SEP | 4 .. 4+n_words-1 words | remaining ids: merge tokens

The speech encoder only ever emits word ids.  The backbone sees text after a
second segmentation pass that greedily merges a fixed table of adjacent word
pairs into single merge tokens, so the backbone sequence length T generally
differs from the encoder length N.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

PAD, BOS, EOS, SEP = 0, 1, 2, 3
N_SPECIAL = 4


@dataclass(frozen=True)
class Vocab:
    size: int = 64
    n_merges: int = 16
    merge_seed: int = 1234
    merges: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n_words < 2:
            raise ValueError("vocabulary too small for the requested merge table")
        rng = np.random.default_rng(self.merge_seed)
        table: dict[tuple[int, int], int] = {}
        while len(table) < self.n_merges:
            a, b = (int(x) for x in rng.integers(self.first_word, self.end_word, size=2))
            if (a, b) not in table:
                table[(a, b)] = self.end_word + len(table)
        object.__setattr__(self, "merges", table)

    @property
    def first_word(self) -> int:
        return N_SPECIAL

    @property
    def end_word(self) -> int:
        return self.size - self.n_merges

    @property
    def n_words(self) -> int:
        return self.size - self.n_merges - N_SPECIAL

    def llm_tokenize(self, words: Sequence[int]) -> list[int]:
        """Greedy left-to-right pair merge."""
        out: list[int] = []
        i = 0
        words = list(words)
        while i < len(words):
            if i + 1 < len(words) and (words[i], words[i + 1]) in self.merges:
                out.append(self.merges[(words[i], words[i + 1])])
                i += 2
            else:
                out.append(words[i])
                i += 1
        return out

    def unmerge(self, tokens: Sequence[int]) -> list[int]:
        inverse = {v: k for k, v in self.merges.items()}
        out: list[int] = []
        for t in tokens:
            out.extend(inverse.get(t, (t,)))
        return out
