"""Synthetic spoken tasks: lookup QA and prosody-only emotion recognition.

QA: a fixed random table maps the first word of a question to an answer
word; everything after the first word is filler.  Emotion: every utterance
has the same transcript, and the answer word is fixed per emotion class, so
only the injected prosody can tell the classes apart.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .synth_data import SpecDistribution, UtteranceSpec, gen_utterance, item_seed
from .vocab import Vocab


@dataclass(frozen=True)
class TaskConfig:
    min_len: int = 4
    max_len: int = 8
    n_options: int = 4
    n_emotion: int = 4
    table_seed: int = 77


@dataclass
class MCItem:
    prompt: list[int]  # encoder-level word ids
    options: list[list[int]]
    correct: int
    spec: UtteranceSpec | None = None
    attributes: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "prompt": self.prompt,
            "options": self.options,
            "correct": self.correct,
            "spec": self.spec.to_record() if self.spec else None,
            "attributes": self.attributes,
        }

    @classmethod
    def from_record(cls, d: dict) -> "MCItem":
        spec = UtteranceSpec.from_record(d["spec"]) if d.get("spec") else None
        return cls(d["prompt"], d["options"], d["correct"], spec, d.get("attributes", {}))


class SyntheticTasks:
    def __init__(self, vocab: Vocab, cfg: TaskConfig = TaskConfig()):
        self.vocab, self.cfg = vocab, cfg
        rng = np.random.default_rng(cfg.table_seed)
        words = np.arange(vocab.first_word, vocab.end_word)
        self.emotion_key = int(words[0])
        self.keys = [int(w) for w in words[1:]]
        self.table = {k: int(rng.choice(words)) for k in self.keys}
        self.emotion_transcript = [self.emotion_key, *(int(w) for w in rng.choice(words, 3))]
        self.emotion_answers = [int(w) for w in rng.choice(words, cfg.n_emotion, replace=False)]

    # -- QA -------------------------------------------------------------------

    def question(self, rng: np.random.Generator) -> list[int]:
        n = int(rng.integers(self.cfg.min_len, self.cfg.max_len + 1))
        first = int(rng.choice(self.keys))
        rest = rng.integers(self.vocab.first_word, self.vocab.end_word, size=n - 1)
        return [first, *(int(w) for w in rest)]

    def answer(self, words) -> int:
        """Teacher-world ground truth; unknown first words fall back to the emotion key."""
        return self.table.get(int(words[0]), self.emotion_key) if len(words) else self.emotion_key

    def qa_item(self, rng: np.random.Generator, spec: UtteranceSpec | None = None) -> MCItem:
        q = list(spec.token_ids) if spec is not None else self.question(rng)
        ans = self.answer(q)
        pool = [w for w in range(self.vocab.first_word, self.vocab.end_word) if w != ans]
        distract = [int(w) for w in rng.choice(pool, self.cfg.n_options - 1, replace=False)]
        correct = int(rng.integers(self.cfg.n_options))
        options = distract[:correct] + [ans] + distract[correct:]
        return MCItem(q, [[o] for o in options], correct, spec)

    def qa_specs(self, n: int, dist: SpecDistribution, seed: int) -> list[UtteranceSpec]:
        out = []
        for i in range(n):
            s = item_seed(seed, i)
            spec = gen_utterance(dist, s)
            out.append(replace(spec, token_ids=tuple(self.question(np.random.default_rng(s)))))
        return out

    def qa_benchmark(self, n: int, dist: SpecDistribution, seed: int) -> list[MCItem]:
        rng = np.random.default_rng([seed, 1])
        return [self.qa_item(rng, spec) for spec in self.qa_specs(n, dist, seed)]

    # -- emotion --------------------------------------------------------------

    def emotion_specs(self, n: int, dist: SpecDistribution, seed: int) -> list[UtteranceSpec]:
        return [
            replace(gen_utterance(dist, item_seed(seed, i)), token_ids=tuple(self.emotion_transcript))
            for i in range(n)
        ]

    def emotion_benchmark(self, n: int, dist: SpecDistribution, seed: int) -> list[MCItem]:
        return [
            MCItem(
                list(spec.token_ids),
                [[a] for a in self.emotion_answers],
                spec.emotion,
                spec,
                {"emotion": spec.emotion},
            )
            for spec in self.emotion_specs(n, dist, seed)
        ]
