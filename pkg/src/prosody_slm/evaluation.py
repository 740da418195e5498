"""Multiple-choice scoring, modality-gap reports and the accent benchmark builder.

Options are scored by length-normalised log-likelihood of their tokens after
``prompt + SEP``; ties go to the lowest option index.  Text mode feeds the
clean transcript to a text LM; speech mode runs the toy ASR, optional token
corruption, prosody extraction, injection and the backbone.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
from torch.nn import functional as F

from .backbone import ToyLM, collate
from .encoder import SpeechEncoder
from .errors import InputError
from .injection import MixedSequence, Projector, build_input
from .synth_data import RenderConfig, render_mel
from .tasks import MCItem
from .vocab import PAD, SEP, Vocab

# -- scoring ------------------------------------------------------------------


@torch.no_grad()
def option_scores(model: ToyLM, prompt: MixedSequence, options: Sequence[Sequence[int]]) -> list[float]:
    """Mean log-probability of each option's tokens given ``prompt + SEP``."""
    base = prompt + MixedSequence.from_tokens([SEP])
    seqs = [base + MixedSequence.from_tokens(o) for o in options]
    ids, mask, embeds = collate(seqs, model.cfg.d_llm)
    logp = F.log_softmax(model.forward_batch(ids, mask, embeds), dim=-1)
    start = len(base)
    scores = []
    for b, o in enumerate(options):
        pos = torch.arange(start - 1, start - 1 + len(o))
        scores.append(float(logp[b, pos, torch.as_tensor(list(o))].mean()))
    return scores


def eval_mc(score_fn: Callable[[int, MCItem], Sequence[float]], items: Sequence[MCItem]) -> float:
    """Accuracy of argmax option (lowest index wins ties)."""
    if not items:
        raise InputError("benchmark is empty")
    hits = 0
    for i, item in enumerate(items):
        scores = np.asarray(score_fn(i, item), dtype=np.float64)
        hits += int(int(np.argmax(scores)) == item.correct)
    return hits / len(items)


def predictions(score_fn, items: Sequence[MCItem]) -> list[int]:
    return [int(np.argmax(np.asarray(score_fn(i, it), dtype=np.float64))) for i, it in enumerate(items)]


class TextScorer:
    def __init__(self, model: ToyLM, vocab: Vocab):
        self.model, self.vocab = model, vocab

    def __call__(self, i: int, item: MCItem) -> list[float]:
        prompt = MixedSequence.from_tokens(self.vocab.llm_tokenize(item.prompt))
        return option_scores(self.model, prompt, item.options)


def corrupt_tokens(tokens: Sequence[int], rate: float, rng: np.random.Generator, low: int, high: int) -> list[int]:
    """Replace each token, with probability ``rate``, by a different word id in ``[low, high)``."""
    out = []
    for t in tokens:
        if rate > 0 and rng.random() < rate:
            r = int(rng.integers(low, high - 1))
            out.append(r + 1 if r >= t else r)
        else:
            out.append(int(t))
    return out


@dataclass
class SpeechInput:
    asr_words: list[int]
    prosody: torch.Tensor


@torch.no_grad()
def speech_inputs(
    encoder: SpeechEncoder,
    mels: np.ndarray,
    vocab: Vocab,
    corruption_rate: float = 0.0,
    seed: int = 0,
    batch_size: int = 256,
) -> list[SpeechInput]:
    """Transcribe, corrupt (seeded per item index) and extract prosody on the transcript.

    An empty transcript is replaced by a single PAD token so prosody is defined.
    """
    encoder.eval()
    out: list[SpeechInput] = []
    for s in range(0, len(mels), batch_size):
        chunk = np.asarray(mels[s : s + batch_size])
        hyps = encoder.transcribe_batch(chunk)
        words = []
        for k, h in enumerate(hyps):
            rng = np.random.default_rng([seed, s + k])
            w = corrupt_tokens(h, corruption_rate, rng, vocab.first_word, vocab.end_word)
            words.append(w or [PAD])
        P = encoder.extract_prosody_batch(chunk, words)
        out.extend(SpeechInput(w, p.clone()) for w, p in zip(words, P))
    return out


class SpeechScorer:
    """Speech-mode scorer; ``inputs[i]`` holds the ASR words and prosody for item ``i``."""

    def __init__(
        self,
        model: ToyLM,
        projector: Projector,
        vocab: Vocab,
        inputs: Sequence[SpeechInput],
        mode: str = "global",
        r: int = 1,
        zero_prosody: bool = False,
    ):
        self.model, self.projector, self.vocab = model, projector, vocab
        self.inputs, self.mode, self.r, self.zero_prosody = inputs, mode, r, zero_prosody

    def prompt(self, i: int) -> MixedSequence:
        x = self.inputs[i]
        with torch.no_grad():
            seq = build_input(self.vocab.llm_tokenize(x.asr_words), x.prosody, self.projector, self.mode, self.r)
        return seq.zero_embeds() if self.zero_prosody else seq

    def __call__(self, i: int, item: MCItem) -> list[float]:
        return option_scores(self.model, self.prompt(i), item.options)


def render_items(items: Sequence[MCItem], cfg: RenderConfig) -> np.ndarray:
    if any(it.spec is None for it in items):
        raise InputError("speech-mode evaluation needs a spec on every item")
    return np.stack([render_mel(it.spec, cfg) for it in items])


# -- modality gap -------------------------------------------------------------


def modality_gap(acc_text: float, acc_speech: float) -> float:
    for v in (acc_text, acc_speech):
        if not 0.0 <= v <= 1.0:
            raise InputError(f"accuracy {v} outside [0, 1]")
    return acc_text - acc_speech


@dataclass
class GapReport:
    model: str
    rows: dict[str, dict] = field(default_factory=dict)

    def add(self, benchmark: str, acc_text: float, acc_speech: float) -> None:
        self.rows[benchmark] = {
            "acc_text": acc_text,
            "acc_speech": acc_speech,
            "gap": modality_gap(acc_text, acc_speech),
        }

    @property
    def averages(self) -> dict:
        if not self.rows:
            return {"acc_text": 0.0, "acc_speech": 0.0, "gap": 0.0}
        keys = ("acc_text", "acc_speech", "gap")
        return {k: float(np.mean([r[k] for r in self.rows.values()])) for k in keys}

    def to_record(self) -> dict:
        return {"model": self.model, "rows": self.rows, "avg": self.averages}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_record(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "GapReport":
        d = json.loads(Path(path).read_text())
        return cls(d["model"], d["rows"])


def render_gap_table(reports: Sequence[GapReport]) -> str:
    """Speech-mode accuracy and gap (percent) per benchmark, plus the average."""
    names = sorted({b for r in reports for b in r.rows})
    head = ["Model"] + [f"{n} {c}" for n in names for c in ("Acc.", "Gap")] + ["Avg. Acc.", "Avg. Gap"]
    lines = [" | ".join(head)]
    for rep in reports:
        cells = [rep.model]
        for n in names:
            row = rep.rows.get(n)
            cells += ["-", "-"] if row is None else [f"{100 * row['acc_speech']:.1f}", f"{100 * row['gap']:.1f}"]
        avg = rep.averages
        cells += [f"{100 * avg['acc_speech']:.1f}", f"{100 * avg['gap']:.1f}"]
        lines.append(" | ".join(cells))
    return "\n".join(lines) + "\n"


# -- accent benchmark ---------------------------------------------------------

ACCENT_LABELS = (
    "United States English",
    "England English",
    "India and South Asia (India, Pakistan, Sri Lanka)",
    "Europe",
)
EUROPE_STRINGS = (
    "German", "French", "Russian", "German English", "Dutch", "Icelandic", "Dutch English",
    "Polish", "German Accent", "French Accent", "Slovak", "Deutsch English",
    "English with a French accent", "German native", "native Dutch speaking", "Swedish", "Finnish",
)
ACCENT_TARGETS = (310, 310, 309, 71)


def default_accent_mapping() -> dict[str, str]:
    mapping = {label: label for label in ACCENT_LABELS[:3]}
    mapping.update({s: "Europe" for s in EUROPE_STRINGS})
    return mapping


class ShortfallError(InputError):
    def __init__(self, label: str, have: int, need: int):
        super().__init__(f"class {label!r} has {have} records, needs {need} (short by {need - have})")
        self.label, self.have, self.need = label, have, need


@dataclass
class AccentBenchmark:
    items: list[MCItem]
    skipped: dict[str, int]

    @property
    def counts(self) -> dict[str, int]:
        c = {label: 0 for label in ACCENT_LABELS}
        for it in self.items:
            c[it.attributes["label"]] += 1
        return c


def build_accent_benchmark(
    records: Sequence[Mapping],
    mapping: Mapping[str, str] | None = None,
    n_total: int = 1000,
    per_class_targets: Sequence[int] = ACCENT_TARGETS,
    seed: int = 0,
) -> AccentBenchmark:
    """Sample a four-way accent MC benchmark from ``{audio, accent}`` records.

    Unknown accent strings are skipped and counted; a class with too few
    records raises :class:`ShortfallError`.
    """
    mapping = default_accent_mapping() if mapping is None else dict(mapping)
    if sum(per_class_targets) != n_total or len(per_class_targets) != len(ACCENT_LABELS):
        raise InputError("per-class targets must list one count per label and sum to n_total")
    pools: dict[str, list] = {label: [] for label in ACCENT_LABELS}
    skipped: dict[str, int] = {}
    for rec in records:
        label = mapping.get(rec["accent"])
        if label is None:
            skipped[rec["accent"]] = skipped.get(rec["accent"], 0) + 1
        else:
            pools[label].append(rec)
    rng = np.random.default_rng(seed)
    options = [[k] for k in range(len(ACCENT_LABELS))]
    items = []
    for k, (label, need) in enumerate(zip(ACCENT_LABELS, per_class_targets)):
        pool = pools[label]
        if len(pool) < need:
            raise ShortfallError(label, len(pool), need)
        for j in sorted(rng.choice(len(pool), need, replace=False)):
            rec = pool[j]
            items.append(MCItem([], options, k, None,
                                {"label": label, "accent": rec["accent"], "audio": rec.get("audio")}))
    return AccentBenchmark(items, skipped)


def save_benchmark(path: str | Path, items: Sequence[MCItem]) -> None:
    with open(path, "w") as fh:
        for it in items:
            fh.write(json.dumps(it.to_record()) + "\n")


def load_benchmark(path: str | Path) -> list[MCItem]:
    with open(path) as fh:
        return [MCItem.from_record(json.loads(line)) for line in fh if line.strip()]
