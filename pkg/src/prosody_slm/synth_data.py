"""Deterministic synthetic utterances with recoverable prosodic attributes.

Rendering scheme (all tables are fixed functions of ``RenderConfig.table_seed``):

* every token owns a base column pattern over ``F`` mel bins with a single
  dominant bin (value 1.0) on a low background (values in [0.05, 0.3]);
* the token occupies ``span`` consecutive frames, tokens are laid out left to
  right starting at frame 0, frames after the last token are padding (0.0);
* ``pitch_level`` rolls the column pattern down by ``pitch_offset`` bins per level;
* ``energy_level`` multiplies magnitudes by ``energy_factor ** energy_level``;
* ``speaker_id`` multiplies row ``f`` by a smooth per-speaker filter with
  values in [1 - speaker_depth, 1 + speaker_depth];
* ``emotion`` multiplies entry ``(f, t)`` by ``1 + depth * sign_e[f] * (-1)**t``,
  a frame-alternating envelope whose per-bin sign pattern is fixed per class;
* i.i.d. Gaussian noise of std ``noise_sigma`` seeded from ``spec.seed`` is added
  to every entry, padding included.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DegenerateBinsError, InputError
from .tensorio import load_matrix, save_matrix

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class UtteranceSpec:
    token_ids: tuple[int, ...]
    speaker_id: int
    pitch_level: int
    energy_level: int
    emotion: int
    seed: int

    def to_record(self) -> dict:
        d = asdict(self)
        d["token_ids"] = list(self.token_ids)
        return d

    @classmethod
    def from_record(cls, d: dict) -> "UtteranceSpec":
        return cls(
            token_ids=tuple(int(t) for t in d["token_ids"]),
            speaker_id=int(d["speaker_id"]),
            pitch_level=int(d["pitch_level"]),
            energy_level=int(d["energy_level"]),
            emotion=int(d["emotion"]),
            seed=int(d["seed"]),
        )


@dataclass(frozen=True)
class SpecDistribution:
    """Attribute cardinalities and token/length ranges for ``gen_utterance``.

    Tokens are drawn uniformly from ``[token_low, vocab_size)``.  With
    probability ``phrase_prob`` a position starts one of ``phrases`` (a fixed
    word pair) instead, which is how merge-able bigrams get into the corpus.
    """

    vocab_size: int = 64
    token_low: int = 0
    min_len: int = 4
    max_len: int = 8
    n_speakers: int = 4
    n_pitch: int = 3
    n_energy: int = 3
    n_emotion: int = 4
    phrases: tuple[tuple[int, int], ...] = ()
    phrase_prob: float = 0.0
    weights: dict | None = None  # attribute name -> per-class weights

    def validate(self) -> None:
        for name in ("n_speakers", "n_pitch", "n_energy", "n_emotion"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not (0 <= self.token_low < self.vocab_size):
            raise ConfigError("token range [token_low, vocab_size) is empty")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ConfigError(f"empty length range {self.min_len}..{self.max_len}")

    def cardinality(self, attr: str) -> int:
        return {
            "speaker_id": self.n_speakers,
            "pitch_level": self.n_pitch,
            "energy_level": self.n_energy,
            "emotion": self.n_emotion,
        }[attr]


@dataclass(frozen=True)
class RenderConfig:
    n_mels: int = 24
    n_frames: int = 40
    span: int = 4
    pitch_offset: int = 2
    energy_factor: float = 1.5
    speaker_depth: float = 0.5
    emotion_depth: float = 0.5
    noise_sigma: float = 0.02
    table_seed: int = 2024
    vocab_size: int = 64
    n_pitch: int = 3
    n_speakers: int = 4
    n_emotion: int = 4

    def validate(self) -> None:
        if self.n_mels < 4 or self.n_frames < 4:
            raise ConfigError("n_mels and n_frames must both be >= 4")
        if self.span < 1:
            raise ConfigError("span must be >= 1")
        if (self.n_pitch - 1) * self.pitch_offset >= self.n_mels:
            raise ConfigError("pitch shifts exceed the mel range")


@dataclass
class DatasetItem:
    index: int
    split: str
    spec: UtteranceSpec
    mel: np.ndarray

    @property
    def transcript(self) -> tuple[int, ...]:
        return self.spec.token_ids


@dataclass
class Dataset:
    items: list[DatasetItem]
    render: RenderConfig = field(default_factory=RenderConfig)

    def __len__(self) -> int:
        return len(self.items)

    def split(self, name: str) -> list[DatasetItem]:
        return [it for it in self.items if it.split == name]


def _draw(rng: np.random.Generator, n: int, weights) -> int:
    if weights is None:
        return int(rng.integers(0, n))
    p = np.asarray(weights, dtype=float)
    if p.shape != (n,) or np.any(p < 0) or p.sum() <= 0:
        raise ConfigError(f"bad weights {weights!r} for cardinality {n}")
    return int(rng.choice(n, p=p / p.sum()))


def gen_utterance(dist: SpecDistribution, seed: int) -> UtteranceSpec:
    dist.validate()
    rng = np.random.default_rng(seed)
    weights = dist.weights or {}
    length = int(rng.integers(dist.min_len, dist.max_len + 1))
    tokens: list[int] = []
    while len(tokens) < length:
        if dist.phrases and len(tokens) + 2 <= length and rng.random() < dist.phrase_prob:
            a, b = dist.phrases[int(rng.integers(0, len(dist.phrases)))]
            tokens.extend((int(a), int(b)))
        else:
            tokens.append(int(rng.integers(dist.token_low, dist.vocab_size)))
    return UtteranceSpec(
        token_ids=tuple(tokens),
        speaker_id=_draw(rng, dist.n_speakers, weights.get("speaker_id")),
        pitch_level=_draw(rng, dist.n_pitch, weights.get("pitch_level")),
        energy_level=_draw(rng, dist.n_energy, weights.get("energy_level")),
        emotion=_draw(rng, dist.n_emotion, weights.get("emotion")),
        seed=int(rng.integers(0, 2**63 - 1)),
    )


# -- fixed rendering tables ---------------------------------------------------

def token_patterns(cfg: RenderConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-token base columns ``(vocab, F)`` and their dominant-bin indices."""
    rng = np.random.default_rng([cfg.table_seed, 1])
    F = cfg.n_mels
    top = F - (cfg.n_pitch - 1) * cfg.pitch_offset
    patterns = rng.uniform(0.05, 0.3, size=(cfg.vocab_size, F))
    peaks = rng.integers(0, top, size=cfg.vocab_size)
    patterns[np.arange(cfg.vocab_size), peaks] = 1.0
    return patterns, peaks


def speaker_filters(cfg: RenderConfig) -> np.ndarray:
    """Smooth per-speaker spectral filters ``(n_speakers, F)``.

    Each filter is a random mix of three low-frequency cosines over the mel
    axis, rescaled so its values span [1 - speaker_depth, 1 + speaker_depth].
    """
    rng = np.random.default_rng([cfg.table_seed, 2])
    x = np.linspace(0.0, 1.0, cfg.n_mels)
    out = np.empty((cfg.n_speakers, cfg.n_mels))
    for s in range(cfg.n_speakers):
        freqs = rng.uniform(0.5, 2.5, size=3)
        phases = rng.uniform(0.0, 2 * math.pi, size=3)
        amps = rng.uniform(0.3, 1.0, size=3)
        curve = (amps[:, None] * np.cos(2 * math.pi * freqs[:, None] * x + phases[:, None])).sum(0)
        curve = 2.0 * (curve - curve.min()) / (curve.max() - curve.min()) - 1.0
        out[s] = 1.0 + cfg.speaker_depth * curve
    return out


def emotion_signs(cfg: RenderConfig) -> np.ndarray:
    """Per-class sign of the frame-alternating modulation in each mel bin ``(n_emotion, F)``.

    Class 0 is unmodulated, class 1 is +1 everywhere, class 2 is -1
    everywhere, class 3 is +1 on the lower half of the bins and -1 on the
    upper half; further classes draw random signs over four bands.
    """
    F = cfg.n_mels
    signs = np.zeros((max(cfg.n_emotion, 4), F))
    signs[1] = 1.0
    signs[2] = -1.0
    signs[3, : F // 2] = 1.0
    signs[3, F // 2 :] = -1.0
    rng = np.random.default_rng([cfg.table_seed, 3])
    band = np.arange(F) * 4 // F
    for k in range(4, cfg.n_emotion):
        signs[k] = rng.choice([-1.0, 1.0], size=4)[band]
    return signs[: cfg.n_emotion]


def emotion_envelope(emotion: int, n: int, cfg: RenderConfig) -> np.ndarray:
    """Multiplier ``(F, n)`` over the ``n`` non-padding frames.

    ``1 + emotion_depth * sign[f] * (-1) ** t``: amplitude alternates from frame
    to frame with a per-bin sign, so every pair of frames averages to 1.
    """
    alt = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    return 1.0 + cfg.emotion_depth * emotion_signs(cfg)[emotion][:, None] * alt[None, :]


def render_mel(spec: UtteranceSpec, cfg: RenderConfig) -> np.ndarray:
    cfg.validate()
    n_tok = len(spec.token_ids)
    if n_tok == 0:
        raise InputError("empty token sequence")
    n_active = n_tok * cfg.span
    if n_active > cfg.n_frames:
        raise InputError(
            f"{n_tok} tokens x span {cfg.span} = {n_active} frames exceeds L={cfg.n_frames}"
        )
    if any(t < 0 or t >= cfg.vocab_size for t in spec.token_ids):
        raise InputError("token id outside the rendering vocabulary")
    for attr, card in (("speaker_id", cfg.n_speakers), ("pitch_level", cfg.n_pitch),
                       ("emotion", cfg.n_emotion)):
        v = getattr(spec, attr)
        if not 0 <= v < card:
            raise InputError(f"{attr}={v} outside [0, {card})")
    if spec.energy_level < 0:
        raise InputError("energy_level must be non-negative")

    patterns, _ = token_patterns(cfg)
    cols = np.roll(patterns[list(spec.token_ids)], spec.pitch_level * cfg.pitch_offset, axis=1)
    active = np.repeat(cols, cfg.span, axis=0).T  # (F, n_active)
    active = active * speaker_filters(cfg)[spec.speaker_id][:, None]
    active = active * (cfg.energy_factor ** spec.energy_level)
    active = active * emotion_envelope(spec.emotion, n_active, cfg)

    mel = np.zeros((cfg.n_mels, cfg.n_frames))
    mel[:, :n_active] = active
    if cfg.noise_sigma > 0:
        mel = mel + np.random.default_rng(spec.seed).normal(0.0, cfg.noise_sigma, size=mel.shape)
    return mel.astype(np.float32)


def active_frames(spec: UtteranceSpec, cfg: RenderConfig) -> int:
    return len(spec.token_ids) * cfg.span


def utterance_scalars(mel: np.ndarray, n_active: int) -> dict[str, float]:
    """Continuous per-utterance measurements: mean dominant bin and mean magnitude."""
    region = mel[:, :n_active]
    return {
        "f0": float(region.argmax(axis=0).mean()),
        "energy": float(region.mean()),
    }


# -- datasets -----------------------------------------------------------------

def item_seed(master_seed: int, index: int) -> int:
    """Seed-splitting rule: first 64-bit word of SeedSequence([master, index])."""
    state = np.random.SeedSequence([master_seed, index]).generate_state(1, dtype=np.uint64)
    return int(state[0] >> np.uint64(1))


def split_counts(n: int, fractions: Sequence[float]) -> list[int]:
    """Counts per split; rounding remainder fills train first, then val, then test."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {fractions}")
    counts = [int(math.floor(n * f)) for f in fractions]
    i = 0
    while sum(counts) < n:
        counts[i % len(counts)] += 1
        i += 1
    return counts


def make_dataset(
    n: int,
    dist: SpecDistribution,
    render: RenderConfig,
    seed: int,
    fractions: Sequence[float] = (0.8, 0.1, 0.1),
    workers: int = 1,
) -> Dataset:
    if n < 1:
        raise InputError("n must be >= 1")

    def one(i: int) -> tuple[UtteranceSpec, np.ndarray]:
        spec = gen_utterance(dist, item_seed(seed, i))
        return spec, render_mel(spec, render)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(one, range(n)))
    else:
        results = [one(i) for i in range(n)]

    tags: list[str] = []
    for name, c in zip(SPLITS, split_counts(n, fractions)):
        tags.extend([name] * c)
    items = [DatasetItem(i, tags[i], spec, mel) for i, (spec, mel) in enumerate(results)]
    return Dataset(items, render)


def save_dataset(ds: Dataset, root: str | Path) -> None:
    root = Path(root)
    (root / "mels").mkdir(parents=True, exist_ok=True)
    with open(root / "manifest.jsonl", "w") as fh:
        fh.write(json.dumps({"render": asdict(ds.render)}, sort_keys=True) + "\n")
        for it in ds.items:
            rel = f"mels/{it.index:06d}.bin"
            save_matrix(root / rel, it.mel)
            rec = {"index": it.index, "split": it.split, "mel": rel, **it.spec.to_record()}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    with open(root / "manifest.jsonl") as fh:
        lines = [json.loads(l) for l in fh if l.strip()]
    render = RenderConfig(**lines[0]["render"])
    items = [
        DatasetItem(r["index"], r["split"], UtteranceSpec.from_record(r), load_matrix(root / r["mel"]))
        for r in lines[1:]
    ]
    items.sort(key=lambda it: it.index)
    return Dataset(items, render)


# -- quantile bins --------------------------------------------------------------

def quantile_bin(values: Sequence[float], n_bins: int) -> list[int]:
    """Rank-based quantile labels; tied values share the lower bin.

    Label of a value is ``floor(r * n_bins / n)`` where ``r`` is the number of
    strictly smaller values.
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise InputError("quantile_bin needs at least one value")
    if n_bins < 2:
        raise ConfigError("n_bins must be >= 2")
    n_distinct = len(np.unique(v))
    if n_bins > n_distinct:
        raise DegenerateBinsError(f"{n_bins} bins requested but only {n_distinct} distinct values")
    ranks = np.searchsorted(np.sort(v), v, side="left")
    return [int(r * n_bins // v.size) for r in ranks]

