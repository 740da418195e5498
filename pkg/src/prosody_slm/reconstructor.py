"""Mel reconstructor and joint ASR + reconstruction training.

Pipeline: token embedding and projected prosody are concatenated and fused
(linear -> layer norm -> GELU -> dropout), contextualised by a transformer
encoder, then a fixed set of learnable frame queries cross-attends over that
memory and a two-layer head maps each frame state to ``F`` mel bins.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .encoder import EncoderConfig, SpeechEncoder, asr_loss, pad_batch
from .errors import ConfigError, InputError, TrainingDiverged
from .layers import decoder_layer, encoder_layer, sinusoidal_pe
from .synth_data import Dataset, DatasetItem
from .tensorio import load_checkpoint, save_checkpoint
from .vocab import BOS, EOS, PAD


@dataclass(frozen=True)
class ReconstructorConfig:
    d_model: int = 64
    prosody_dim: int = 64
    vocab_size: int = 64
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_heads: int = 4
    dropout: float = 0.0
    n_frames: int = 40
    n_mels: int = 24
    lambda_mel: float = 1.0

    def validate(self) -> None:
        if self.lambda_mel < 0:
            raise ConfigError("lambda_mel must be >= 0")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 3e-3
    steps: int = 3000
    batch_size: int = 32
    warmup_fraction: float = 0.02
    weight_decay: float = 0.0
    seed: int = 0

    @property
    def warmup_steps(self) -> int:
        return max(1, round(self.warmup_fraction * self.steps))


def linear_schedule(step: int, total: int, warmup: int) -> float:
    """Linear warmup to 1.0 over ``warmup`` steps, then linear decay to 0 at ``total``."""
    if warmup > 0 and step < warmup:
        return (step + 1) / warmup
    return max(0.0, (total - step) / max(1, total - warmup))


class MelReconstructor(nn.Module):
    def __init__(self, cfg: ReconstructorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.d_model
        self.emb = nn.Embedding(cfg.vocab_size, d)
        self.prosody_proj = nn.Linear(cfg.prosody_dim, d)
        self.fusion = nn.Sequential(
            nn.Linear(2 * d, d), nn.LayerNorm(d), nn.GELU(), nn.Dropout(cfg.dropout)
        )
        self.encoder = nn.ModuleList(
            [encoder_layer(d, cfg.n_heads, cfg.dropout) for _ in range(cfg.n_enc_layers)]
        )
        self.frame_queries = nn.Parameter(torch.randn(cfg.n_frames, d) * 0.02)
        self.decoder = nn.ModuleList(
            [decoder_layer(d, cfg.n_heads, cfg.dropout) for _ in range(cfg.n_dec_layers)]
        )
        self.out_norm = nn.LayerNorm(d)
        self.head = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, cfg.n_mels))

    def _check(self, tokens: torch.Tensor, prosody: torch.Tensor) -> None:
        if tokens.shape != prosody.shape[:-1]:
            raise InputError(
                f"token/prosody misalignment: {tuple(tokens.shape)} vs {tuple(prosody.shape)}"
            )
        if tokens.shape[-1] < 1:
            raise InputError("need at least one token")
        if prosody.shape[-1] != self.cfg.prosody_dim:
            raise InputError(f"prosody width {prosody.shape[-1]} != {self.cfg.prosody_dim}")

    def fuse(self, tokens, prosody: torch.Tensor) -> torch.Tensor:
        """``(N,)`` tokens and ``(N, d)`` prosody -> ``(N, d_r)``; batched shapes accepted."""
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        self._check(tokens, prosody)
        e = self.emb(tokens)
        p = self.prosody_proj(prosody.to(e.dtype))
        return self.fusion(torch.cat([e, p], dim=-1))

    def forward(self, tokens, prosody: torch.Tensor, pad_mask: torch.Tensor | None = None) -> torch.Tensor:
        """Batched reconstruction ``(B, N)``, ``(B, N, d)`` -> ``(B, F, L)``.

        ``pad_mask`` is True at padded token positions.
        """
        z = self.fuse(tokens, prosody)
        B, N, d = z.shape
        h = z + sinusoidal_pe(N, d, z.dtype)
        for layer in self.encoder:
            h = layer(h, src_key_padding_mask=pad_mask)
        L = self.cfg.n_frames
        q = (self.frame_queries + sinusoidal_pe(L, d, z.dtype)).expand(B, L, d)
        for layer in self.decoder:
            q = layer(q, h, memory_key_padding_mask=pad_mask)
        frames = self.head(self.out_norm(q))  # (B, L, F)
        return frames.transpose(1, 2)

    def reconstruct(self, tokens, prosody: torch.Tensor) -> torch.Tensor:
        """Single utterance: ``(N,)``, ``(N, d)`` -> ``(F, L)``."""
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        self._check(tokens, prosody)
        return self.forward(tokens[None], prosody[None])[0]


def mel_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every entry (padding frames included)."""
    if pred.shape != target.shape:
        raise InputError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


def total_loss(l_asr, l_mel, lam: float):
    return l_asr + lam * l_mel


class WhisperPro(nn.Module):
    """ASR encoder-decoder plus mel reconstructor, trained jointly."""

    def __init__(self, enc_cfg: EncoderConfig, rec_cfg: ReconstructorConfig):
        super().__init__()
        if rec_cfg.prosody_dim != enc_cfg.d:
            raise ConfigError("reconstructor prosody_dim must equal encoder width d")
        if (rec_cfg.n_mels, rec_cfg.n_frames) != (enc_cfg.n_mels, enc_cfg.n_frames):
            raise ConfigError("encoder and reconstructor disagree on (F, L)")
        self.asr = SpeechEncoder(enc_cfg)
        self.recon = MelReconstructor(rec_cfg)

    def losses(self, mels: torch.Tensor, transcripts: Sequence[Sequence[int]]):
        cfg = self.asr.cfg
        dec_in = pad_batch([[BOS, *t] for t in transcripts], PAD)
        targets = pad_batch([[*t, EOS] for t in transcripts], PAD)
        logits, states = self.asr(mels, dec_in)
        l_asr = asr_loss(logits, targets, ignore_index=PAD)
        prosody = states[cfg.prosody_layer - 1][:, 1:]
        tokens = pad_batch([list(t) for t in transcripts], PAD)
        lengths = torch.as_tensor([len(t) for t in transcripts])
        pad_mask = torch.arange(tokens.shape[1])[None, :] >= lengths[:, None]
        recon = self.recon(tokens, prosody, pad_mask=pad_mask)
        l_mel = mel_loss(recon, mels)
        return l_asr, l_mel, recon

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        tensors = {f"asr.{k}": v for k, v in self.asr.state_dict().items()}
        tensors.update({f"recon.{k}": v for k, v in self.recon.state_dict().items()})
        save_checkpoint(
            path,
            {"encoder": asdict(self.asr.cfg)},
            tensors,
            sections={"reconstructor": asdict(self.recon.cfg), **(extra or {})},
        )

    @classmethod
    def load(cls, path: str | Path) -> "WhisperPro":
        config, tensors, sections = load_checkpoint(path)
        model = cls(EncoderConfig(**config["encoder"]), ReconstructorConfig(**sections["reconstructor"]))
        model.asr.load_state_dict({k[4:]: v for k, v in tensors.items() if k.startswith("asr.")})
        model.recon.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("recon.")})
        return model


def save_encoder(path: str | Path, enc: SpeechEncoder) -> None:
    save_checkpoint(path, {"encoder": asdict(enc.cfg)}, dict(enc.state_dict()))


def load_encoder(path: str | Path) -> SpeechEncoder:
    config, tensors, _ = load_checkpoint(path)
    enc = SpeechEncoder(EncoderConfig(**config["encoder"]))
    enc.load_state_dict({k.removeprefix("asr."): v for k, v in tensors.items()
                         if not k.startswith("recon.")})
    return enc


@dataclass
class TrainResult:
    model: WhisperPro
    curve: list[dict] = field(default_factory=list)


def _batches(items: list[DatasetItem], batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(len(items))
        for i in range(0, len(order) - batch_size + 1, batch_size):
            yield [items[j] for j in order[i : i + batch_size]]


def train_whisperpro(
    dataset: Dataset | Sequence[DatasetItem],
    enc_cfg: EncoderConfig,
    rec_cfg: ReconstructorConfig,
    opt: OptimConfig,
    curve_path: str | Path | None = None,
) -> TrainResult:
    """Jointly optimise ASR loss + lambda * mel loss over the training items.

    One record per step ``{step, L_ASR, L_mel, total, lr}`` is collected (and
    appended to ``curve_path`` as JSON lines when given).  A non-finite loss
    raises :class:`TrainingDiverged` carrying the offending record.
    """
    items = dataset.split("train") if isinstance(dataset, Dataset) else list(dataset)
    if not items:
        raise InputError("empty training set")
    torch.manual_seed(opt.seed)
    model = WhisperPro(enc_cfg, rec_cfg)
    model.train()
    optim = torch.optim.Adam(model.parameters(), lr=opt.lr, weight_decay=opt.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(
        optim, lambda s: linear_schedule(s, opt.steps, opt.warmup_steps)
    )
    rng = np.random.default_rng(opt.seed)
    batches = _batches(items, min(opt.batch_size, len(items)), rng)
    lam = rec_cfg.lambda_mel
    curve: list[dict] = []
    fh = open(curve_path, "w") if curve_path else None
    try:
        for step in range(opt.steps):
            batch = next(batches)
            mels = torch.as_tensor(np.stack([it.mel for it in batch]))
            l_asr, l_mel, _ = model.losses(mels, [it.transcript for it in batch])
            loss = total_loss(l_asr, l_mel, lam)
            rec = {
                "step": step,
                "L_ASR": l_asr.item(),
                "L_mel": l_mel.item(),
                "total": loss.item(),
                "lr": optim.param_groups[0]["lr"],
            }
            if not math.isfinite(rec["total"]):
                raise TrainingDiverged(f"non-finite loss at step {step}", rec)
            curve.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
            optim.zero_grad()
            loss.backward()
            optim.step()
            sched.step()
    finally:
        if fh:
            fh.close()
    model.eval()
    return TrainResult(model, curve)
