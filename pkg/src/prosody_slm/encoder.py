"""Miniature encoder-decoder ASR model that doubles as a prosody extractor.

The decoder is run under teacher forcing on ``[BOS] + tokens``; the prosody
vector for token ``y_i`` is the chosen decoder layer's hidden state at the
position where ``y_i`` is the input (positions ``1..N``).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, InputError
from .layers import causal_mask, decoder_layer, encoder_layer, sinusoidal_pe
from .vocab import BOS, EOS, PAD


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 64
    n_enc_layers: int = 2
    n_dec_layers: int = 4
    n_heads: int = 4
    vocab_size: int = 64
    max_text_len: int = 12
    prosody_layer: int = 2
    n_mels: int = 24
    n_frames: int = 40
    stride: int = 2
    dropout: float = 0.0

    def validate(self) -> None:
        if not 1 <= self.prosody_layer <= self.n_dec_layers:
            raise ConfigError(
                f"prosody_layer={self.prosody_layer} outside [1, {self.n_dec_layers}]"
            )
        if self.d % self.n_heads:
            raise ConfigError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")

    @property
    def enc_len(self) -> int:
        return math.ceil(self.n_frames / self.stride)


class SpeechEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.d
        self.frontend = nn.Conv1d(cfg.n_mels, d, kernel_size=3, stride=cfg.stride, padding=1)
        self.enc_layers = nn.ModuleList(
            [encoder_layer(d, cfg.n_heads, cfg.dropout) for _ in range(cfg.n_enc_layers)]
        )
        self.enc_norm = nn.LayerNorm(d)
        self.tok_emb = nn.Embedding(cfg.vocab_size, d)
        self.dec_layers = nn.ModuleList(
            [decoder_layer(d, cfg.n_heads, cfg.dropout) for _ in range(cfg.n_dec_layers)]
        )
        self.dec_norm = nn.LayerNorm(d)
        self.lm_head = nn.Linear(d, cfg.vocab_size)
        self.register_buffer("enc_pe", sinusoidal_pe(cfg.enc_len, d), persistent=False)
        self.register_buffer("dec_pe", sinusoidal_pe(cfg.max_text_len + 2, d), persistent=False)

    # -- encoder -------------------------------------------------------------

    def _check_mel(self, mel: torch.Tensor) -> torch.Tensor:
        mel = torch.as_tensor(mel, dtype=self.lm_head.weight.dtype)
        if mel.dim() == 2:
            mel = mel[None]
        if mel.dim() != 3 or tuple(mel.shape[1:]) != (self.cfg.n_mels, self.cfg.n_frames):
            raise InputError(
                f"mel shape {tuple(mel.shape)} does not match "
                f"(F={self.cfg.n_mels}, L={self.cfg.n_frames})"
            )
        return mel

    def encode(self, mel) -> torch.Tensor:
        """``(F, L)`` -> ``(L_e, d)``; batched ``(B, F, L)`` -> ``(B, L_e, d)``."""
        single = torch.as_tensor(mel).dim() == 2
        x = self._check_mel(mel)
        h = F.gelu(self.frontend(x)).transpose(1, 2)
        h = h + self.enc_pe[: h.shape[1]].to(h.dtype)
        for layer in self.enc_layers:
            h = layer(h)
        h = self.enc_norm(h)
        return h[0] if single else h

    # -- decoder -------------------------------------------------------------

    def decoder_states(
        self, memory: torch.Tensor, dec_in: torch.Tensor, n_layers: int | None = None
    ) -> list[torch.Tensor]:
        """Hidden states after each of the first ``n_layers`` decoder layers."""
        n_layers = self.cfg.n_dec_layers if n_layers is None else n_layers
        S = dec_in.shape[1]
        if S > self.dec_pe.shape[0]:
            raise InputError(f"decoder input length {S} exceeds max_text_len + 2")
        h = self.tok_emb(dec_in) + self.dec_pe[:S].to(memory.dtype)
        mask = causal_mask(S, memory.dtype)
        states = []
        for layer in self.dec_layers[:n_layers]:
            h = layer(h, memory, tgt_mask=mask)
            states.append(h)
        return states

    def forward(self, mel: torch.Tensor, dec_in: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Batched teacher-forced pass: returns logits ``(B, S, V)`` and per-layer states."""
        memory = self.encode(mel)
        states = self.decoder_states(memory, dec_in)
        logits = self.lm_head(self.dec_norm(states[-1]))
        return logits, states

    @torch.no_grad()
    def transcribe_batch(self, mels) -> list[list[int]]:
        """Greedy decoding; stops at EOS or ``max_text_len`` tokens."""
        memory = self.encode(torch.as_tensor(np.asarray(mels)))
        B = memory.shape[0]
        seq = torch.full((B, 1), BOS, dtype=torch.long)
        done = torch.zeros(B, dtype=torch.bool)
        out: list[list[int]] = [[] for _ in range(B)]
        for _ in range(self.cfg.max_text_len):
            states = self.decoder_states(memory, seq)
            logits = self.lm_head(self.dec_norm(states[-1][:, -1]))
            nxt = logits.argmax(-1)
            for b in range(B):
                if not done[b]:
                    if int(nxt[b]) == EOS:
                        done[b] = True
                    else:
                        out[b].append(int(nxt[b]))
            if bool(done.all()):
                break
            seq = torch.cat([seq, nxt[:, None]], dim=1)
        return out

    def transcribe(self, mel) -> list[int]:
        return self.transcribe_batch(np.asarray(mel)[None])[0]

    def extract_prosody_batch(
        self, mels, token_lists: Sequence[Sequence[int]], layer: int | None = None
    ) -> list[torch.Tensor]:
        layer = self.cfg.prosody_layer if layer is None else layer
        if not 1 <= layer <= self.cfg.n_dec_layers:
            raise ConfigError(f"layer={layer} outside [1, {self.cfg.n_dec_layers}]")
        if any(len(t) == 0 for t in token_lists):
            raise InputError("extract_prosody needs a non-empty token sequence")
        dec_in = pad_batch([[BOS, *t] for t in token_lists], PAD)
        memory = self.encode(torch.as_tensor(np.asarray(mels)))
        h = self.decoder_states(memory, dec_in, n_layers=layer)[-1]
        return [h[b, 1 : len(t) + 1] for b, t in enumerate(token_lists)]

    def extract_prosody(self, mel, tokens: Sequence[int], layer: int | None = None) -> torch.Tensor:
        """``N x d`` token-aligned prosody matrix from decoder layer ``layer`` (1-based)."""
        return self.extract_prosody_batch(np.asarray(mel)[None], [list(tokens)], layer)[0]

    def config_record(self) -> dict:
        return asdict(self.cfg)


def pad_batch(seqs: Sequence[Sequence[int]], fill: int) -> torch.Tensor:
    n = max(len(s) for s in seqs)
    out = torch.full((len(seqs), n), fill, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out


def asr_loss(logits: torch.Tensor, targets: torch.Tensor, ignore_index: int | None = None) -> torch.Tensor:
    """Mean token-level cross-entropy.

    ``logits (N, V)`` with ``targets (N,)`` gives the per-utterance average.
    For batches ``(B, S, V)`` / ``(B, S)``, positions equal to ``ignore_index``
    are skipped, each utterance is averaged over its own tokens, and the batch
    loss is the mean over utterances.
    """
    targets = torch.as_tensor(targets, dtype=torch.long)
    if logits.shape[:-1] != targets.shape:
        raise InputError(f"logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    if targets.numel() == 0:
        raise InputError("empty target sequence")
    logp = F.log_softmax(logits, dim=-1)
    if ignore_index is None:
        mask = torch.ones_like(targets, dtype=logp.dtype)
        safe = targets
    else:
        mask = (targets != ignore_index).to(logp.dtype)
        safe = targets.masked_fill(targets == ignore_index, 0)
    nll = -logp.gather(-1, safe[..., None])[..., 0] * mask
    if targets.dim() == 1:
        return nll.sum() / mask.sum()
    per_utt = nll.sum(-1) / mask.sum(-1).clamp_min(1)
    return per_utt.mean()


def token_accuracy(refs: Sequence[Sequence[int]], hyps: Sequence[Sequence[int]]) -> float:
    """Position-wise match rate; length mismatch counts against the longer side."""
    hits = total = 0
    for r, h in zip(refs, hyps):
        hits += sum(a == b for a, b in zip(r, h))
        total += max(len(r), len(h))
    return hits / max(total, 1)
