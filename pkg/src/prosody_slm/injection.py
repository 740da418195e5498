"""Turn a token-aligned prosody stream into the backbone's mixed input.

Two layouts are supported:

* global prepending: ``[proj(mean(P)); y_1 .. y_T]`` (length ``T + 1``)
* ratio-``r`` interleaving: ``[e_1; g_1; e_2; g_2; ...; e_M; g_M]`` where
  ``M = min(ceil(T / r), N)``, text group ``g_j`` holds up to ``r`` tokens (the
  last group absorbs any remainder when ``M`` was clamped) and ``e_j`` is the
  projected mean of prosody rows ``[floor(jN/M), floor((j+1)N/M))``.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Sequence, Union

import torch
from torch import nn

from .errors import ConfigError, InputError


@dataclass(frozen=True)
class TokenSlot:
    id: int


@dataclass(frozen=True, eq=False)
class EmbedSlot:
    vector: torch.Tensor
    provenance: str  # "global" or "g<j>"

    def digest(self) -> str:
        data = self.vector.detach().cpu().to(torch.float32).contiguous().numpy().tobytes()
        return hashlib.sha256(data).hexdigest()[:8]


Slot = Union[TokenSlot, EmbedSlot]


class MixedSequence:
    """Ordered token / embedding slots fed to the backbone."""

    def __init__(self, slots: Sequence[Slot]):
        self.slots = list(slots)

    def __len__(self) -> int:
        return len(self.slots)

    def __iter__(self):
        return iter(self.slots)

    def __getitem__(self, i):
        return self.slots[i]

    def __add__(self, other: "MixedSequence") -> "MixedSequence":
        return MixedSequence(self.slots + list(other))

    @classmethod
    def from_tokens(cls, ids: Sequence[int]) -> "MixedSequence":
        return cls([TokenSlot(int(i)) for i in ids])

    @property
    def embed_positions(self) -> list[int]:
        return [i for i, s in enumerate(self.slots) if isinstance(s, EmbedSlot)]

    @property
    def token_ids(self) -> list[int]:
        return [s.id for s in self.slots if isinstance(s, TokenSlot)]

    def layout(self) -> str:
        return "".join("E" if isinstance(s, EmbedSlot) else "T" for s in self.slots)

    def debug_line(self) -> str:
        return " ".join(
            f"E:{s.provenance}:{s.digest()}" if isinstance(s, EmbedSlot) else f"T:{s.id}"
            for s in self.slots
        )

    def zero_embeds(self) -> "MixedSequence":
        """Copy with every embedding slot replaced by zeros (ablation helper)."""
        return MixedSequence(
            EmbedSlot(torch.zeros_like(s.vector), s.provenance) if isinstance(s, EmbedSlot) else s
            for s in self.slots
        )

    def to_tensors(self, d: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """``(ids, embed_mask, embeds)`` of shapes ``(S,)``, ``(S,)``, ``(S, d)``."""
        S = len(self.slots)
        ids = torch.zeros(S, dtype=torch.long)
        mask = torch.zeros(S, dtype=torch.bool)
        rows = []
        dtype = next((s.vector.dtype for s in self.slots if isinstance(s, EmbedSlot)), torch.float32)
        for i, s in enumerate(self.slots):
            if isinstance(s, EmbedSlot):
                if s.vector.shape != (d,):
                    raise InputError(f"embed slot {i} has shape {tuple(s.vector.shape)}, expected ({d},)")
                mask[i] = True
                rows.append(s.vector)
            else:
                ids[i] = s.id
                rows.append(torch.zeros(d, dtype=dtype))
        embeds = torch.stack(rows) if rows else torch.zeros(0, d, dtype=dtype)
        return ids, mask, embeds


def same_slots(a: MixedSequence, b: MixedSequence, atol: float = 1e-7) -> bool:
    """Slot-by-slot equality: same kinds, same ids, embeddings within ``atol``."""
    if len(a) != len(b):
        return False
    for x, y in zip(a, b):
        if type(x) is not type(y):
            return False
        if isinstance(x, TokenSlot):
            if x.id != y.id:
                return False
        elif x.vector.shape != y.vector.shape or not torch.allclose(x.vector, y.vector, rtol=0, atol=atol):
            return False
    return True


class Projector(nn.Module):
    """Two-layer MLP (linear, GELU, linear) from prosody width to backbone width."""

    def __init__(self, d_in: int, d_out: int, hidden: int | None = None):
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        hidden = hidden or d_out
        self.fc1 = nn.Linear(d_in, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, d_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


def pool_global(P: torch.Tensor) -> torch.Tensor:
    if P.dim() != 2 or P.shape[0] == 0:
        raise InputError(f"expected a non-empty N x d matrix, got {tuple(P.shape)}")
    return P.mean(dim=0)


def project(p: torch.Tensor, projector: Projector) -> torch.Tensor:
    if p.shape[-1] != projector.d_in:
        raise ConfigError(f"prosody width {p.shape[-1]} != projector input {projector.d_in}")
    return projector(p.to(projector.fc1.weight.dtype))


def partition_prosody(N: int, M: int) -> list[tuple[int, int]]:
    """``M`` consecutive half-open ranges ``[floor(jN/M), floor((j+1)N/M))`` covering ``[0, N)``."""
    if N < 1 or not 1 <= M <= N:
        raise InputError(f"need 1 <= M <= N, got N={N}, M={M}")
    return [(j * N // M, (j + 1) * N // M) for j in range(M)]


def n_groups(T: int, N: int, r: int) -> int:
    return min(math.ceil(T / r), N)


def text_groups(T: int, r: int, M: int) -> list[tuple[int, int]]:
    """Groups of ``r`` text positions; the last group takes everything left."""
    bounds = [(j * r, (j + 1) * r) for j in range(M - 1)]
    bounds.append(((M - 1) * r, T))
    return bounds


def _check(text_tokens: Sequence[int], P: torch.Tensor) -> None:
    if len(text_tokens) == 0:
        raise InputError("text token sequence is empty")
    if P.dim() != 2 or P.shape[0] == 0:
        raise InputError(f"prosody must be a non-empty N x d matrix, got {tuple(P.shape)}")


def build_global_input(text_tokens: Sequence[int], P: torch.Tensor, projector: Projector) -> MixedSequence:
    _check(text_tokens, P)
    e = EmbedSlot(project(pool_global(P), projector), "global")
    return MixedSequence([e, *(TokenSlot(int(t)) for t in text_tokens)])


def build_interleaved_input(
    text_tokens: Sequence[int], P: torch.Tensor, r: int, projector: Projector
) -> MixedSequence:
    if r < 1:
        raise ConfigError(f"interleave ratio r={r} must be >= 1")
    _check(text_tokens, P)
    T, N = len(text_tokens), P.shape[0]
    M = n_groups(T, N, r)
    slots: list[Slot] = []
    for j, ((ps, pe), (ts, te)) in enumerate(zip(partition_prosody(N, M), text_groups(T, r, M))):
        slots.append(EmbedSlot(project(P[ps:pe].mean(dim=0), projector), f"g{j}"))
        slots.extend(TokenSlot(int(t)) for t in text_tokens[ts:te])
    return MixedSequence(slots)


def build_input(
    text_tokens: Sequence[int], P: torch.Tensor, projector: Projector, mode: str = "global", r: int = 1
) -> MixedSequence:
    if mode == "global":
        return build_global_input(text_tokens, P, projector)
    if mode == "interleave":
        return build_interleaved_input(text_tokens, P, r, projector)
    raise ConfigError(f"unknown injection mode {mode!r}")
