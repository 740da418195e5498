"""Small building blocks shared by the transformer models."""
from __future__ import annotations

import hashlib
import math

import torch
from torch import nn


def sinusoidal_pe(length: int, d: int, dtype=torch.float32) -> torch.Tensor:
    """Standard sine/cosine positional table of shape ``(length, d)``."""
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, d, 2, dtype=torch.float64) * (-math.log(10000.0) / d))
    pe = torch.zeros(length, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : d // 2]
    return pe.to(dtype)


def causal_mask(n: int, dtype=torch.float32) -> torch.Tensor:
    return torch.triu(torch.full((n, n), float("-inf"), dtype=dtype), diagonal=1)


def encoder_layer(d: int, n_heads: int, dropout: float) -> nn.TransformerEncoderLayer:
    return nn.TransformerEncoderLayer(
        d, n_heads, 4 * d, dropout, activation="gelu", batch_first=True, norm_first=True
    )


def decoder_layer(d: int, n_heads: int, dropout: float) -> nn.TransformerDecoderLayer:
    return nn.TransformerDecoderLayer(
        d, n_heads, 4 * d, dropout, activation="gelu", batch_first=True, norm_first=True
    )


def param_digest(module: nn.Module) -> str:
    """SHA-256 over every parameter's raw bytes, in name order."""
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
