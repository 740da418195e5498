"""Binary tensor layout and the versioned checkpoint container.

Matrix file layout (little-endian)::

    magic   4 bytes   b"PSMT"
    rows    uint32
    cols    uint32
    body    rows*cols float32, row-major

Checkpoint container layout (little-endian)::

    magic     4 bytes  b"PSCK"
    version   uint32   (currently 1)
    hdr_len   uint32
    header    hdr_len bytes of UTF-8 JSON:
              {"config": {...}, "sections": {...}, "tensors": [{"name", "shape"}, ...]}
    tensors   one matrix record per entry in header["tensors"], in order

Tensors of arbitrary rank are stored as matrices of shape (shape[0], prod(shape[1:]))
and reshaped on load; scalars are stored as 1x1.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Any, BinaryIO, Mapping

import numpy as np
import torch

MATRIX_MAGIC = b"PSMT"
CKPT_MAGIC = b"PSCK"
CKPT_VERSION = 1


class FormatError(ValueError):
    """Raised when a binary file does not match the expected layout."""


def write_matrix(fh: BinaryIO, values: np.ndarray) -> None:
    arr = np.asarray(values, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {arr.shape}")
    rows, cols = arr.shape
    fh.write(MATRIX_MAGIC)
    fh.write(struct.pack("<II", rows, cols))
    fh.write(np.ascontiguousarray(arr).tobytes(order="C"))


def read_matrix(fh: BinaryIO) -> np.ndarray:
    magic = fh.read(4)
    if magic != MATRIX_MAGIC:
        raise FormatError(f"bad matrix magic {magic!r}")
    rows, cols = struct.unpack("<II", fh.read(8))
    n = rows * cols
    body = fh.read(4 * n)
    if len(body) != 4 * n:
        raise FormatError("truncated matrix body")
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float32)


def save_matrix(path: str | Path, values: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_matrix(fh, values)


def load_matrix(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_matrix(fh)


def _as_matrix(t: np.ndarray) -> np.ndarray:
    if t.ndim == 0:
        return t.reshape(1, 1)
    if t.ndim == 1:
        return t.reshape(1, -1)
    return t.reshape(t.shape[0], -1)


def save_checkpoint(
    path: str | Path,
    config: Mapping[str, Any],
    tensors: Mapping[str, torch.Tensor | np.ndarray],
    sections: Mapping[str, Any] | None = None,
) -> None:
    """Write named tensors plus a JSON config record into one container file."""
    index = []
    blobs = io.BytesIO()
    for name in sorted(tensors):
        t = tensors[name]
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        index.append({"name": name, "shape": list(arr.shape)})
        write_matrix(blobs, _as_matrix(arr.astype(np.float32)))
    header = json.dumps(
        {"config": dict(config), "sections": dict(sections or {}), "tensors": index},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(header)))
        fh.write(header)
        fh.write(blobs.getvalue())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor], dict]:
    """Return ``(config, tensors, sections)``; rejects unknown container versions."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CKPT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        version, hdr_len = struct.unpack("<II", fh.read(8))
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(hdr_len).decode("utf-8"))
        tensors = {}
        for entry in header["tensors"]:
            mat = read_matrix(fh)
            tensors[entry["name"]] = torch.from_numpy(mat.reshape(entry["shape"]).copy())
    return header["config"], tensors, header.get("sections", {})
