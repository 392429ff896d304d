"""VLTP1 tensor container: checkpoints and dataset payloads.

Layout (all little-endian): magic ``VLTP1\\0``, u32 tensor count, then per
tensor a u16 name length, the UTF-8 name, a u8 rank, ``rank`` u32 dims, and
the raw float32 payload in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import NumericsError, Tensor

MAGIC = b"VLTP1\x00"


class FormatError(ValueError):
    """Raised on malformed VLTP1 files."""


def save_tensors(path, tensors: dict) -> None:
    """Write a name -> Tensor/ndarray mapping. Insertion order is preserved."""
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        arr = np.ascontiguousarray(
            t.data if isinstance(t, Tensor) else np.asarray(t), dtype="<f4")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name!r}")
        if arr.ndim > 0xFF:
            raise FormatError(f"tensor rank too large: {arr.ndim}")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path) -> dict:
    """Read a VLTP1 file back into name -> float32 ndarray."""
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic bytes")
    off = len(MAGIC)

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(blob):
            raise FormatError(f"{path}: truncated file")
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    (count,) = take("<I")
    out = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = take("<B")
        dims = take(f"<{rank}I")
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        nbytes = 4 * n
        if off + nbytes > len(blob):
            raise FormatError(f"{path}: truncated payload for {name!r}")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(dims)
        off += nbytes
        out[name] = np.ascontiguousarray(arr)
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes")
    return out


def save_params(path, params: dict) -> None:
    save_tensors(path, params)


def load_params(path, template: dict) -> None:
    """Load arrays into an existing name -> Tensor dict, checking shapes."""
    arrays = load_tensors(path)
    missing = set(template) - set(arrays)
    if missing:
        raise FormatError(f"{path}: missing parameters {sorted(missing)[:5]}")
    for name, tensor in template.items():
        arr = arrays[name]
        if arr.shape != tensor.data.shape:
            raise NumericsError(
                f"{name}: checkpoint shape {arr.shape} != model shape {tensor.data.shape}")
        tensor.data = np.ascontiguousarray(arr, dtype=tensor.data.dtype)
