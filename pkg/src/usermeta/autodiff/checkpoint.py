"""Named-tensor checkpoint files.

Layout (little-endian)::

    magic      8 bytes  b"UMCKPT\\x00\\x01"
    version    uint32
    header     uint32 length + UTF-8 ``key=value`` lines
    count      uint32
    per tensor:
        name   uint32 length + UTF-8 bytes
        rank   uint32
        dims   rank x uint32
        data   prod(dims) x float64
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import Tensor

MAGIC = b"UMCKPT\x00\x01"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _format_header(meta: Mapping[str, object]) -> bytes:
    lines = []
    for k, v in meta.items():
        if "=" in k or "\n" in k or "\n" in str(v):
            raise CheckpointError(f"header entry {k!r} is not representable")
        lines.append(f"{k}={v}")
    return "\n".join(lines).encode("utf-8")


def _parse_header(raw: bytes) -> dict[str, str]:
    out = {}
    for line in raw.decode("utf-8").splitlines():
        if line:
            k, _, v = line.partition("=")
            out[k] = v
    return out


def save_tensors(path, tensors: Mapping[str, Tensor | np.ndarray], meta: Mapping[str, object] | None = None) -> None:
    header = _format_header(meta or {})
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(header)), header,
             struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Return ``(arrays, header)`` from a checkpoint file."""
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    (version,) = take("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (hlen,) = take("<I")
    header = _parse_header(buf[pos:pos + hlen])
    pos += hlen
    (count,) = take("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        if pos + 8 * n > len(buf):
            raise CheckpointError(f"{path}: truncated payload for {name}")
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(dims)
        pos += 8 * n
    return arrays, header
