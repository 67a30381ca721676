"""Binary container shared by checkpoints and dataset caches.

Layout (all integers little-endian)::

    b"DBSE" | u8 version | u32 len | UTF-8 key=value block
    repeated: u32 name_len | name | u32 rank | u64 dims[rank] | f64 payload (row-major)

The key=value block carries ``n_tensors`` so a file cut at a tensor boundary
is still detected as truncated.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DBSE"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Raised for unreadable, truncated or incompatible container files."""


def encode_kv(pairs: dict[str, str]) -> str:
    lines = []
    for k in sorted(pairs):
        v = str(pairs[k])
        if "\n" in v or "=" in k:
            raise ValueError(f"cannot encode key {k!r}")
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


def decode_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        k, sep, v = line.partition("=")
        if not sep:
            raise FormatError(f"malformed config line {line!r}")
        out[k.strip()] = v.strip()
    return out


def to_bytes(meta: dict[str, str], tensors: dict[str, np.ndarray]) -> bytes:
    meta = dict(meta)
    meta["n_tensors"] = str(len(tensors))
    header = encode_kv(meta).encode("utf-8")
    chunks = [MAGIC, struct.pack("<B", FORMAT_VERSION), struct.pack("<I", len(header)), header]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")  # keeps rank 0, unlike ascontiguousarray
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    return b"".join(chunks)


def from_bytes(buf: bytes) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    if len(buf) < 9 or buf[:4] != MAGIC:
        raise FormatError("bad magic bytes: not a DBSE file")
    version = buf[4]
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    pos = 5

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError("truncated file")
        out = buf[pos:pos + n]
        pos += n
        return out

    (hlen,) = struct.unpack("<I", take(4))
    try:
        meta = decode_kv(take(hlen).decode("utf-8"))
    except UnicodeDecodeError:
        raise FormatError("config block is not valid UTF-8") from None
    try:
        n_tensors = int(meta.pop("n_tensors"))
    except (KeyError, ValueError):
        raise FormatError("config block lacks n_tensors") from None
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
        tensors[name] = arr
    if pos != len(buf):
        raise FormatError("trailing bytes after last tensor")
    return meta, tensors


def write_file(path, meta: dict[str, str], tensors: dict[str, np.ndarray]) -> None:
    """Atomic write: the target is either the old file or the complete new one."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(meta, tensors))
    os.replace(tmp, path)


def read_file(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    return from_bytes(Path(path).read_bytes())
