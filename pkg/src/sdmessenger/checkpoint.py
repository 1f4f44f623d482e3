"""Single-file checkpoint archive.

Layout (all integers little-endian)::

    magic       8 bytes   b"SDMCKPT\\0"
    version     u32       FORMAT_VERSION
    header_len  u32
    header      header_len bytes of UTF-8 ``key=value`` lines
    n_tensors   u32
    n_tensors times:
        name_len u16, name (UTF-8)
        dtype_len u8, dtype name (e.g. ``float32``)
        ndim u8, shape as ndim x u64
        nbytes u64, row-major little-endian data
    digest      32 bytes  SHA-256 of everything above

Values round-trip bit-exactly.
"""

from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"SDMCKPT\0"
FORMAT_VERSION = 1

_DTYPES = {
    "float32": torch.float32,
    "float64": torch.float64,
    "int64": torch.int64,
    "int32": torch.int32,
    "uint8": torch.uint8,
}
_NAMES = {v: k for k, v in _DTYPES.items()}


def format_header(header: dict[str, object]) -> str:
    lines = []
    for key, value in header.items():
        text = str(value)
        if "\n" in text or "=" in key:
            raise CheckpointError(f"header entry {key!r} cannot be stored as key=value")
        lines.append(f"{key}={text}")
    return "\n".join(lines) + "\n"


def parse_header(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if line:
            key, _, value = line.partition("=")
            out[key] = value
    return out


def save_archive(path: str | Path, header: dict[str, object], tensors: dict[str, torch.Tensor]):
    path = Path(path)
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    head = format_header(header).encode()
    chunks += [struct.pack("<I", len(head)), head, struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _NAMES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name!r}")
        raw_name, dtype = name.encode(), _NAMES[t.dtype].encode()
        data = t.numpy().astype(t.numpy().dtype.newbyteorder("<"), copy=False).tobytes()
        chunks += [struct.pack("<H", len(raw_name)), raw_name, struct.pack("<B", len(dtype)), dtype,
                   struct.pack("<B", t.dim()), struct.pack(f"<{t.dim()}Q", *t.shape),
                   struct.pack("<Q", len(data)), data]
    body = b"".join(chunks)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + hashlib.sha256(body).digest())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_archive(path: str | Path) -> tuple[dict[str, str], dict[str, torch.Tensor]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if len(blob) < len(MAGIC) + 4 + 32 or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint archive (bad magic or truncated)")
    (version,) = struct.unpack("<I", blob[len(MAGIC):len(MAGIC) + 4])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt)")
    r = _Reader(body)
    r.take(len(MAGIC) + 4)
    (head_len,) = r.unpack("<I")
    header = parse_header(r.take(head_len).decode())
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode()
        (n,) = r.unpack("<B")
        dtype = _DTYPES[r.take(n).decode()]
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        (nbytes,) = r.unpack("<Q")
        np_dtype = torch.empty((), dtype=dtype).numpy().dtype.newbyteorder("<")
        arr = np.frombuffer(r.take(nbytes), dtype=np_dtype).reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    if r.pos != len(body):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return header, tensors
