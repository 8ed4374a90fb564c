"""MPCK: named-section parameter checkpoints, little-endian like the FMAP format.

Layout (all integers little-endian):

    magic      4 bytes  b"MPCK"
    version    u8       1
    dtype      u8       0 = f32, 1 = f64 (applies to every section)
    meta_len   u32
    meta       meta_len bytes of UTF-8 JSON (architecture and training config)
    n_sections u32
    n_sections times:
        name_len u16
        name     name_len bytes UTF-8
        ndim     u8
        dims     ndim x u32
        values   prod(dims) values, row-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from mpda.feature_core import (
    DTYPE_F32,
    DTYPE_F64,
    MAX_PAYLOAD_BYTES,
    BadMagicError,
    DimensionOverflowError,
    FmapError,
    TruncatedPayloadError,
    VersionMismatchError,
)

CKPT_MAGIC = b"MPCK"
CKPT_VERSION = 1
_NP_DTYPES = {DTYPE_F32: "<f4", DTYPE_F64: "<f8"}


def encode_checkpoint(tensors: dict[str, torch.Tensor], meta: dict, dtype_code: int = DTYPE_F32) -> bytes:
    np_dtype = _NP_DTYPES[dtype_code]
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = [struct.pack("<4sBBI", CKPT_MAGIC, CKPT_VERSION, dtype_code, len(meta_bytes)), meta_bytes]
    out.append(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy().astype(np_dtype)
        name_b = name.encode("utf-8")
        out.append(struct.pack("<H", len(name_b)) + name_b)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes(order="C"))
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedPayloadError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def decode_checkpoint(buf: bytes) -> tuple[dict[str, torch.Tensor], dict]:
    if buf[:4] != CKPT_MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {CKPT_MAGIC!r}")
    r = _Reader(buf)
    _, version, dtype_code, meta_len = r.unpack("<4sBBI")
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, reader supports {CKPT_VERSION}")
    if dtype_code not in _NP_DTYPES:
        raise FmapError(f"unsupported checkpoint dtype code {dtype_code}")
    np_dtype = np.dtype(_NP_DTYPES[dtype_code])
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    (n,) = r.unpack("<I")
    tensors = {}
    for _ in range(n):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        if count * np_dtype.itemsize > MAX_PAYLOAD_BYTES:
            raise DimensionOverflowError(f"section {name!r} too large: {dims}")
        arr = np.frombuffer(r.take(count * np_dtype.itemsize), dtype=np_dtype).reshape(dims)
        tensors[name] = torch.from_numpy(arr.copy())
    if r.pos != len(buf):
        raise FmapError(f"{len(buf) - r.pos} trailing bytes in checkpoint")
    return tensors, meta


def save_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict, dtype_code: int = DTYPE_F32):
    Path(path).write_bytes(encode_checkpoint(tensors, meta, dtype_code))


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    return decode_checkpoint(Path(path).read_bytes())


def dtype_code_for(dtype: torch.dtype) -> int:
    return DTYPE_F64 if dtype == torch.float64 else DTYPE_F32
