"""Feature-map value type, bilinear resizing, visualization and the FMAP wire format.

All maps are channels-last ``[agents, height, width, channels]`` tensors.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

FMAP_MAGIC = b"FMAP"
FMAP_VERSION = 1
DTYPE_F32 = 0
DTYPE_F64 = 1

# magic, version, dtype, domain_id, A, H, W, C
_HEADER = struct.Struct("<4sBBIIIII")
# refuse payloads above 16 GiB; a corrupted header should never trigger a huge allocation
MAX_PAYLOAD_BYTES = 1 << 34


class Precision(enum.Enum):
    F32 = "f32"
    F64 = "f64"

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float32 if self is Precision.F32 else torch.float64

    @classmethod
    def of(cls, dtype: torch.dtype) -> "Precision":
        if dtype == torch.float32:
            return cls.F32
        if dtype == torch.float64:
            return cls.F64
        raise ValueError(f"unsupported dtype {dtype}")


@dataclass(frozen=True)
class FeatureMap:
    """A stack of BEV feature maps, one slice per agent.

    ``data`` is ``[A, H, W, C]``. The map is treated as immutable: operations
    return new instances and never write into ``data``.
    """

    data: torch.Tensor
    domain_id: int = 0
    agent_ids: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if not isinstance(self.data, torch.Tensor):
            object.__setattr__(self, "data", torch.as_tensor(self.data))
        if self.data.dtype not in (torch.float32, torch.float64):
            raise ValueError(f"FeatureMap data must be f32 or f64, got {self.data.dtype}")
        if self.data.dim() != 4:
            raise ValueError(f"FeatureMap data must be rank 4 [A,H,W,C], got shape {tuple(self.data.shape)}")
        if min(self.data.shape) < 1:
            raise ValueError(f"all FeatureMap dims must be >= 1, got {tuple(self.data.shape)}")
        ids = tuple(int(i) for i in self.agent_ids) if self.agent_ids else tuple(range(self.data.shape[0]))
        if len(ids) != self.data.shape[0]:
            raise ValueError(f"{len(ids)} agent ids for {self.data.shape[0]} agents")
        object.__setattr__(self, "agent_ids", ids)
        if not bool(torch.isfinite(self.data.detach()).all()):
            raise ValueError("FeatureMap contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]

    @property
    def agents(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    @property
    def precision(self) -> Precision:
        return Precision.of(self.data.dtype)

    def with_data(self, data: torch.Tensor, agent_ids: Sequence[int] | None = None) -> "FeatureMap":
        """Same metadata, new payload (agent ids are kept when the agent count is unchanged)."""
        if agent_ids is None:
            agent_ids = self.agent_ids if data.shape[0] == self.agents else ()
        return FeatureMap(data, self.domain_id, tuple(agent_ids))

    def to(self, precision: Precision) -> "FeatureMap":
        return self.with_data(self.data.to(precision.torch_dtype))


@dataclass(frozen=True)
class ResizePolicy:
    mode: str = "bilinear"
    align_corners: bool = True

    def __post_init__(self):
        if self.mode != "bilinear":
            raise ValueError(f"only bilinear resizing is supported, got {self.mode!r}")


DEFAULT_POLICY = ResizePolicy()


def resize_tensor(x: torch.Tensor, out_h: int, out_w: int, policy: ResizePolicy = DEFAULT_POLICY) -> torch.Tensor:
    """Bilinear resize of a channels-last ``[A, H, W, C]`` tensor."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    if x.shape[1] == out_h and x.shape[2] == out_w:
        return x
    y = F.interpolate(
        x.permute(0, 3, 1, 2), size=(out_h, out_w), mode="bilinear", align_corners=policy.align_corners
    )
    return y.permute(0, 2, 3, 1)


def bilinear_resize(fm: FeatureMap, out_h: int, out_w: int, policy: ResizePolicy = DEFAULT_POLICY) -> FeatureMap:
    return fm.with_data(resize_tensor(fm.data, out_h, out_w, policy))


def abs_channel_sum(fm: FeatureMap) -> torch.Tensor:
    """Per-pixel sum of absolute channel values, shape ``[A, H, W]``."""
    return fm.data.abs().sum(dim=-1)


class FmapError(ValueError):
    """Malformed FMAP file."""


class BadMagicError(FmapError):
    pass


class VersionMismatchError(FmapError):
    pass


class TruncatedPayloadError(FmapError):
    pass


class DimensionOverflowError(FmapError):
    pass


def encode_fmap(fm: FeatureMap) -> bytes:
    a, h, w, c = fm.shape
    header = _HEADER.pack(FMAP_MAGIC, FMAP_VERSION, DTYPE_F32, fm.domain_id, a, h, w, c)
    ids = np.asarray(fm.agent_ids, dtype="<u4").tobytes()
    payload = fm.data.detach().cpu().numpy().astype("<f4", copy=False).tobytes(order="C")
    return header + ids + payload


def decode_fmap(buf: bytes) -> FeatureMap:
    if len(buf) < 4 or buf[:4] != FMAP_MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {FMAP_MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedPayloadError(f"header needs {_HEADER.size} bytes, file has {len(buf)}")
    _, version, dtype, domain_id, a, h, w, c = _HEADER.unpack_from(buf)
    if version != FMAP_VERSION:
        raise VersionMismatchError(f"FMAP version {version}, reader supports {FMAP_VERSION}")
    if dtype != DTYPE_F32:
        raise FmapError(f"unsupported FMAP dtype code {dtype}")
    if min(a, h, w, c) < 1:
        raise DimensionOverflowError(f"zero dimension in header: {(a, h, w, c)}")
    count = a * h * w * c
    if count * 4 > MAX_PAYLOAD_BYTES:
        raise DimensionOverflowError(f"payload of {count} values exceeds {MAX_PAYLOAD_BYTES} bytes")
    ids_end = _HEADER.size + 4 * a
    end = ids_end + 4 * count
    if len(buf) < end:
        raise TruncatedPayloadError(f"expected {end} bytes, got {len(buf)}")
    if len(buf) > end:
        raise FmapError(f"{len(buf) - end} trailing bytes after payload")
    ids = np.frombuffer(buf, dtype="<u4", count=a, offset=_HEADER.size)
    values = np.frombuffer(buf, dtype="<f4", count=count, offset=ids_end).reshape(a, h, w, c)
    data = torch.from_numpy(values.astype(np.float32))
    return FeatureMap(data, int(domain_id), tuple(int(i) for i in ids))


def write_fmap(fm: FeatureMap, path: str | Path) -> None:
    Path(path).write_bytes(encode_fmap(fm))


def read_fmap(path: str | Path) -> FeatureMap:
    return decode_fmap(Path(path).read_bytes())


def normalize_to_u8(img: np.ndarray) -> np.ndarray:
    """Min-max normalize to 0..255 with round-half-up; constant images map to 0."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(), img.max()
    if hi <= lo:
        return np.zeros(img.shape, dtype=np.uint8)
    scaled = (img - lo) * (255.0 / (hi - lo))
    return np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8)


def write_pgm(img: np.ndarray, path: str | Path) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def viz_paths(fm: FeatureMap, path: str | Path) -> list[Path]:
    path = Path(path)
    if fm.agents == 1:
        return [path]
    suffix = path.suffix or ".pgm"
    return [path.with_name(f"{path.stem}_agent{aid}{suffix}") for aid in fm.agent_ids]


def viz_export(fm: FeatureMap, path: str | Path) -> list[Path]:
    """Write one 8-bit PGM per agent from the absolute channel sum.

    A single-agent map is written to ``path`` itself; otherwise each agent
    gets ``<stem>_agent<id><suffix>``. Returns the written paths.
    """
    sums = abs_channel_sum(fm).detach().cpu().numpy()
    paths = viz_paths(fm, path)
    for img, p in zip(sums, paths):
        write_pgm(normalize_to_u8(img), p)
    return paths
