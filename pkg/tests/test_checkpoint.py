import struct

import pytest
import torch
from hypothesis import given, strategies as st

from mpda.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from mpda.feature_core import DTYPE_F64, BadMagicError, FmapError, TruncatedPayloadError, VersionMismatchError
from mpda.training import TrainedSystem


def sample_tensors(gen, dtype=torch.float32):
    return {
        "a.weight": torch.randn(3, 4, generator=gen).to(dtype),
        "a.bias": torch.randn(4, generator=gen).to(dtype),
        "scalar": torch.tensor(2.5, dtype=dtype),
        "ünïcode": torch.randn(2, 1, 3, generator=gen).to(dtype),
    }


def test_layout_of_a_single_section():
    buf = encode_checkpoint({"w": torch.tensor([1.0, 2.0])}, {})
    assert buf[:6] == b"MPCK\x01\x00"
    (meta_len,) = struct.unpack_from("<I", buf, 6)
    assert buf[10 : 10 + meta_len] == b"{}"
    rest = buf[10 + meta_len :]
    assert rest == struct.pack("<IH", 1, 1) + b"w" + struct.pack("<BI", 1, 2) + struct.pack("<2f", 1.0, 2.0)


@pytest.mark.parametrize("dtype,code", [(torch.float32, 0), (torch.float64, DTYPE_F64)])
def test_round_trip_bit_exact(gen, tmp_path, dtype, code):
    tensors = sample_tensors(gen, dtype)
    save_checkpoint(tmp_path / "c.mpck", tensors, {"k": [1, 2]}, code)
    back, meta = load_checkpoint(tmp_path / "c.mpck")
    assert meta == {"k": [1, 2]}
    assert list(back) == list(tensors)
    for name, t in tensors.items():
        assert back[name].dtype == dtype and torch.equal(back[name], t)


@given(st.lists(st.integers(1, 4), min_size=0, max_size=4), st.integers(0, 2**31 - 1))
def test_round_trip_shapes(shape, seed):
    t = torch.randn(tuple(shape), generator=torch.Generator().manual_seed(seed))
    back, _ = decode_checkpoint(encode_checkpoint({"t": t}, {}))
    assert back["t"].shape == t.shape and torch.equal(back["t"], t)


def test_errors(gen):
    buf = encode_checkpoint(sample_tensors(gen), {"x": 1})
    with pytest.raises(BadMagicError):
        decode_checkpoint(b"XPCK" + buf[4:])
    with pytest.raises(VersionMismatchError):
        decode_checkpoint(buf[:4] + b"\x09" + buf[5:])
    with pytest.raises(TruncatedPayloadError):
        decode_checkpoint(buf[:-1])
    with pytest.raises(FmapError):
        decode_checkpoint(buf + b"\x00")
    with pytest.raises(FmapError):
        decode_checkpoint(buf[:5] + b"\x07" + buf[6:])


def test_trained_system_round_trip(tiny_run, tmp_path):
    system, _ = tiny_run
    system.save(tmp_path / "sys.mpck")
    back = TrainedSystem.load(tmp_path / "sys.mpck")
    assert back.cfg == system.cfg
    for key, value in system.state().items():
        assert torch.equal(back.state()[key], value), key


def test_rejects_foreign_checkpoint(tmp_path):
    save_checkpoint(tmp_path / "x.mpck", {}, {"format": "other"})
    with pytest.raises(ValueError):
        TrainedSystem.load(tmp_path / "x.mpck")
