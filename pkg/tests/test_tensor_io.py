"""On-disk tensor format: byte layout, round trips, malformed input."""

import struct

import numpy as np
import pytest

from mindloop.errors import ContractError
from mindloop import tensor_io


def test_header_layout_matches_spec_bytes():
    arr = np.arange(6, dtype=np.float64).reshape(2, 3)
    raw = tensor_io.tensor_bytes(arr)
    assert raw[:4] == b"MDT1"
    assert raw[4] == 2  # rank
    assert struct.unpack("<Q", raw[5:13])[0] == 2
    assert struct.unpack("<Q", raw[13:21])[0] == 3
    payload = np.frombuffer(raw[21:], dtype="<f8")
    np.testing.assert_array_equal(payload, arr.ravel())  # row-major order
    assert len(raw) == 21 + 6 * 8


def test_roundtrip_various_ranks(tmp_path):
    cases = [
        np.float64(3.5),
        np.arange(4, dtype=np.float64),
        np.random.default_rng(0).normal(size=(3, 4, 5)),
    ]
    for i, arr in enumerate(cases):
        p = tmp_path / f"t{i}.mdt1"
        tensor_io.write_tensor(p, arr)
        back = tensor_io.read_tensor(p)
        assert back.shape == np.shape(arr)
        np.testing.assert_array_equal(back, arr)


def test_bad_magic_rejected(tmp_path):
    p = tmp_path / "bad.mdt1"
    p.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(ContractError, match="magic"):
        tensor_io.read_tensor(p)


def test_truncated_payload_rejected(tmp_path):
    arr = np.ones((4, 4))
    raw = tensor_io.tensor_bytes(arr)
    p = tmp_path / "short.mdt1"
    p.write_bytes(raw[:-8])
    with pytest.raises(ContractError, match="truncated"):
        tensor_io.read_tensor(p)


def test_trailing_bytes_rejected(tmp_path):
    raw = tensor_io.tensor_bytes(np.ones(3))
    p = tmp_path / "extra.mdt1"
    p.write_bytes(raw + b"\x00")
    with pytest.raises(ContractError, match="trailing"):
        tensor_io.read_tensor(p)


def test_checkpoint_bundle_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    tensors = {
        "weights": rng.normal(size=(4, 3)),
        "bias": rng.normal(size=4),
        "table": rng.normal(size=(2, 2, 2)),
    }
    header = {"kind": "demo", "lam": 0.5}
    p = tmp_path / "model.ckpt"
    tensor_io.write_checkpoint(p, header, tensors)
    back_header, back = tensor_io.read_checkpoint(p)
    assert back_header["kind"] == "demo"
    assert back_header["lam"] == 0.5
    assert back_header["tensors"] == ["weights", "bias", "table"]
    for name, arr in tensors.items():
        np.testing.assert_array_equal(back[name], arr)


def test_checkpoint_bad_header(tmp_path):
    p = tmp_path / "junk.ckpt"
    p.write_bytes(struct.pack("<I", 4) + b"@@@@")
    with pytest.raises(ContractError):
        tensor_io.read_checkpoint(p)
