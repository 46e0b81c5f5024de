"""Binary tensor serialization.

Single-tensor files use a small fixed layout:

    magic   4 bytes  b"MDT1"
    rank    u8
    extents rank x u64, little-endian
    payload float64 row-major, little-endian

Model checkpoints bundle a JSON header with several tensors in one file:

    header_len  u32 little-endian
    header      JSON (utf-8); must contain "tensors": [names...]
    blobs       one MDT1 record per name, in header order

The MDT1 records are self-delimiting, so the bundle needs no extra framing.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError

MAGIC = b"MDT1"


def tensor_bytes(array) -> bytes:
    """Serialize one array to MDT1 bytes."""
    arr = np.asarray(array, dtype=np.float64)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    if arr.ndim > 255:
        raise ContractError("tensor rank exceeds the u8 header field")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<B", arr.ndim)
    for extent in arr.shape:
        out += struct.pack("<Q", extent)
    out += arr.astype("<f8", copy=False).tobytes(order="C")
    return bytes(out)


def read_tensor_stream(f) -> np.ndarray:
    """Parse one MDT1 record from a binary stream positioned at its start."""
    magic = f.read(4)
    if magic != MAGIC:
        raise ContractError(f"bad tensor magic {magic!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack("<B", f.read(1))
    shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(rank))
    count = 1
    for extent in shape:
        count *= extent
    payload = f.read(8 * count)
    if len(payload) != 8 * count:
        raise ContractError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def write_tensor(path, array) -> None:
    Path(path).write_bytes(tensor_bytes(array))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        arr = read_tensor_stream(f)
        if f.read(1):
            raise ContractError(f"trailing bytes after tensor in {path}")
    return arr


def write_checkpoint(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write a JSON header plus named MDT1 blobs as one file."""
    header = dict(header)
    header["tensors"] = list(tensors.keys())
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name in header["tensors"]:
            f.write(tensor_bytes(tensors[name]))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ContractError(f"not a checkpoint file: {path}")
    (hlen,) = struct.unpack("<I", raw[:4])
    try:
        header = json.loads(raw[4 : 4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise ContractError(f"unreadable checkpoint header in {path}: {err}") from err
    names = header.get("tensors")
    if not isinstance(names, list):
        raise ContractError(f"checkpoint header lacks a tensor list: {path}")
    f = io.BytesIO(raw[4 + hlen :])
    tensors = {name: read_tensor_stream(f) for name in names}
    if f.read(1):
        raise ContractError(f"trailing bytes after checkpoint tensors in {path}")
    return header, tensors
