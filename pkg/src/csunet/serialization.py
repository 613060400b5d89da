"""Binary raw-tensor container and checkpoint files.

Raw tensor record (all integers little-endian)::

    4s  magic  b"CSUT"
    u16 version (1)
    u8  dtype code  (1 f32, 2 f64, 3 i64, 4 i32, 5 u8, 6 u16)
    u8  ndim
    u64 * ndim extents
    payload, row-major little-endian

Checkpoint::

    4s  magic  b"CSUC"
    u16 version (1)
    u64 manifest length in bytes
    manifest (UTF-8 JSON)
    data section: concatenated raw tensor records

The manifest's ``tensors`` entry maps dotted names (``params.<name>``,
``optim.exp_avg.<name>``, ``optim.exp_avg_sq.<name>``) to ``[offset, nbytes]``
relative to the start of the data section.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

TENSOR_MAGIC = b"CSUT"
CKPT_MAGIC = b"CSUC"
TENSOR_VERSION = 1
CKPT_VERSION = 1

_CODES = {
    np.dtype(np.float32): 1,
    np.dtype(np.float64): 2,
    np.dtype(np.int64): 3,
    np.dtype(np.int32): 4,
    np.dtype(np.uint8): 5,
    np.dtype(np.uint16): 6,
}
_DTYPES = {v: k for k, v in _CODES.items()}


class FormatError(ValueError):
    """Malformed or version-incompatible file."""


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("=")
    if dt not in _CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    head = TENSOR_MAGIC + struct.pack("<HBB", TENSOR_VERSION, _CODES[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dt.newbyteorder("<")).tobytes()


def decode_tensor(buf: bytes | memoryview, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one record at ``offset``; returns the array and the offset just past it."""
    buf = memoryview(buf)
    if bytes(buf[offset : offset + 4]) != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic at offset {offset}")
    try:
        version, code, ndim = struct.unpack_from("<HBB", buf, offset + 4)
    except struct.error as e:
        raise FormatError("truncated tensor header") from e
    if version != TENSOR_VERSION:
        raise FormatError(f"tensor record version {version}, this build reads {TENSOR_VERSION}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    pos = offset + 8
    shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
    pos += 8 * ndim
    dt = _DTYPES[code].newbyteorder("<")
    nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if pos + nbytes > len(buf):
        raise FormatError("truncated tensor payload")
    arr = np.frombuffer(buf[pos : pos + nbytes], dtype=dt).reshape(shape).astype(_DTYPES[code])
    return arr, pos + nbytes


def save_tensor(path: str | os.PathLike, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    arr, _ = decode_tensor(Path(path).read_bytes())
    return arr


def save_checkpoint(path: str | os.PathLike, tensors: Mapping[str, np.ndarray], meta: Mapping) -> None:
    """Write named arrays plus JSON metadata; the file is replaced atomically."""
    blobs = []
    index = {}
    offset = 0
    for name, arr in tensors.items():
        b = encode_tensor(arr)
        index[name] = [offset, len(b)]
        blobs.append(b)
        offset += len(b)
    manifest = dict(meta)
    manifest["format_version"] = CKPT_VERSION
    manifest["tensors"] = index
    mbytes = json.dumps(manifest, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<HQ", CKPT_VERSION, len(mbytes)))
        f.write(mbytes)
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)


def read_manifest(buf: bytes) -> tuple[dict, int]:
    if buf[:4] != CKPT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    try:
        version, mlen = struct.unpack_from("<HQ", buf, 4)
    except struct.error as e:
        raise FormatError("truncated checkpoint header") from e
    if version != CKPT_VERSION:
        raise FormatError(f"checkpoint format version {version}, this build reads {CKPT_VERSION}")
    start = 4 + 10
    try:
        manifest = json.loads(buf[start : start + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError("corrupt checkpoint manifest") from e
    return manifest, start + mlen


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(tensors, manifest)``; raises FormatError on version mismatch."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise FormatError(f"{path}: {e}") from e
    manifest, data_start = read_manifest(buf)
    tensors = {}
    for name, (off, nbytes) in manifest["tensors"].items():
        arr, end = decode_tensor(buf, data_start + off)
        if end - (data_start + off) != nbytes:
            raise FormatError(f"{path}: record {name} length mismatch")
        tensors[name] = arr
    return tensors, manifest
