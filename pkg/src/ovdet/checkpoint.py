"""Versioned binary container for named arrays (model checkpoints, image packs).

Byte layout (all integers little-endian, all text UTF-8):

    offset  size  field
    0       4     magic  b"OVCK"
    4       4     uint32 format version (currently 1)
    8       2     uint16 H = length of structural-hash string
    10      H     structural hash (hex digits)
    10+H    4     uint32 M = length of metadata JSON blob
    ..      M     metadata JSON (canonical: sorted keys, compact separators)
    ..      4     uint32 R = number of records

    then R records, sorted by name:
    ..      2     uint16 L = length of record name
    ..      L     record name
    ..      1     uint8 dtype code (0=float32, 1=float64, 2=int32, 3=int64, 4=uint8)
    ..      1     uint8 D = number of dimensions
    ..      4*D   uint32 dimensions, outermost first
    ..      *     raw little-endian scalars, row-major

Round-trips are lossless; writing the same arrays, hash and metadata twice
produces byte-identical files.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"OVCK"
VERSION = 1

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i4"): 2,
    np.dtype("<i8"): 3,
    np.dtype("|u1"): 4,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    structural_hash: str = ""
    metadata: dict = field(default_factory=dict)

    def namespaces(self) -> set[str]:
        return {name.split(".", 1)[0] for name in self.arrays}


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, arrays: dict[str, np.ndarray], structural_hash: str = "", metadata: dict | None = None) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    h = structural_hash.encode("utf-8")
    buf.write(struct.pack("<H", len(h)))
    buf.write(h)
    meta = _canonical_json(metadata or {})
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    names = sorted(arrays)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        arr = np.asarray(arrays[name])  # tobytes() below always emits row-major
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for record {name!r}")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
        buf.write(arr.astype(dt, copy=False).tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    view = memoryview(raw)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint container (bad magic)")
    (version,) = struct.unpack_from("<I", view, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported container version {version}")
    off = 8
    (hlen,) = struct.unpack_from("<H", view, off)
    off += 2
    shash = bytes(view[off : off + hlen]).decode("utf-8")
    off += hlen
    (mlen,) = struct.unpack_from("<I", view, off)
    off += 4
    metadata = json.loads(bytes(view[off : off + mlen]).decode("utf-8")) if mlen else {}
    off += mlen
    (count,) = struct.unpack_from("<I", view, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", view, off)
        off += 2
        name = bytes(view[off : off + nlen]).decode("utf-8")
        off += nlen
        code, ndim = struct.unpack_from("<BB", view, off)
        off += 2
        dims = struct.unpack_from(f"<{ndim}I", view, off) if ndim else ()
        off += 4 * ndim
        dtype = _CODE_DTYPES.get(code)
        if dtype is None:
            raise CheckpointError(f"{path}: unknown dtype code {code} in record {name!r}")
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        arr = np.frombuffer(view[off : off + nbytes], dtype=dtype).reshape(dims).copy()
        off += nbytes
        arrays[name] = arr
    return Checkpoint(arrays=arrays, structural_hash=shash, metadata=metadata)
