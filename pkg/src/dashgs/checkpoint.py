"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"DASH" | u32 version | u32 meta_len | meta (UTF-8 JSON) | u32 n_arrays
    per array: u16 name_len | name | u8 dtype | u8 ndim | u32 dims[ndim] | payload
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MalformedHeaderError, NotACheckpointError, UnexpectedEOFError, VersionMismatchError

MAGIC = b"DASH"
VERSION = 1

_DTYPES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i4"),
    3: np.dtype("<i8"),
    4: np.dtype("u1"),
}


@dataclass
class Checkpoint:
    arrays: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _dtype_code(arr):
    key = arr.dtype.newbyteorder("<")
    for code, dt in _DTYPES.items():
        if key == dt:
            return code
    raise TypeError(f"unsupported checkpoint dtype {arr.dtype}")


def dumps(ckpt):
    buf = io.BytesIO()
    meta = json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(ckpt.arrays)))
    for name in sorted(ckpt.arrays):
        arr = np.asarray(ckpt.arrays[name])
        if arr.dtype == np.bool_:
            arr = arr.astype(np.uint8)
        code = _dtype_code(arr)
        dt = _DTYPES[code]
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack("<%dI" % arr.ndim, *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise UnexpectedEOFError()
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data):
    if len(data) < 4 or data[:4] != MAGIC:
        raise NotACheckpointError()
    r = _Reader(data)
    r.take(4)
    version, meta_len = r.unpack("<II")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version} != {VERSION}")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"checkpoint metadata: {exc}") from None
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise MalformedHeaderError(f"array {name!r}: unknown dtype code {code}")
        shape = r.unpack("<%dI" % ndim)
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arrays[name] = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(data):
        raise MalformedHeaderError("trailing bytes after last array")
    return Checkpoint(arrays, meta)


def save_checkpoint(ckpt, path):
    Path(path).write_bytes(dumps(ckpt))


def load_checkpoint(path):
    return loads(Path(path).read_bytes())
