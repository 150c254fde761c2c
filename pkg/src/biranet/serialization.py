"""Named-tensor container.

Binary layout, all integers little-endian::

    magic      4 bytes   b"BRNT"
    version    1 byte    0x01
    count      u32       number of entries
    entry*     repeated ``count`` times:
        name_len  u32
        name      name_len bytes, UTF-8
        ndim      u32
        dims      ndim × u64
        data      prod(dims) × float64 (IEEE 754, little-endian, row-major)

Entries are written in the order given, so equal inputs produce equal bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"BRNT"
VERSION = 1


class FormatError(ValueError):
    pass


def dumps(tensors):
    """Serialize a mapping ``name -> array`` to bytes."""
    parts = [MAGIC, bytes([VERSION]), struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(getattr(arr, "data", arr), dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads(blob):
    """Inverse of :func:`dumps`; returns an insertion-ordered dict of arrays."""
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise FormatError("not a named-tensor container (bad magic)")
    if view[4] != VERSION:
        raise FormatError(f"unsupported container version {view[4]}")
    (count,) = struct.unpack_from("<I", view, 5)
    pos = 9
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", view, pos)
            pos += 4
            name = bytes(view[pos:pos + nlen]).decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", view, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", view, pos)
            pos += 8 * ndim
            nbytes = 8 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(view):
                raise FormatError(f"truncated data for entry {name!r}")
            arr = np.frombuffer(view[pos:pos + nbytes], dtype="<f8").reshape(shape)
            out[name] = arr.astype(np.float64)
            pos += nbytes
    except struct.error as exc:
        raise FormatError(f"truncated container: {exc}") from None
    if pos != len(view):
        raise FormatError("trailing bytes after last entry")
    return out


def save(path, tensors):
    Path(path).write_bytes(dumps(tensors))


def load(path):
    return loads(Path(path).read_bytes())
