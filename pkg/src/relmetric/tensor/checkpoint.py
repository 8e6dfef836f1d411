"""Versioned binary checkpoint format.

Layout (all integers little-endian)::

    magic         8 bytes   b"RMETCKPT"
    version       uint32    currently 1
    meta_len      uint32    length of the UTF-8 metadata blob
    meta          bytes     ``key=value`` lines
    n_params      uint32
    n_params x record
    n_opt         uint32
    n_opt x record

    record:
      name_len    uint16
      name        UTF-8 bytes
      ndim        uint8
      dims        ndim x uint32
      data        prod(dims) x float64 (little-endian, C order)

Optimizer-state records use names such as ``velocity/<param>`` or
``adam_m/<param>``; scalar state (e.g. the Adam step counter) is stored as a
0-d record.
"""

from __future__ import annotations

import struct

import numpy as np

from ..errors import FormatError

MAGIC = b"RMETCKPT"
VERSION = 1


def _write_record(buf, name, arr):
    arr = np.asarray(arr, dtype="<f8", order="C")
    raw = name.encode("utf-8")
    buf += struct.pack("<H", len(raw)) + raw
    buf += struct.pack("<B", arr.ndim)
    buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
    buf += arr.tobytes()


def dumps(params, optimizer_state=None, metadata=None):
    """Serialize named arrays to bytes.

    Args:
        params: mapping name -> ndarray; iteration order is preserved.
        optimizer_state: optional mapping name -> ndarray.
        metadata: optional mapping of str -> str (no newlines or ``=`` in keys).
    """
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", VERSION)
    meta = "".join(f"{k}={v}\n" for k, v in (metadata or {}).items()).encode("utf-8")
    buf += struct.pack("<I", len(meta)) + meta
    for section in (params, optimizer_state or {}):
        buf += struct.pack("<I", len(section))
        for name, arr in section.items():
            _write_record(buf, name, arr)
    return bytes(buf)


def loads(data):
    """Inverse of :func:`dumps`; returns ``(params, optimizer_state, metadata)``."""
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(8)) != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<I", take(4))
    meta = {}
    for line in bytes(take(meta_len)).decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        meta[key] = value

    sections = []
    for _ in range(2):
        (count,) = struct.unpack("<I", take(4))
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", take(2))
            name = bytes(take(nlen)).decode("utf-8")
            (ndim,) = struct.unpack("<B", take(1))
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
            n = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(bytes(take(8 * n)), dtype="<f8").astype(np.float64).reshape(shape)
            out[name] = arr
        sections.append(out)
    if pos != len(view):
        raise FormatError("trailing bytes after checkpoint")
    return sections[0], sections[1], meta


def save(path, params, optimizer_state=None, metadata=None):
    with open(path, "wb") as fh:
        fh.write(dumps(params, optimizer_state, metadata))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
