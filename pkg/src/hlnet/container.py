"""Binary tensor container (``.hlt``).

Layout, all integers little-endian::

    "HLT1"                      4 bytes magic
    record count                u32
    per record:
        name length             u16
        name                    UTF-8 bytes
        dtype                   u8   (0 = f32, 1 = f64)
        ndim                    u8   (<= 8)
        dims                    u32 x ndim
        payload                 C-order values, prod(dims) x itemsize bytes
    CRC32 of everything above   u32  (zlib / reflected 0xEDB88320)

Identical records always serialize to identical bytes.
"""

from __future__ import annotations

import os
import struct
import zlib
from collections.abc import Iterable, Mapping

import numpy as np

MAGIC = b"HLT1"
MAX_NDIM = 8

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class ContainerError(Exception):
    """Base class for container parse failures."""


class BadMagicError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class TrailingDataError(ContainerError):
    pass


def _items(records) -> list[tuple[str, np.ndarray]]:
    if isinstance(records, Mapping):
        return list(records.items())
    return list(records)


def dumps(records: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]) -> bytes:
    items = _items(records)
    seen = set()
    out = bytearray(MAGIC)
    out += struct.pack("<I", len(items))
    for name, arr in items:
        if name in seen:
            raise ValueError(f"duplicate record name {name!r}")
        seen.add(name)
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise ValueError(f"record {name!r}: unsupported dtype {arr.dtype} (f32/f64 only)")
        if arr.ndim > MAX_NDIM:
            raise ValueError(f"record {name!r}: ndim {arr.ndim} exceeds {MAX_NDIM}")
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ValueError(f"record name too long ({len(raw_name)} bytes)")
        code = _CODES[arr.dtype]
        out += struct.pack("<H", len(raw_name)) + raw_name
        out += struct.pack("<BB", code, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    out += struct.pack("<I", zlib.crc32(out) & 0xFFFFFFFF)
    return bytes(out)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    """Parse container bytes. Checks magic, then structure, then CRC."""
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    if len(buf) < 12:
        raise TruncatedError(f"file is {len(buf)} bytes, shorter than the 12-byte minimum")
    end = len(buf) - 4
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if n < 0 or pos + n > end:
            raise TruncatedError(f"record data runs past end of file at offset {pos} (+{n})")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ContainerError(f"record name is not valid UTF-8 at offset {pos}") from exc
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise ContainerError(f"record {name!r}: unknown dtype code {code}")
        if ndim > MAX_NDIM:
            raise ContainerError(f"record {name!r}: ndim {ndim} exceeds {MAX_NDIM}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dtype = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        payload = take(nbytes)
        if name in records:
            raise ContainerError(f"duplicate record name {name!r}")
        records[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    if pos != end:
        raise TrailingDataError(f"{end - pos} unexpected bytes before checksum")
    (stored,) = struct.unpack("<I", buf[end:])
    actual = zlib.crc32(buf[:end]) & 0xFFFFFFFF
    if stored != actual:
        raise ChecksumError(f"CRC mismatch: stored {stored:08x}, computed {actual:08x}")
    return records


def write_container(path: str | os.PathLike, records) -> None:
    data = dumps(records)
    with open(path, "wb") as fh:
        fh.write(data)


def read_container(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())


def encode_text(text: str) -> np.ndarray:
    """Store UTF-8 text as an f32 byte vector (the format has no integer dtypes)."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def decode_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr).astype(np.uint8).tolist()).decode("utf-8")
