"""Named tensor archive (.nta): a small little-endian container for arrays.

Layout::

    b"NTAR" | u32 version=1 | u64 count
    per entry: u32 name_len | utf-8 name | u8 dtype | u8 rank | rank x u64 dims | payload
    u32 CRC32 of every preceding byte

dtype codes are 0=float32, 1=uint8, 2=int64. Used for weights,
checkpoints and datasets alike.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from typing import Mapping

import numpy as np

from .errors import IntegrityError, UsageError

MAGIC = b"NTAR"
VERSION = 1
_CODES = {np.dtype("<f4"): 0, np.dtype("u1"): 1, np.dtype("<i8"): 2}
_DTYPES = {v: k for k, v in _CODES.items()}


def _normalize(name: str, arr) -> np.ndarray:
    a = np.asarray(arr)
    dt = a.dtype.newbyteorder("<") if a.dtype.byteorder == ">" else a.dtype
    if dt not in _CODES:
        raise UsageError(f"entry {name!r}: dtype {a.dtype} not storable (float32, uint8, int64 only)")
    return a.astype(dt, order="C", copy=False)


def encode(entries: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<IQ", VERSION, len(entries))]
    for name, arr in entries.items():
        a = _normalize(name, arr)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<BB", _CODES[a.dtype], a.ndim))
        chunks.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        chunks.append(a.tobytes(order="C"))
    body = b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(buf: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    if len(buf) < 20:
        raise IntegrityError(f"{source}: truncated archive ({len(buf)} bytes)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise IntegrityError(f"{source}: checksum mismatch (corrupt or truncated)")
    if body[:4] != MAGIC:
        raise IntegrityError(f"{source}: bad magic {body[:4]!r}")
    version, count = struct.unpack_from("<IQ", body, 4)
    if version != VERSION:
        raise IntegrityError(f"{source}: unsupported version {version}")
    off = 16
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, off)
            off += 4
            name = body[off:off + n].decode("utf-8")
            off += n
            code, rank = struct.unpack_from("<BB", body, off)
            off += 2
            dims = struct.unpack_from(f"<{rank}Q", body, off)
            off += 8 * rank
            dt = _DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if off + nbytes > len(body):
                raise IntegrityError(f"{source}: entry {name!r} runs past end of archive")
            out[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(dims).copy()
            off += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise IntegrityError(f"{source}: malformed entry table ({exc})") from None
    if off != len(body):
        raise IntegrityError(f"{source}: {len(body) - off} trailing bytes")
    return out


def write(path, entries: Mapping[str, np.ndarray]) -> bytes:
    """Encode and write atomically; returns the bytes written."""
    data = encode(entries)
    write_bytes(path, data)
    return data


def write_bytes(path, data: bytes) -> None:
    """A crash never leaves a half-written file at ``path``."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".nta-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode(fh.read(), os.fspath(path))


def pack_json(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()


def unpack_json(arr: np.ndarray):
    return json.loads(bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8"))
