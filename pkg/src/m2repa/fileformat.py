"""Binary tensor bundles.

Layout, all integers little-endian::

    magic     4 bytes   b"M2RP"
    version   u32       currently 1
    count     u32       number of records
    record*   name_len u16, name (UTF-8), rank u8, extents u64 * rank,
              dtype u8 (0 = float32), payload (little-endian)
    crc32     u32       zlib CRC-32 of every preceding byte

A tensor file is the same layout holding exactly one record. Text metadata
(the run configuration in checkpoints) is stored as a float32 vector of byte
values; see :func:`text_record` and :func:`record_text`.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"M2RP"
VERSION = 1
DTYPES = {0: np.dtype("<f4")}


class FormatError(ValueError):
    """Malformed or truncated bundle; the message names the byte offset."""

    def __init__(self, msg: str, offset: int):
        self.offset = offset
        super().__init__(f"{msg} (byte offset {offset})")


class ChecksumError(FormatError):
    pass


def encode(records: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr)
        tag, payload = 0, arr.astype("<f4")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"record name too long: {name[:40]}...")
        if arr.ndim > 255:
            raise ValueError(f"rank {arr.ndim} too large for record {name}")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(struct.pack("<B", tag))
        parts.append(np.ascontiguousarray(payload).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    off = 0

    def need(n: int, what: str) -> None:
        # the last 4 bytes are reserved for the CRC trailer
        if off + n > len(buf) - 4:
            raise FormatError(f"truncated file: expected {n} bytes for {what}, "
                              f"{max(len(buf) - 4 - off, 0)} remain before the CRC", off)

    if len(buf) < 16:
        raise FormatError(f"file too short to be a bundle ({len(buf)} bytes)", len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", 0)
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        need(2, "name length")
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        need(nlen, "record name")
        try:
            name = buf[off:off + nlen].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("record name is not valid UTF-8", off) from None
        off += nlen
        if name in out:
            raise FormatError(f"duplicate record name {name!r}", off - nlen)
        need(1, "rank")
        rank = buf[off]
        off += 1
        need(8 * rank, "extents")
        shape = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        need(1, "dtype tag")
        tag = buf[off]
        if tag not in DTYPES:
            raise FormatError(f"unknown dtype tag {tag} in record {name!r}", off)
        off += 1
        dt = DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        need(nbytes, f"payload of {name!r}")
        arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(shape)
        out[name] = arr.astype(np.float32, copy=True)
        off += nbytes
    if off + 4 != len(buf):
        if off + 4 > len(buf):
            raise FormatError("truncated file: missing CRC-32 trailer", off)
        raise FormatError(f"{len(buf) - off - 4} unexpected bytes after last record", off)
    (stored,) = struct.unpack_from("<I", buf, off)
    actual = zlib.crc32(buf[:off]) & 0xFFFFFFFF
    if stored != actual:
        raise ChecksumError(f"CRC-32 mismatch: stored {stored:08x}, computed {actual:08x}", off)
    return out


def save_bundle(path: str | Path, records: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(records))


def load_bundle(path: str | Path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def write_tensor(path: str | Path, arr: np.ndarray, name: str = "tensor") -> None:
    save_bundle(path, {name: np.asarray(arr, dtype=np.float32)})


def read_tensor(path: str | Path) -> tuple[str, np.ndarray]:
    records = load_bundle(path)
    if len(records) != 1:
        raise FormatError(f"tensor file must hold exactly one record, found {len(records)}", 8)
    (name, arr), = records.items()
    return name, arr


def text_record(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def record_text(arr: np.ndarray) -> str:
    codes = np.asarray(arr).reshape(-1)
    if codes.size and (codes.min() < 0 or codes.max() > 255 or np.any(codes != np.round(codes))):
        raise ValueError("record does not hold byte values")
    return codes.astype(np.uint8).tobytes().decode("utf-8")
