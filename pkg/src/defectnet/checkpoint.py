"""Binary checkpoint format.

Layout::

    b"PNET1"                      magic
    uint32 LE                     format version
    uint32 LE                     header length in bytes
    header (utf-8)                one line per tensor: "<name> <dim> <dim> ...";
                                  optional first line "#meta <json>"
    payload                       float32 LE, tensors concatenated in header order
    uint32 LE                     CRC-32 of everything between magic and checksum

The checksum spans the version, lengths and header as well as the payload,
so an edited shape or metadata line is caught even when sizes still agree.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"PNET1"
VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class HeaderError(CheckpointError):
    pass


class PayloadSizeError(CheckpointError):
    """Header shapes do not account for the payload that is present."""


class ChecksumError(CheckpointError):
    pass


def save_checkpoint(tensors: dict[str, np.ndarray], path, meta: dict | None = None) -> None:
    lines = []
    if meta is not None:
        lines.append("#meta " + json.dumps(meta, sort_keys=True))
    chunks = []
    for name, arr in tensors.items():
        if not name or any(ch.isspace() for ch in name):
            raise ValueError(f"tensor name {name!r} must be non-empty without whitespace")
        arr = np.asarray(arr)
        lines.append(" ".join([name, *map(str, arr.shape)]))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    header = ("\n".join(lines) + "\n").encode("utf-8")
    payload = b"".join(chunks)
    body = struct.pack("<II", VERSION, len(header)) + header + payload
    blob = MAGIC + body + struct.pack("<I", zlib.crc32(body))
    Path(path).write_bytes(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return (ordered name -> float32 array, meta dict)."""
    blob = Path(path).read_bytes()
    if blob[:len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (bad magic {blob[:len(MAGIC)]!r})")
    pos = len(MAGIC)
    if len(blob) < pos + 12:
        raise HeaderError(f"{path}: truncated before header")
    version, header_len = struct.unpack_from("<II", blob, pos)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, this reader supports {VERSION}")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[pos:-4]) != crc:
        raise ChecksumError(f"{path}: checksum mismatch (file truncated or modified)")
    pos += 8
    if len(blob) - 4 < pos + header_len:
        raise HeaderError(f"{path}: header length {header_len} exceeds file size")
    try:
        header = blob[pos:pos + header_len].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise HeaderError(f"{path}: header is not utf-8") from exc
    pos += header_len

    meta, entries = {}, []
    for line in header.splitlines():
        if not line:
            continue
        if line.startswith("#meta "):
            try:
                meta = json.loads(line[6:])
            except json.JSONDecodeError as exc:
                raise HeaderError(f"{path}: bad meta line") from exc
            continue
        name, *dims = line.split()
        try:
            shape = tuple(int(d) for d in dims)
        except ValueError as exc:
            raise HeaderError(f"{path}: bad shape in header line {line!r}") from exc
        if any(d < 0 for d in shape):
            raise HeaderError(f"{path}: negative dimension in {line!r}")
        entries.append((name, shape))

    expected = sum(int(np.prod(s)) for _, s in entries) * 4
    payload = blob[pos:len(blob) - 4]
    if len(payload) != expected:
        raise PayloadSizeError(f"{path}: header shapes need {expected} payload bytes, file holds {len(payload)}")

    tensors, off = {}, 0
    for name, shape in entries:
        n = int(np.prod(shape))
        tensors[name] = np.frombuffer(payload, dtype="<f4", count=n, offset=off).astype(np.float32).reshape(shape)
        off += 4 * n
    return tensors, meta
