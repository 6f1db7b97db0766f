"""Binary formats for embedding tables (``PSHT``) and checkpoints (``PSCK``).

Table layout (little-endian)::

    b"PSHT" | u32 version | u32 dim | u64 count
    count x ( u16 id_len | id utf-8 bytes | dim x f32 )

Checkpoint layout::

    b"PSCK" | u32 version | u32 dim | u64 count | u64 meta_len
    meta_len bytes of UTF-8 JSON | count x f32
"""

from __future__ import annotations

import json
import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np

TABLE_MAGIC = b"PSHT"
CHECKPOINT_MAGIC = b"PSCK"
FORMAT_VERSION = 1

_HEAD = struct.Struct("<4sIIQ")
_F32 = np.dtype("<f4")


class FormatError(ValueError):
    """Raised for malformed, truncated or version-mismatched binary files."""


def sniff(path: str | Path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read(4)


def write_table(path: str | Path, table: Mapping[str, np.ndarray]) -> None:
    ids = list(table)
    if not ids:
        raise FormatError("cannot write an empty table")
    dim = int(np.asarray(table[ids[0]]).size)
    chunks = [_HEAD.pack(TABLE_MAGIC, FORMAT_VERSION, dim, len(ids))]
    for source_id in ids:
        vec = np.asarray(table[source_id], dtype=_F32).ravel()
        if vec.size != dim:
            raise FormatError(f"dimension disagreement for {source_id!r}: {vec.size} != {dim}")
        raw_id = source_id.encode("utf-8")
        if len(raw_id) > 0xFFFF:
            raise FormatError(f"source_id too long: {source_id[:32]}...")
        chunks.append(struct.pack("<H", len(raw_id)))
        chunks.append(raw_id)
        chunks.append(vec.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_table(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    magic, version, dim, count = _read_head(buf, TABLE_MAGIC, path)
    pos = _HEAD.size
    row_bytes = 4 * dim
    table: dict[str, np.ndarray] = {}
    for k in range(count):
        if pos + 2 > len(buf):
            raise FormatError(f"{path}: truncated at entry {k}")
        (id_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + id_len + row_bytes > len(buf):
            raise FormatError(f"{path}: truncated at entry {k}")
        source_id = buf[pos : pos + id_len].decode("utf-8")
        pos += id_len
        if source_id in table:
            raise FormatError(f"{path}: duplicate source_id: {source_id}")
        vec = np.frombuffer(buf, dtype=_F32, count=dim, offset=pos).astype(np.float32)
        pos += row_bytes
        table[source_id] = vec
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes after {count} entries")
    return table


def write_checkpoint(path: str | Path, params: np.ndarray, dim: int, meta: Mapping) -> None:
    flat = np.asarray(params, dtype=_F32).ravel()
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    head = _HEAD.pack(CHECKPOINT_MAGIC, FORMAT_VERSION, dim, flat.size)
    Path(path).write_bytes(head + struct.pack("<Q", len(meta_raw)) + meta_raw + flat.tobytes())


def read_checkpoint(path: str | Path) -> tuple[np.ndarray, int, dict]:
    buf = Path(path).read_bytes()
    _, _, dim, count = _read_head(buf, CHECKPOINT_MAGIC, path)
    pos = _HEAD.size
    if pos + 8 > len(buf):
        raise FormatError(f"{path}: truncated metadata length")
    (meta_len,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    if pos + meta_len + 4 * count != len(buf):
        raise FormatError(
            f"{path}: expected {pos + meta_len + 4 * count} bytes, found {len(buf)} (truncated or padded)"
        )
    meta = json.loads(buf[pos : pos + meta_len].decode("utf-8"))
    pos += meta_len
    params = np.frombuffer(buf, dtype=_F32, count=count, offset=pos).astype(np.float32)
    return params, dim, meta


def _read_head(buf: bytes, magic: bytes, path) -> tuple[bytes, int, int, int]:
    if len(buf) < _HEAD.size:
        raise FormatError(f"{path}: truncated header")
    got, version, dim, count = _HEAD.unpack_from(buf, 0)
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: version mismatch: file v{version}, reader v{FORMAT_VERSION}")
    return got, version, dim, count
