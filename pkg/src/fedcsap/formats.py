"""Versioned little-endian binary codecs.

Checkpoints ("FCKP1") are a flat sequence of named float64 arrays:
name length (u32), name bytes, rank (u32), one u32 per extent, then the
row-major float64 payload. Datasets ("FCSD1") prepend a length-prefixed
JSON header to the same record stream. Both formats are strictly
little-endian so files are portable across machines.
"""

from __future__ import annotations

import io
import json
import struct
from typing import Iterable, Sequence

import numpy as np

CHECKPOINT_MAGIC = b"FCKP1"
DATASET_MAGIC = b"FCSD1"


class FormatError(ValueError):
    """Corrupt or mismatched binary payload."""


def _read_exact(stream, n: int) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise FormatError(f"truncated payload: wanted {n} bytes, got {len(data)}")
    return data


def write_named_arrays(stream, items: Iterable[tuple[str, np.ndarray]]) -> None:
    for name, arr in items:
        a = np.asarray(arr, dtype=np.float64)
        encoded = name.encode("utf-8")
        stream.write(struct.pack("<I", len(encoded)))
        stream.write(encoded)
        stream.write(struct.pack("<I", a.ndim))
        for extent in a.shape:
            stream.write(struct.pack("<I", extent))
        stream.write(a.astype("<f8", copy=False).tobytes(order="C"))


def read_named_arrays(stream) -> list[tuple[str, np.ndarray]]:
    out: list[tuple[str, np.ndarray]] = []
    while True:
        head = stream.read(4)
        if head == b"":
            return out
        if len(head) != 4:
            raise FormatError("truncated record header")
        (name_len,) = struct.unpack("<I", head)
        name = _read_exact(stream, name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", _read_exact(stream, 4))
        shape = tuple(struct.unpack("<I", _read_exact(stream, 4))[0] for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        payload = _read_exact(stream, count * 8)
        arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
        out.append((name, arr))


def checkpoint_to_bytes(items: Sequence[tuple[str, np.ndarray]]) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    write_named_arrays(buf, items)
    return buf.getvalue()


def checkpoint_from_bytes(data: bytes) -> dict[str, np.ndarray]:
    stream = io.BytesIO(data)
    if _read_exact(stream, len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint: bad magic bytes")
    out: dict[str, np.ndarray] = {}
    for name, arr in read_named_arrays(stream):
        if name in out:
            raise FormatError(f"duplicate parameter {name!r} in checkpoint")
        out[name] = arr
    return out


def blob_to_bytes(magic: bytes, header: dict, items: Sequence[tuple[str, np.ndarray]]) -> bytes:
    buf = io.BytesIO()
    buf.write(magic)
    encoded = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(encoded)))
    buf.write(encoded)
    write_named_arrays(buf, items)
    return buf.getvalue()


def blob_from_bytes(magic: bytes, data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    stream = io.BytesIO(data)
    if _read_exact(stream, len(magic)) != magic:
        raise FormatError(f"bad magic bytes, expected {magic!r}")
    (header_len,) = struct.unpack("<I", _read_exact(stream, 4))
    header = json.loads(_read_exact(stream, header_len).decode("utf-8"))
    arrays = dict(read_named_arrays(stream))
    return header, arrays
