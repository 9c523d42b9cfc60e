"""Versioned binary container used for T3 and surrogate files.

Layout: 8 magic bytes, a little-endian uint32 format version, a uint16 length
followed by an ASCII kind tag, then an uncompressed ``.npz`` payload. Metadata
is JSON stored inside the payload as a uint8 array, so arrays round-trip bit
for bit.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"T4SCNTR\x00"
VERSION = 1


class ContainerError(ValueError):
    """Raised when a file is not a valid container of the expected kind."""


def dumps(kind: str, arrays: dict[str, np.ndarray], meta: dict[str, Any]) -> bytes:
    payload = io.BytesIO()
    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(payload, __meta__=blob, **{k: np.asarray(v) for k, v in arrays.items()})
    tag = kind.encode("ascii")
    return MAGIC + struct.pack("<IH", VERSION, len(tag)) + tag + payload.getvalue()


def loads(raw: bytes, kind: str) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if len(raw) < len(MAGIC) + 6 or raw[: len(MAGIC)] != MAGIC:
        raise ContainerError("bad magic bytes")
    version, taglen = struct.unpack_from("<IH", raw, len(MAGIC))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    start = len(MAGIC) + 6
    tag = raw[start : start + taglen].decode("ascii", errors="replace")
    if tag != kind:
        raise ContainerError(f"container holds {tag!r}, expected {kind!r}")
    try:
        with np.load(io.BytesIO(raw[start + taglen :]), allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
    except Exception as exc:  # zip or format errors
        raise ContainerError(f"corrupt payload: {exc}") from exc
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    return arrays, meta


def save(path, kind: str, arrays: dict[str, np.ndarray], meta: dict[str, Any]) -> None:
    Path(path).write_bytes(dumps(kind, arrays, meta))


def load(path, kind: str) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return loads(Path(path).read_bytes(), kind)
