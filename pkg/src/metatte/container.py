"""Binary container shared by task sets and checkpoints.

Layout::

    b"MTTE" | u32 version | u32 manifest length | manifest (UTF-8 JSON)
    | float64 little-endian payload | u32 CRC-32 of all preceding bytes

The manifest lists every array as ``{"name", "shape", "offset"}`` with the
offset counted in float64 elements from the start of the payload.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"MTTE"
VERSION = 1
_HEADER = struct.Struct("<4sII")
_CRC = struct.Struct("<I")


def encode(manifest: dict, arrays: dict[str, np.ndarray]) -> bytes:
    descriptors = []
    offset = 0
    chunks = []
    for name, value in arrays.items():
        value = np.asarray(value, dtype="<f8", order="C")  # ascontiguousarray would promote 0-d to 1-d
        descriptors.append({"name": name, "shape": list(value.shape), "offset": offset})
        offset += value.size
        chunks.append(value.tobytes())
    manifest = dict(manifest, tensors=descriptors)
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _HEADER.pack(MAGIC, VERSION, len(text)) + text + b"".join(chunks)
    return body + _CRC.pack(zlib.crc32(body))


def decode(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < _HEADER.size + _CRC.size:
        raise CheckpointError("truncated container: shorter than the fixed header")
    magic, version, n_manifest = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic bytes {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version} (expected {VERSION})")
    body, (crc,) = blob[: -_CRC.size], _CRC.unpack(blob[-_CRC.size :])
    start = _HEADER.size + n_manifest
    if start > len(body):
        raise CheckpointError("truncated container: manifest runs past end of file")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch: container is corrupted")
    try:
        manifest = json.loads(body[_HEADER.size : start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from exc
    payload = np.frombuffer(body[start:], dtype="<f8")
    arrays = {}
    for desc in manifest.pop("tensors"):
        size = int(np.prod(desc["shape"], dtype=np.int64))
        lo = desc["offset"]
        if lo + size > payload.size:
            raise CheckpointError(f"truncated container: tensor {desc['name']!r} runs past payload")
        arrays[desc["name"]] = payload[lo : lo + size].reshape(tuple(desc["shape"])).astype(np.float64)
    return manifest, arrays


def write(path, manifest: dict, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(manifest, arrays))


def read(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())
