"""Binary container for named float32 tensors plus JSON metadata.

Layout (little-endian): 8 magic bytes, ``u32`` version, ``u32`` metadata length,
UTF-8 JSON metadata, then each tensor's raw ``f32`` data in the order listed in
the metadata's ``tensors`` entry (name and shape per tensor).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MLVAECK\x00"
VERSION = 1
_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def encode(meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    names = sorted(tensors)
    arrays = [np.ascontiguousarray(tensors[n], dtype=_F32) for n in names]
    meta = dict(meta)
    meta["tensors"] = [[n, list(a.shape)] for n, a in zip(names, arrays)]
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    head = MAGIC + struct.pack("<II", VERSION, len(blob))
    return b"".join([head, blob] + [a.tobytes() for a in arrays])


def decode(buf: bytes, source: str = "<bytes>") -> tuple[dict, dict[str, np.ndarray]]:
    if len(buf) < 16 or buf[:8] != MAGIC:
        raise CheckpointError(f"{source}: bad header, expected magic bytes {MAGIC!r}")
    version, n = struct.unpack("<II", buf[8:16])
    if version != VERSION:
        raise CheckpointError(f"{source}: checkpoint format version {version}, this build reads version {VERSION}")
    if 16 + n > len(buf):
        raise CheckpointError(f"{source}: truncated metadata")
    try:
        meta = json.loads(buf[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: unreadable metadata ({exc})") from None
    pos = 16 + n
    tensors = {}
    for name, shape in meta.pop("tensors"):
        count = int(np.prod(shape)) if shape else 1
        end = pos + 4 * count
        if end > len(buf):
            raise CheckpointError(f"{source}: truncated tensor {name!r} at byte {pos}")
        tensors[name] = np.frombuffer(buf, dtype=_F32, count=count, offset=pos).reshape(shape).copy()
        pos = end
    if pos != len(buf):
        raise CheckpointError(f"{source}: {len(buf) - pos} trailing bytes")
    return meta, tensors


def write(path, meta: dict, tensors: dict[str, np.ndarray]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(meta, tensors))
    tmp.replace(path)


def read(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    return decode(path.read_bytes(), str(path))
