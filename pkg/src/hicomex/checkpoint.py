"""Binary checkpoint container and its JSON metadata sidecar.

Layout: magic ``HCMX``, format version, config digest, then named entries
(length-prefixed name, rank + extents, little-endian float64 payload).
Writing is fully deterministic given the entry dict order, and reading back
is bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"HCMX"
VERSION = 1


def save_checkpoint(path, config_digest: str, entries: dict[str, np.ndarray]):
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    digest_bytes = config_digest.encode("ascii")
    blob += struct.pack("<I", len(digest_bytes)) + digest_bytes
    blob += struct.pack("<I", len(entries))
    for name, array in entries.items():
        data = np.asarray(array, dtype="<f8")
        if not data.flags.c_contiguous:
            data = np.ascontiguousarray(data)
        name_bytes = name.encode("utf-8")
        blob += struct.pack("<I", len(name_bytes)) + name_bytes
        blob += struct.pack("<I", data.ndim)
        blob += struct.pack(f"<{data.ndim}I", *data.shape)
        blob += data.tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    offset = 4
    (version,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (digest_len,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    digest = raw[offset:offset + digest_len].decode("ascii")
    offset += digest_len
    (count,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}I", raw, offset)
        offset += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        array = np.frombuffer(raw, dtype="<f8", count=n, offset=offset)
        offset += 8 * n
        entries[name] = array.reshape(shape).astype(np.float64)
    if offset != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after last entry")
    return digest, entries


def save_sidecar(path, meta: dict):
    Path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def load_sidecar(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read sidecar {path}: {exc}") from exc
