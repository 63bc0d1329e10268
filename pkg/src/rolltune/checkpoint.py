"""Binary checkpoint files for model parameters.

Layout, all little-endian:

  magic     4 bytes, b"B2B1"
  version   uint32 (currently 1)
  metadata  uint32 byte length, then canonical JSON (sorted keys,
            compact separators, ASCII)
  sections  uint32 count, then per section, sorted by name:
              uint16 name length + UTF-8 name
              uint8 ndim + one uint32 per extent
              row-major float64 values

Every value is float64, so a section's payload is exactly
8 * product(shape) bytes. Reading is bitwise faithful, and rewriting
what was read reproduces the original file byte for byte; with sorted
sections and canonical JSON the bytes do not depend on dict insertion
order either.
"""

import json
import struct

import numpy as np

MAGIC = b"B2B1"
VERSION = 1


class CheckpointError(ValueError):
    """A checkpoint file is malformed: bad magic, version, or shape."""


def checkpoint_bytes(arrays: dict, metadata: dict | None = None) -> bytes:
    """Serialize named float64 arrays plus a JSON metadata block."""
    meta_blob = json.dumps(metadata or {}, sort_keys=True,
                           separators=(",", ":")).encode("ascii")
    parts = [MAGIC, struct.pack("<I", VERSION),
             struct.pack("<I", len(meta_blob)), meta_blob,
             struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        encoded = name.encode("utf-8")
        if not 0 < len(encoded) <= 0xFFFF:
            raise ValueError(f"section name {name!r} is empty or too long")
        # asarray keeps 0-d shapes; tobytes() below emits row-major
        # bytes regardless of the source layout.
        values = np.asarray(arrays[name], dtype="<f8")
        if values.ndim > 0xFF:
            raise ValueError(f"section {name!r} has too many dimensions")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", values.ndim))
        parts.append(struct.pack(f"<{values.ndim}I", *values.shape))
        parts.append(values.tobytes())
    return b"".join(parts)


def parse_checkpoint(data: bytes):
    """Inverse of checkpoint_bytes; returns (arrays, metadata)."""
    view = memoryview(data)
    offset = 0

    def take(n, what):
        nonlocal offset
        if offset + n > len(view):
            raise CheckpointError(f"truncated checkpoint: ran out of bytes "
                                  f"reading {what}")
        chunk = view[offset:offset + n]
        offset += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointError(f"bad magic: expected {MAGIC!r}")
    version, = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta_len, = struct.unpack("<I", take(4, "metadata length"))
    try:
        metadata = json.loads(bytes(take(meta_len, "metadata")))
    except ValueError as exc:
        raise CheckpointError(f"corrupt metadata block: {exc}") from exc
    n_sections, = struct.unpack("<I", take(4, "section count"))
    arrays = {}
    for _ in range(n_sections):
        name_len, = struct.unpack("<H", take(2, "section name length"))
        name = bytes(take(name_len, "section name")).decode("utf-8")
        ndim, = struct.unpack("<B", take(1, f"ndim of {name!r}"))
        shape = struct.unpack(f"<{ndim}I",
                              take(4 * ndim, f"shape of {name!r}"))
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        blob = take(8 * count, f"values of {name!r} (shape {shape})")
        arrays[name] = np.frombuffer(blob, dtype="<f8").reshape(shape).copy()
    if offset != len(view):
        raise CheckpointError(f"{len(view) - offset} trailing bytes after "
                              "the last section")
    return arrays, metadata


def write_checkpoint(path, arrays: dict, metadata: dict | None = None):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(arrays, metadata))


def read_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
