"""Checkpoint file: versioned named-parameter table with raw float32 values.

Layout (little endian):
    magic   8 bytes  b"SDCKPT01"
    count   uint32
    per parameter:
        name_len uint16, name utf-8
        ndim     uint8, dims uint32 each
        values   float32 * prod(dims)

The byte stream is a pure function of (names, shapes, values): identical
models produce identical files.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SDCKPT01"


class CheckpointError(ValueError):
    pass


def save_checkpoint(model, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = list(model.named_parameters())
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", len(entries))
    for name, p in entries:
        raw = name.encode("utf-8")
        blob += struct.pack("<H", len(raw))
        blob += raw
        dims = p.data.shape
        blob += struct.pack("<B", len(dims))
        for d in dims:
            blob += struct.pack("<I", d)
        blob += np.ascontiguousarray(p.data, dtype="<f4").tobytes()
    path.write_bytes(bytes(blob))


def load_checkpoint_table(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic in {path}")
    off = 8
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    table: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        dims = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        n = int(np.prod(dims)) if ndim else 1
        vals = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        table[name] = vals.copy()
    if off != len(data):
        raise CheckpointError(f"trailing bytes in checkpoint {path}")
    return table


def load_checkpoint(model, path, partial: bool = False) -> list[str]:
    """Copy stored values into matching parameters; returns loaded names.

    With partial=True, parameters missing from the file are left as-is and
    stored names absent from the model are ignored (used to drop a
    pretrained sub-network into a larger model).
    """
    table = load_checkpoint_table(path)
    params = dict(model.named_parameters())
    loaded = []
    for name, p in params.items():
        if name not in table:
            if partial:
                continue
            raise CheckpointError(f"checkpoint missing parameter {name}")
        vals = table[name]
        if vals.shape != p.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: file {vals.shape}, model {p.data.shape}"
            )
        p.data = vals.astype(p.data.dtype)
    loaded = [n for n in params if n in table]
    if not partial:
        unknown = set(table) - set(params)
        if unknown:
            raise CheckpointError(f"checkpoint has unknown parameters: {sorted(unknown)[:3]}...")
    return loaded
