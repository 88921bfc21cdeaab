"""Flat binary container for model/optimizer state and cluster artifacts.

Layout (all integers little-endian):

    magic     4 bytes  b"MDCK"
    version   uint32   currently 1
    manifest  uint64 length + UTF-8 JSON (class count, bank count, stage,
              iteration counter, layer manifest, arbitrary extras)
    count     uint32   number of named arrays
    per array:
        name  uint16 length + UTF-8 bytes
        ndim  uint16
        dims  int64 x ndim
        data  float64 x prod(dims), little-endian, C order

Every value is float64; the same container stores checkpoints (all K+1
normalization banks, optimizer buffers) and the clustering artifact
(centroids plus frozen feature standardization).
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"MDCK"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed or truncated container."""


def save_container(path, manifest: dict, arrays: dict) -> None:
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<H", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
            fh.write(arr.tobytes())


def load_container(path):
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a metadapt container")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported container version {version}")
        (mlen,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(mlen).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<H", fh.read(2))
            dims = struct.unpack(f"<{ndim}q", fh.read(8 * ndim)) if ndim else ()
            n = int(np.prod(dims)) if ndim else 1
            raw = fh.read(8 * n)
            if len(raw) != 8 * n:
                raise CheckpointError(f"{path}: truncated array {name!r}")
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
        return manifest, arrays
