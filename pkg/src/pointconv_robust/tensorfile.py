"""Flat tensor files: a JSON header followed by little-endian float64 data.

Layout::

    bytes 0..7    magic b"PCRTNSR1"
    bytes 8..15   header length N (uint64, little-endian)
    N bytes       UTF-8 JSON header
    remainder     concatenated '<f8' arrays in header order

The header is ``{"tensors": [{"name", "shape", "offset", "variant"}, ...],
"meta": {...}}``; ``offset`` counts bytes from the start of the data block and
``variant`` names the weight-function kind a tensor belongs to (or null).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PCRTNSR1"

__all__ = ["save_tensors", "load_tensors", "MAGIC"]


def save_tensors(path, tensors: dict, meta: dict | None = None, variants: dict | None = None) -> None:
    variants = variants or {}
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({
            "name": name,
            "shape": list(a.shape),
            "offset": offset,
            "variant": variants.get(name),
        })
        blob = a.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_tensors(path):
    """Return ``(tensors, meta, variants)`` from a file written by :func:`save_tensors`."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a tensor file (bad magic)")
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + n:
        raise ValueError(f"{path}: truncated header")
    header = json.loads(raw[16:16 + n].decode("utf-8"))
    data = memoryview(raw)[16 + n:]
    tensors, variants = {}, {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        start, stop = e["offset"], e["offset"] + 8 * count
        if stop > len(data):
            raise ValueError(f"{path}: tensor {e['name']!r} truncated at byte {16 + n + len(data)}")
        tensors[e["name"]] = np.frombuffer(data[start:stop], dtype="<f8").astype(np.float64).reshape(e["shape"])
        variants[e["name"]] = e.get("variant")
    return tensors, header.get("meta", {}), variants
