"""Self-describing checkpoint container.

Layout: an 8-byte magic, a little-endian uint64 header length, a UTF-8 JSON
header, then the raw tensor payload. The header carries arbitrary metadata
plus, per tensor, its name, shape, and byte offset into the payload. All
values are little-endian float64, so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"MVGCKPT1"


def save_checkpoint(path, tensors: dict, meta: dict):
    """Write named float64 arrays plus JSON-serializable metadata."""
    entries = {}
    offset = 0
    blobs = []
    for name, array in tensors.items():
        array = np.ascontiguousarray(array, dtype="<f8")
        entries[name] = {"shape": list(array.shape), "offset": offset}
        blobs.append(array.tobytes())
        offset += array.nbytes
    header = json.dumps({"meta": meta, "tensors": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Read back (tensors, meta); inverse of :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    tensors = {}
    for name, entry in header["tensors"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = entry["offset"]
        tensors[name] = np.frombuffer(
            payload, dtype="<f8", count=count, offset=start
        ).reshape(shape).copy()
    return tensors, header["meta"]
