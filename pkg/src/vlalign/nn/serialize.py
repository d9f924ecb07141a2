"""Versioned binary container for named arrays plus a JSON meta block.

Layout: magic, format version, header length, UTF-8 JSON header
(meta + tensor index), raw little-endian payload, SHA-256 of header and
payload.  Round trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"VLTC"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_tensors(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    index = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        if not a.flags["C_CONTIGUOUS"]:
            a = np.ascontiguousarray(a)
        if a.dtype.byteorder == ">":
            a = a.astype(a.dtype.newbyteorder("<"))
        raw = a.tobytes()
        index.append(
            {
                "name": name,
                "dtype": a.dtype.str,
                "shape": list(a.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": index}).encode("utf-8")
    payload = b"".join(chunks)
    digest = hashlib.sha256(header + payload).digest()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(payload)
        f.write(digest)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a vlalign checkpoint")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (header_len,) = struct.unpack("<Q", blob[8:16])
    body_end = 16 + header_len
    if len(blob) < body_end + 32:
        raise CheckpointError(f"{path}: truncated checkpoint")
    header = blob[16:body_end]
    payload = blob[body_end:-32]
    digest = blob[-32:]
    if hashlib.sha256(header + payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt checkpoint)")
    parsed = json.loads(header.decode("utf-8"))
    arrays: dict[str, np.ndarray] = {}
    for entry in parsed["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        a = np.frombuffer(payload[start : start + n], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = a.reshape(entry["shape"]).copy()
    return arrays, parsed["meta"]
