"""Single-file named-array archive.

Layout: an 8-byte magic string, a little-endian uint32 header length, a
JSON text header listing entry names and shapes (in storage order), then
the raw tensor payloads concatenated in that order as little-endian
32-bit floats in C order. Latents, embeddings, token sets and attention
maps from a run are all stored in one such file so downstream commands
never re-run inversion.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"NARCH001"
DEFAULT_SUFFIX = ".naa"


def write_archive(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    """Write named arrays to `path`, converting everything to float32."""
    if not arrays:
        raise ValueError("archive must contain at least one entry")
    names = list(arrays.keys())
    converted = {}
    for name in names:
        arr = np.ascontiguousarray(np.asarray(arrays[name]), dtype="<f4")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"archive entry {name!r} contains non-finite values")
        converted[name] = arr
    header = {
        "names": names,
        "shapes": {name: list(converted[name].shape) for name in names},
        "dtype": "<f4",
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for name in names:
            fh.write(converted[name].tobytes(order="C"))


def read_archive(path: str | Path) -> dict[str, np.ndarray]:
    """Load every entry of an archive as float32 arrays keyed by name."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a named-array archive")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        out: dict[str, np.ndarray] = {}
        for name in header["names"]:
            shape = tuple(header["shapes"][name])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 4)
            if len(raw) != count * 4:
                raise ValueError(f"{path}: truncated payload for entry {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return out


def list_entries(path: str | Path) -> list[str]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a named-array archive")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
    return list(header["names"])
