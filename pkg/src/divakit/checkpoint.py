"""DIVA1 checkpoint files.

Layout::

    b"DIVA1\\n"
    b"<header length in bytes, ASCII decimal>\\n"
    <UTF-8 JSON header>
    <raw little-endian blobs, in header order>

The header lists every blob as ``{"name", "dtype", "shape", "offset",
"nbytes"}`` with offsets relative to the start of the blob section.
Supported blob dtypes: ``<f4`` (float32), ``u1`` (uint8 codes) and
``bits`` (bit-packed 0/1 masks, ``numpy.packbits`` order).
"""

from __future__ import annotations

import json
import os

import numpy as np

MAGIC = b"DIVA1\n"


class CheckpointError(ValueError):
    pass


def _encode(arr, dtype):
    if dtype == "<f4":
        return np.ascontiguousarray(arr, dtype="<f4").tobytes()
    if dtype == "u1":
        return np.ascontiguousarray(arr, dtype=np.uint8).tobytes()
    if dtype == "bits":
        a = np.asarray(arr)
        if not np.isin(a, (0, 1)).all():
            raise CheckpointError("mask blobs must be 0/1 valued")
        return np.packbits(a.astype(np.uint8).reshape(-1)).tobytes()
    raise CheckpointError(f"unsupported blob dtype {dtype!r}")


def _decode(raw, dtype, shape):
    count = int(np.prod(shape))
    if dtype == "<f4":
        return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    if dtype == "u1":
        return np.frombuffer(raw, dtype=np.uint8).copy().reshape(shape)
    if dtype == "bits":
        bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8))[:count]
        return bits.astype(np.float32).reshape(shape)
    raise CheckpointError(f"unsupported blob dtype {dtype!r}")


def write(path, header: dict, blobs: list[tuple[str, str, np.ndarray]]):
    """Write a checkpoint. ``blobs`` is a list of ``(name, dtype, array)``."""
    entries, chunks, offset = [], [], 0
    for name, dtype, arr in blobs:
        raw = _encode(arr, dtype)
        entries.append({"name": name, "dtype": dtype, "shape": list(np.shape(arr)),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = dict(header, blobs=entries)
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(str(len(text)).encode("ascii") + b"\n")
        f.write(text)
        for raw in chunks:
            f.write(raw)
    os.replace(tmp, path)


def read(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint into ``(header, {blob name: array})``.

    Everything is validated before anything is returned, so a corrupt file
    never yields a partial result.
    """
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a DIVA1 checkpoint (bad magic)")
    pos = len(MAGIC)
    nl = data.find(b"\n", pos)
    if nl < 0:
        raise CheckpointError(f"{path}: missing header length")
    try:
        hlen = int(data[pos:nl].decode("ascii"))
        header = json.loads(data[nl + 1 : nl + 1 + hlen].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if nl + 1 + hlen > len(data):
        raise CheckpointError(f"{path}: truncated header")
    body = data[nl + 1 + hlen :]
    arrays = {}
    for e in header.get("blobs", []):
        start, stop = e["offset"], e["offset"] + e["nbytes"]
        if stop > len(body):
            raise CheckpointError(f"{path}: truncated blob {e['name']!r}")
        arrays[e["name"]] = _decode(body[start:stop], e["dtype"], tuple(e["shape"]))
    expected = sum(e["nbytes"] for e in header.get("blobs", []))
    if len(body) != expected:
        raise CheckpointError(f"{path}: blob section is {len(body)} bytes, header declares {expected}")
    return header, arrays
