"""Versioned binary container for training state.

Layout, all little-endian:

    magic ``MDCK`` (4 bytes) | version u32 | metadata length u64
    metadata: UTF-8 JSON document
    payload: raw array bytes, concatenated in manifest order

The JSON document carries everything that is not a numeric array, plus an
``arrays`` manifest listing name, shape and dtype of each payload entry, in
payload order. Arrays round-trip bit-exactly because their bytes are stored
raw; Python's JSON encoder round-trips floats and arbitrary-size ints
exactly, which covers scalars and generator states.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"MDCK"
VERSION = 1
_HEAD = struct.Struct("<4sIQ")


def write_state_file(path: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Serialize a metadata document plus named arrays to ``path``.

    ``meta`` must be JSON-serializable and must not contain an ``arrays`` key;
    array insertion order determines payload order.
    """
    if "arrays" in meta:
        raise ValueError("'arrays' is reserved for the manifest")
    manifest = []
    blobs = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        if a.dtype.kind not in "fiu":
            raise ValueError(f"array {name!r} has unsupported dtype {a.dtype}")
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        manifest.append({"name": name, "shape": list(a.shape), "dtype": a.dtype.str})
        blobs.append(a.tobytes())
    doc = dict(meta)
    doc["arrays"] = manifest
    encoded = json.dumps(doc, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_HEAD.pack(MAGIC, VERSION, len(encoded)))
        f.write(encoded)
        for blob in blobs:
            f.write(blob)


def read_state_file(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Inverse of :func:`write_state_file`; validates structure before parsing.

    Raises ValueError on a foreign file, an unsupported version, or any
    length field that disagrees with the actual file size.
    """
    size = os.path.getsize(path)
    with open(path, "rb") as f:
        head = f.read(_HEAD.size)
        if len(head) < _HEAD.size:
            raise ValueError(f"{path}: too short to hold a state header")
        magic, version, meta_len = _HEAD.unpack(head)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, not a state file")
        if version != VERSION:
            raise ValueError(
                f"{path}: version {version} not supported (reader expects {VERSION})"
            )
        if _HEAD.size + meta_len > size:
            raise ValueError(f"{path}: corrupt metadata length {meta_len}")
        try:
            doc = json.loads(f.read(meta_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValueError(f"{path}: metadata does not parse: {exc}") from exc
        manifest = doc.pop("arrays", None)
        if manifest is None:
            raise ValueError(f"{path}: metadata lacks the array manifest")
        payload_bytes = 0
        entries = []
        for item in manifest:
            dt = np.dtype(item["dtype"])
            if dt.kind not in "fiu":
                raise ValueError(f"{path}: manifest dtype {item['dtype']!r} not allowed")
            shape = tuple(int(s) for s in item["shape"])
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize if shape else dt.itemsize
            entries.append((item["name"], shape, dt, nbytes))
            payload_bytes += nbytes
        expected = _HEAD.size + meta_len + payload_bytes
        if expected != size:
            raise ValueError(
                f"{path}: corrupt length fields: manifest implies {expected} bytes, "
                f"file has {size}"
            )
        arrays = {}
        for name, shape, dt, nbytes in entries:
            buf = f.read(nbytes)
            arrays[name] = np.frombuffer(buf, dtype=dt).reshape(shape).copy()
    return doc, arrays
