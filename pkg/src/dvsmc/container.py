"""Self-describing binary container for datasets, checkpoints and filter traces.

Layout (little-endian):

    bytes 0..3    magic ``b"DVSC"``
    bytes 4..7    format version, uint32
    bytes 8..15   header length in bytes, uint64
    header        UTF-8 JSON (sorted keys, compact separators)
    payload       raw array bytes, back to back, C order

The JSON header has the form::

    {"arrays": [{"dtype": "float64", "name": ..., "offset": ..., "shape": [...]}, ...],
     "kind": "dataset" | "checkpoint" | "trace",
     "meta": {...}}

Offsets are relative to the start of the payload section.  Writing is
deterministic: identical inputs produce byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"DVSC"
FORMAT_VERSION = 1

_ALLOWED_DTYPES = {"float64", "int64", "uint8", "bool"}


class ContainerError(RuntimeError):
    """Raised for malformed or unreadable container files."""


def write_container(path, arrays: dict[str, np.ndarray], meta: dict, kind: str) -> None:
    """Write ``arrays`` plus ``meta`` to ``path`` in the container format."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    entries = []
    offset = 0
    payloads = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.name not in _ALLOWED_DTYPES:
            raise ContainerError(f"unsupported dtype {arr.dtype.name!r} for array {name!r}")
        entries.append(
            {"dtype": arr.dtype.name, "name": name, "offset": offset, "shape": list(arr.shape)}
        )
        payloads.append(arr.tobytes())
        offset += arr.nbytes

    header = json.dumps(
        {"arrays": entries, "kind": kind, "meta": meta},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(FORMAT_VERSION).tobytes())
        fh.write(np.uint64(len(header)).tobytes())
        fh.write(header)
        for chunk in payloads:
            fh.write(chunk)


def read_container(path) -> tuple[dict[str, np.ndarray], dict, str]:
    """Read a container file, returning ``(arrays, meta, kind)``."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ContainerError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        version = int(np.frombuffer(fh.read(4), dtype=np.uint32)[0])
        if version != FORMAT_VERSION:
            raise ContainerError(f"{path}: unsupported format version {version}")
        header_len = int(np.frombuffer(fh.read(8), dtype=np.uint64)[0])
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ContainerError(f"{path}: corrupt header: {exc}") from exc
        payload = fh.read()

    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
        start = entry["offset"]
        raw = payload[start : start + nbytes]
        if len(raw) != nbytes:
            raise ContainerError(f"{path}: truncated payload for array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    return arrays, header["meta"], header["kind"]
