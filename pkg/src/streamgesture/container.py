"""Named-array container files.

Byte layout (safetensors):

    [8 bytes]  little-endian u64 N, length of the JSON header
    [N bytes]  UTF-8 JSON: {"<name>": {"dtype", "shape", "data_offsets"}, ...,
               "__metadata__": {"manifest": "<JSON string>"}}
    [rest]     raw little-endian array bytes, concatenated in header order

The manifest is an arbitrary JSON object (seed, rates, dims, fingerprints ...).
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np
from safetensors.numpy import load as _st_load
from safetensors.numpy import save as _st_save

from .errors import DataError

_ALLOWED = (np.float64, np.float32, np.int64, np.int32, np.uint8, np.bool_)


def dumps(arrays: dict[str, np.ndarray], manifest: dict) -> bytes:
    clean = {}
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        if a.dtype.type not in _ALLOWED:
            raise DataError(f"array {name!r} has unsupported dtype {a.dtype}")
        clean[name] = a.astype(a.dtype.newbyteorder("<"), copy=False)
    meta = {"manifest": json.dumps(manifest, sort_keys=True)}
    return _st_save(clean, metadata=meta)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < 8:
        raise DataError("container truncated")
    n = int.from_bytes(blob[:8], "little")
    try:
        header = json.loads(blob[8 : 8 + n])
        manifest = json.loads(header.get("__metadata__", {}).get("manifest", "{}"))
        arrays = _st_load(blob)
    except Exception as exc:  # malformed header or payload
        raise DataError(f"malformed container: {exc}") from exc
    return dict(arrays), manifest


def save(path: str | os.PathLike, arrays: dict[str, np.ndarray], manifest: dict) -> str:
    """Write a container and return the sha256 of its bytes."""
    blob = dumps(arrays, manifest)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    p = Path(path)
    if not p.exists():
        raise DataError(f"no such container: {p}")
    return loads(p.read_bytes())


def file_sha256(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
