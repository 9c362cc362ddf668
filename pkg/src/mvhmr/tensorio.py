"""Portable tensor files: a JSON manifest plus a little-endian float32 blob.

``<stem>.json`` lists every tensor (name, shape) in blob order together with
free-form metadata; ``<stem>.bin`` holds the row-major data back to back.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT = "mvhmr-tensors/1"
_DTYPE = np.dtype("<f4")


def _paths(stem):
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def save_tensors(stem, tensors: dict, meta: dict | None = None):
    """Write ``tensors`` (name -> array) in insertion order."""
    manifest_path, blob_path = _paths(stem)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"tensor {name!r} has non-finite entries")
        entries.append({"name": name, "shape": list(arr.shape)})
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPE).tobytes())
    manifest = {"format": FORMAT, "dtype": "float32-le", "tensors": entries, "meta": meta or {}}
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    blob_path.write_bytes(b"".join(chunks))
    return manifest_path, blob_path


def load_tensors(stem):
    """Return ``(tensors, meta)``; arrays are float64 copies of the stored float32 values."""
    manifest_path, blob_path = _paths(stem)
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{manifest_path}: unknown tensor file format {manifest.get('format')!r}")
    blob = blob_path.read_bytes()
    out = {}
    offset = 0
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * _DTYPE.itemsize
        if offset + nbytes > len(blob):
            raise ValueError(f"{blob_path}: truncated at tensor {entry['name']!r}")
        data = np.frombuffer(blob, dtype=_DTYPE, count=count, offset=offset)
        out[entry["name"]] = data.astype(np.float64).reshape(shape)
        offset += nbytes
    if offset != len(blob):
        raise ValueError(f"{blob_path}: {len(blob) - offset} trailing bytes")
    return out, manifest["meta"]
