"""Checkpoints: a JSON manifest plus a little-endian float64 blob.

``<stem>.json``::

    {"format": "gconv-lab-checkpoint", "version": 1, "blob": "<stem>.bin",
     "tensors": [{"name": ..., "shape": [...], "dtype": "f64", "offset": <bytes>}, ...]}

``<stem>.bin`` holds every tensor's values, row-major, concatenated in
manifest order.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ContractError

FORMAT = "gconv-lab-checkpoint"
_LE_F64 = np.dtype("<f8")


def save_checkpoint(stem: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    stem = Path(stem)
    blob_path = stem.with_suffix(".bin")
    entries, offset = [], 0
    with open(blob_path, "wb") as fh:
        for name, arr in tensors.items():
            data = np.asarray(arr, dtype=_LE_F64)  # ascontiguousarray would lift 0-d to 1-d
            entries.append({"name": name, "shape": list(data.shape), "dtype": "f64", "offset": offset})
            fh.write(data.tobytes())
            offset += data.nbytes
    manifest = {"format": FORMAT, "version": 1, "blob": blob_path.name, "tensors": entries}
    if meta:
        manifest["meta"] = meta
    manifest_path = stem.with_suffix(".json")
    manifest_path.write_text(json.dumps(manifest, indent=1) + "\n")
    return manifest_path


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    """Read a checkpoint given its manifest (``.json``) or common stem."""
    path = Path(path)
    manifest_path = path if path.suffix == ".json" else path.with_suffix(".json")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT:
        raise ContractError(f"{manifest_path}: not a {FORMAT} manifest")
    raw = (manifest_path.parent / manifest["blob"]).read_bytes()
    out = {}
    for e in manifest["tensors"]:
        if e["dtype"] != "f64":
            raise ContractError(f"{e['name']}: unsupported dtype {e['dtype']!r}")
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + 8 * count
        if end > len(raw):
            raise ContractError(f"{e['name']}: blob truncated")
        arr = np.frombuffer(raw, dtype=_LE_F64, count=count, offset=e["offset"])
        out[e["name"]] = arr.astype(np.float64).reshape(e["shape"])
    return out
