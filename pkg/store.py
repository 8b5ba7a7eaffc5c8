"""Array files: a human-readable JSON manifest beside a little-endian blob.

Checkpoints store reals as 32-bit floats; benchmark files keep 64-bit reals and
integers so that regenerating from the same seed is byte-identical.
"""
import json
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np
import numpy.typing as npt

FORMAT = "tta-arrays/1"

Meta = Mapping[str, Any]


def manifest_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def blob_path(path: Path) -> Path:
    return path.with_name(path.name + ".bin")


def exists(path: Path) -> bool:
    return manifest_path(path).exists() and blob_path(path).exists()


def _dtype_for(array: npt.NDArray[Any], real_dtype: str) -> str:
    if np.issubdtype(array.dtype, np.integer):
        return "<i8"
    return real_dtype


def write_arrays(
    path: Path,
    arrays: Mapping[str, npt.NDArray[Any]],
    meta: Optional[Meta] = None,
    real_dtype: str = "<f4",
    block_meta: Optional[Mapping[str, Meta]] = None,
) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    blocks = []
    offset = 0
    with open(blob_path(path), "wb") as blob:
        for name, array in arrays.items():
            dtype = _dtype_for(array, real_dtype)
            data = np.ascontiguousarray(array, dtype=np.dtype(dtype)).tobytes()
            entry: Dict[str, Any] = {
                "name": name,
                "shape": list(array.shape),
                "dtype": dtype,
                "offset": offset,
                "nbytes": len(data),
            }
            if block_meta and name in block_meta:
                entry.update(block_meta[name])
            blocks.append(entry)
            blob.write(data)
            offset += len(data)

    manifest = {"format": FORMAT, "meta": dict(meta or {}), "blocks": blocks}
    with open(manifest_path(path), "w") as out:
        json.dump(manifest, out, indent=2, sort_keys=True)
        out.write("\n")


def read_meta(path: Path) -> Dict[str, Any]:
    """The free-form metadata of an array file, without loading its blob."""
    with open(manifest_path(path)) as manifest_file:
        meta: Dict[str, Any] = json.load(manifest_file).get("meta", {})
    return meta


def read_arrays(
    path: Path,
) -> Tuple[Dict[str, npt.NDArray[Any]], Dict[str, Any], Dict[str, Dict[str, Any]]]:
    """Return (arrays, meta, per-block manifest entries)."""
    try:
        with open(manifest_path(path)) as manifest_file:
            manifest = json.load(manifest_file)
        data = blob_path(path).read_bytes()
    except FileNotFoundError as e:
        raise FileNotFoundError(f"Missing array file {e.filename}") from e

    if manifest.get("format") != FORMAT:
        raise ValueError(f"Unrecognised array file format {manifest.get('format')!r}")

    arrays = {}
    entries = {}
    for entry in manifest["blocks"]:
        start, stop = entry["offset"], entry["offset"] + entry["nbytes"]
        if stop > len(data):
            raise ValueError(f"Block {entry['name']} runs past the end of the blob")
        raw = np.frombuffer(data[start:stop], dtype=np.dtype(entry["dtype"]))
        target = np.int64 if entry["dtype"] == "<i8" else np.float64
        arrays[entry["name"]] = raw.astype(target).reshape(entry["shape"])
        entries[entry["name"]] = entry
    return arrays, manifest["meta"], entries
