"""Manifest + flat-binary array storage.

Every persisted artifact (datasets, checkpoints, rollout records) is a
directory holding ``manifest.json`` and one raw little-endian float32 file
per array, row-major.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np

FORMAT_VERSION = 1
DTYPE = "<f4"
MANIFEST = "manifest.json"


def dump_json(obj: Any, path: Path) -> None:
    # sort_keys + fixed indent keeps re-runs byte-identical
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_arrays(directory: str | Path, arrays: Mapping[str, np.ndarray],
                 meta: Mapping[str, Any] | None = None, kind: str = "arrays") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    fields = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype=DTYPE))
        fname = f"{name}.f32"
        arr.tofile(directory / fname)
        fields.append({"name": name, "shape": list(arr.shape), "file": fname})
    manifest = {
        "version": FORMAT_VERSION,
        "kind": kind,
        "dtype": DTYPE,
        "order": "C",
        "fields": fields,
        "meta": dict(meta or {}),
    }
    dump_json(manifest, directory / MANIFEST)
    return directory


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {directory}")
    manifest = json.loads(path.read_text())
    if manifest.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported manifest version {manifest.get('version')!r}")
    return manifest


def read_arrays(directory: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Load every field listed in the manifest. Returns ``(arrays, meta)``."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    arrays = {}
    for field in manifest["fields"]:
        shape = tuple(field["shape"])
        data = np.fromfile(directory / field["file"], dtype=manifest["dtype"])
        if data.size != int(np.prod(shape)):
            raise ValueError(f"{field['file']}: expected {np.prod(shape)} values, got {data.size}")
        arrays[field["name"]] = data.reshape(shape)
    return arrays, manifest["meta"]
