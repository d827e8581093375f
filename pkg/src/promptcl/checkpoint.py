"""Checkpoint format: JSON manifest plus a raw little-endian float64 sidecar.

A checkpoint is a directory holding ``manifest.json`` (format version, an
arbitrary config blob, and per-tensor name/shape/byte-offset entries) and
``weights.bin`` (the tensors' values concatenated in manifest order).
Save -> load -> save reproduces both files byte-for-byte.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import CheckpointError

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.bin"
_F64 = np.dtype("<f8")


def _atomic_write(path: str, data: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_checkpoint(dirpath: str, tensors: dict[str, np.ndarray], config: dict) -> None:
    """Write manifest + sidecar; tensor order follows the mapping's order."""
    os.makedirs(dirpath, exist_ok=True)
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        raw = arr.astype(_F64, copy=False).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "bytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = {"format_version": FORMAT_VERSION, "config": config, "tensors": entries}
    _atomic_write(os.path.join(dirpath, WEIGHTS_NAME), b"".join(blobs))
    _atomic_write(os.path.join(dirpath, MANIFEST_NAME),
                  json.dumps(manifest, indent=2, sort_keys=True).encode("utf-8"))


def load_checkpoint(dirpath: str) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint directory back into (tensors, config)."""
    manifest_path = os.path.join(dirpath, MANIFEST_NAME)
    weights_path = os.path.join(dirpath, WEIGHTS_NAME)
    if not os.path.exists(manifest_path) or not os.path.exists(weights_path):
        raise CheckpointError(f"checkpoint incomplete or missing at {dirpath}")
    try:
        with open(manifest_path, "rb") as fh:
            manifest = json.loads(fh.read().decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"bad manifest in {dirpath}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {manifest.get('format_version')}")
    raw = open(weights_path, "rb").read()
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = entry["bytes"]
        lo = entry["offset"]
        if lo + nbytes > len(raw):
            raise CheckpointError(
                f"sidecar truncated: {entry['name']} needs bytes [{lo},{lo + nbytes}), "
                f"file has {len(raw)}")
        arr = np.frombuffer(raw[lo:lo + nbytes], dtype=_F64).reshape(shape)
        tensors[entry["name"]] = np.ascontiguousarray(arr, dtype=np.float64)
    return tensors, manifest["config"]
