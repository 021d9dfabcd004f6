"""Tensor archive: a JSON manifest plus one flat little-endian payload file.

``save_archive("ckpt/model", tensors)`` writes ``ckpt/model.json`` and
``ckpt/model.bin``. Each manifest entry records name, shape, dtype and byte
offset; tensors are laid out back to back in manifest order.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

FORMAT = "xraygen-tensors/1"


class ArchiveError(ValueError):
    pass


def _paths(path) -> tuple[Path, Path]:
    path = Path(path)
    return path.with_name(path.name + ".json"), path.with_name(path.name + ".bin")


def save_archive(path, tensors: Mapping[str, np.ndarray], meta: Optional[dict] = None) -> tuple[Path, Path]:
    manifest_path, payload_path = _paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(payload_path, "wb") as fh:
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            dtype = arr.dtype.newbyteorder("<")
            raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
            fh.write(raw)
            entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype.str, "offset": offset})
            offset += len(raw)
    manifest = {"format": FORMAT, "payload": payload_path.name, "nbytes": offset, "tensors": entries}
    if meta:
        manifest["meta"] = meta
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest_path, payload_path


def read_manifest(path) -> dict:
    manifest_path, _ = _paths(path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ArchiveError(f"{manifest_path}: invalid manifest ({exc})") from exc
    if manifest.get("format") != FORMAT:
        raise ArchiveError(f"{manifest_path}: unknown format {manifest.get('format')!r}")
    return manifest


def load_archive(path) -> dict[str, np.ndarray]:
    manifest = read_manifest(path)
    _, payload_path = _paths(path)
    payload = payload_path.read_bytes()
    out: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        stop = start + count * dtype.itemsize
        if stop > len(payload):
            raise ArchiveError(
                f"tensor {entry['name']!r} needs bytes [{start}, {stop}) but {payload_path.name} has {len(payload)}"
            )
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=start).reshape(shape)
        out[entry["name"]] = arr.astype(dtype.newbyteorder("="), copy=True)
    return out
