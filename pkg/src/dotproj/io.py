"""Raw little-endian arrays with JSON sidecars, plus checksums."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    return obj


def save_array(path, array, **meta) -> tuple[Path, Path]:
    """Write ``array`` as raw little-endian bytes (C order) and a ``.json`` sidecar.

    The sidecar records ``shape`` and ``dtype`` plus any keyword metadata.
    Returns the two paths written.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(array)
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    path.write_bytes(le.tobytes(order="C"))
    sidecar = path.with_suffix(path.suffix + ".json")
    info = {"shape": list(arr.shape), "dtype": le.dtype.str, "order": "C"}
    info.update(_jsonable(meta))
    sidecar.write_text(json.dumps(info, indent=2, sort_keys=True))
    return path, sidecar


def load_array(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    info = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    arr = np.frombuffer(path.read_bytes(), dtype=np.dtype(info["dtype"])).reshape(info["shape"])
    return arr.astype(arr.dtype.newbyteorder("="), copy=True), info


def save_volume(path, volume, voxel_size, masks=None, **meta):
    """Save a 3-D volume; ``masks`` names the masks the values are defined on."""
    return save_array(path, volume, voxel_size=voxel_size, dims=list(np.shape(volume)),
                      mask_names=list(masks or []), **meta)


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True))
    return path
