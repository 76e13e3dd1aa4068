"""PNG cross-sections of masked volumes, with the raw slice next to each image.

Color mapping (documented so pixels can be decoded back to values):

``gray``
    ``pixel = round(255 * (v - vmin) / (vmax - vmin))`` clipped to [0, 255];
    a constant slice (``vmax == vmin``) maps to 0 everywhere.
``diverging``
    ``t = (v + a) / (2 a)`` with ``a = max |v|``; blue (0, 0, 255) at ``t = 0``,
    white at ``t = 0.5``, red (255, 0, 0) at ``t = 1``, linear in between.
    For ``t <= 0.5`` the red and green channels equal ``round(510 t)``; for
    ``t >= 0.5`` green and blue equal ``round(510 (1 - t))``.

The image row index runs along the first remaining volume axis and the
column index along the second (``volume.take(index, axis)``).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import ContractError
from ..io import save_array

AXES = {"x": 0, "y": 1, "z": 2}


def scatter_to_volume(values, index, dims) -> np.ndarray:
    """Place a masked vector (one value per voxel in ``index``) into a zero volume."""
    vol = np.zeros(int(np.prod(dims)))
    vol[np.asarray(index)] = np.asarray(values, dtype=float)
    return vol.reshape(dims)


def gray_map(s: np.ndarray, vmin: float, vmax: float) -> np.ndarray:
    if vmax <= vmin:
        return np.zeros(s.shape, dtype=np.uint8)
    return np.clip(np.round(255.0 * (s - vmin) / (vmax - vmin)), 0, 255).astype(np.uint8)


def gray_decode(pixels, vmin: float, vmax: float) -> np.ndarray:
    return vmin + np.asarray(pixels, dtype=float) / 255.0 * (vmax - vmin)


def diverging_map(s: np.ndarray, a: float) -> np.ndarray:
    rgb = np.full(s.shape + (3,), 255, dtype=np.uint8)
    if a <= 0:
        return rgb
    t = np.clip((s + a) / (2 * a), 0.0, 1.0)
    lo = t <= 0.5
    up = np.round(510.0 * t).astype(np.int64)
    down = np.round(510.0 * (1.0 - t)).astype(np.int64)
    rgb[..., 0] = np.where(lo, up, 255)
    rgb[..., 1] = np.where(lo, up, down)
    rgb[..., 2] = np.where(lo, 255, down)
    return rgb


def diverging_decode(rgb, a: float) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=float)
    lo = rgb[..., 2] == 255
    t = np.where(lo, rgb[..., 0] / 510.0, 1.0 - rgb[..., 2] / 510.0)
    return (2 * t - 1) * a


def _plane(p):
    axis, idx = p
    axis = AXES.get(axis, axis) if isinstance(axis, str) else int(axis)
    if axis not in (0, 1, 2):
        raise ContractError(f"slice axis must be 0, 1, 2 or x/y/z, got {p[0]!r}")
    return axis, int(idx)


def export_slices(volume, phantom, planes, out_dir, prefix: str = "slice", colormap: str = "gray",
                  index=None, limits=None) -> list[Path]:
    """Write one PNG and one raw array per ``(axis, index)`` plane.

    ``volume`` is either a full 3-D array or a masked vector whose voxel
    indices are given by ``index``. ``limits`` overrides the color range
    (``(vmin, vmax)`` for gray, ``a`` for diverging); by default it is taken
    from the whole volume so all slices share one scale.
    """
    dims = tuple(phantom.dims)
    vol = np.asarray(volume, dtype=float)
    if index is not None:
        vol = scatter_to_volume(vol, index, dims)
    if vol.shape != dims:
        raise ContractError(f"volume shape {vol.shape} does not match phantom dims {dims}")
    if colormap not in ("gray", "diverging"):
        raise ContractError(f"unknown colormap {colormap!r}")
    if colormap == "gray":
        vmin, vmax = (float(vol.min()), float(vol.max())) if limits is None else map(float, limits)
        scale = {"vmin": vmin, "vmax": vmax}
    else:
        a = float(np.max(np.abs(vol))) if limits is None else float(limits)
        scale = {"a": a}
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for p in planes:
        axis, idx = _plane(p)
        if not 0 <= idx < dims[axis]:
            raise ContractError(f"plane index {idx} outside [0, {dims[axis]}) on axis {axis}")
        s = vol.take(idx, axis=axis)
        name = f"{prefix}_{'xyz'[axis]}{idx:03d}"
        img = gray_map(s, scale["vmin"], scale["vmax"]) if colormap == "gray" else diverging_map(s, scale["a"])
        png = out_dir / f"{name}.png"
        Image.fromarray(img).save(png, optimize=False)
        raw, side = save_array(out_dir / f"{name}.f64", s, axis=axis, index=idx, colormap=colormap,
                               voxel_size=phantom.voxel_size, **scale)
        written += [png, raw, side]
    return written
