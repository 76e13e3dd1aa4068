"""Synthetic layered voxel phantoms, optode layouts, perturbations and masks.

Tissue indices follow the table order used throughout the package::

    0  exterior (air)
    1  scalp & skull (S&S)
    2  CSF-1 (subarachnoid)
    3  CSF-2 (sulci / ventricles)
    4  gray matter (GM)
    5  white matter (WM)

All lengths are in mm, absorption and scattering coefficients in mm^-1.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, PlacementError

AIR, SS, CSF1, CSF2, GM, WM = 0, 1, 2, 3, 4, 5
TISSUE_NAMES = {SS: "S&S", CSF1: "CSF-1", CSF2: "CSF-2", GM: "GM", WM: "WM"}
TISSUE_INDEX = {name: idx for idx, name in TISSUE_NAMES.items()}
BRAIN_TISSUES = frozenset({CSF2, GM, WM})


@dataclass(frozen=True)
class OpticalProperties:
    mu_a: float
    mu_s: float
    g: float
    nu: float

    def __post_init__(self):
        if not self.mu_a >= 0:
            raise ConfigurationError(f"mu_a must be >= 0, got {self.mu_a}")
        if not self.mu_s > 0:
            raise ConfigurationError(f"mu_s must be > 0, got {self.mu_s}")
        if not -1 < self.g < 1:
            raise ConfigurationError(f"g must lie in (-1, 1), got {self.g}")
        if not self.nu >= 1:
            raise ConfigurationError(f"nu must be >= 1, got {self.nu}")


# Baseline optical parameters at 798 nm.
DEFAULT_TISSUES = {
    SS: OpticalProperties(mu_a=0.015, mu_s=16.0, g=0.9, nu=1.4),
    CSF1: OpticalProperties(mu_a=0.004, mu_s=1.6, g=0.9, nu=1.4),
    CSF2: OpticalProperties(mu_a=0.002, mu_s=0.4, g=0.9, nu=1.4),
    GM: OpticalProperties(mu_a=0.048, mu_s=5.0, g=0.9, nu=1.4),
    WM: OpticalProperties(mu_a=0.037, mu_s=10.0, g=0.9, nu=1.4),
}


def tissue_index(key) -> int:
    """Resolve a tissue given either its integer index or its display name."""
    if isinstance(key, str):
        try:
            return TISSUE_INDEX[key]
        except KeyError:
            raise ConfigurationError(f"unknown tissue name {key!r}") from None
    return int(key)


@dataclass
class VoxelPhantom:
    dims: tuple[int, int, int]
    voxel_size: float
    labels: np.ndarray
    tissue_table: dict[int, OpticalProperties]

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if self.labels.shape != self.dims:
            raise ConfigurationError(f"label array shape {self.labels.shape} != dims {self.dims}")
        if self.voxel_size <= 0:
            raise ConfigurationError("voxel_size must be positive")
        present = set(np.unique(self.labels).tolist()) - {AIR}
        missing = present - set(self.tissue_table)
        if missing:
            raise ConfigurationError(f"labels {sorted(missing)} have no tissue_table entry")

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.dims, dtype=float) * self.voxel_size

    def voxel_centers(self, flat_index=None) -> np.ndarray:
        """Voxel-center coordinates in mm, shape ``(k, 3)``; all voxels by default."""
        if flat_index is None:
            flat_index = np.arange(self.n_voxels)
        ijk = np.stack(np.unravel_index(np.asarray(flat_index), self.dims), axis=-1)
        return (ijk + 0.5) * self.voxel_size

    def tissue_mask(self, tissues) -> np.ndarray:
        idx = [tissue_index(t) for t in tissues]
        return np.isin(self.labels, idx)

    def property_lookup(self, name: str) -> np.ndarray:
        """Per-tissue lookup array indexed by label (entry 0 is air)."""
        n = max(max(self.tissue_table, default=0), 5) + 1
        air = {"mu_a": 0.0, "mu_s": 0.0, "g": 0.0, "nu": 1.0}[name]
        out = np.full(n, air, dtype=float)
        for idx, props in self.tissue_table.items():
            out[idx] = getattr(props, name)
        return out

    def mu_a_volume(self) -> np.ndarray:
        """Flat per-voxel baseline absorption (C order), zero outside."""
        return self.property_lookup("mu_a")[self.labels.ravel()]

    def with_tissue_mu_a(self, changes: Mapping) -> "VoxelPhantom":
        """Copy of the phantom with selected tissues' baseline mu_a replaced."""
        table = dict(self.tissue_table)
        for key, value in changes.items():
            idx = tissue_index(key)
            if idx not in table:
                raise ConfigurationError(f"tissue {key!r} absent from tissue table")
            table[idx] = replace(table[idx], mu_a=float(value))
        return VoxelPhantom(self.dims, self.voxel_size, self.labels.copy(), table)

    def exterior_is_connected(self) -> bool:
        air = np.pad(self.labels == AIR, 1, constant_values=True)
        _, n = ndimage.label(air)
        return n == 1


@dataclass
class LayeredPhantomConfig:
    """Geometry of a concentric layered phantom.

    ``shape`` is ``"hemisphere"`` (dome resting on a flat base) or ``"slab"``
    (layers stacked below a flat top surface). Thicknesses in mm; the white
    matter fills whatever remains inside the gray matter.
    """

    dims: tuple[int, int, int] = (32, 32, 32)
    voxel_size: float = 2.0
    shape: str = "hemisphere"
    radius: float | None = None
    base_margin: int = 1
    ss_thickness: float = 4.0
    csf1_thickness: float = 2.0
    gm_thickness: float = 4.0
    csf2_pockets: list = field(default_factory=list)
    tissue_table: dict | None = None

    @classmethod
    def from_dict(cls, d: Mapping) -> "LayeredPhantomConfig":
        d = dict(d)
        if "tissue_table" in d and d["tissue_table"] is not None:
            d["tissue_table"] = {
                tissue_index(k): OpticalProperties(**v) for k, v in d["tissue_table"].items()
            }
        if "dims" in d:
            d["dims"] = tuple(d["dims"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown phantom keys: {sorted(unknown)}")
        return cls(**d)


def build_layered_phantom(spec: LayeredPhantomConfig) -> VoxelPhantom:
    """Rasterize a layered hemisphere or slab onto a cubic voxel grid.

    A voxel takes the tissue of the layer containing its center. CSF-2
    pockets, given as ``(center_mm, radius_mm)`` pairs, overwrite brain
    (GM/WM) voxels only. The result is a pure function of ``spec``.
    """
    dims = tuple(int(v) for v in spec.dims)
    if len(dims) != 3 or min(dims) < 16:
        raise ConfigurationError(f"dims must be a triple with every axis >= 16, got {dims}")
    h = float(spec.voxel_size)
    if h <= 0:
        raise ConfigurationError("voxel_size must be positive")
    thick = np.array([spec.ss_thickness, spec.csf1_thickness, spec.gm_thickness], dtype=float)
    if np.any(thick < 0) or not np.all(np.isfinite(thick)):
        raise ConfigurationError(f"layer thicknesses must be finite and >= 0, got {thick}")
    if spec.ss_thickness <= 0:
        raise ConfigurationError("scalp & skull thickness must be positive")

    extent = np.asarray(dims) * h
    centers = [(np.arange(n) + 0.5) * h for n in dims]
    x, y, z = np.meshgrid(*centers, indexing="ij")
    base = spec.base_margin * h

    if spec.shape == "hemisphere":
        r_max = min(extent[0] / 2, extent[1] / 2, extent[2] - base) - h
        radius = r_max if spec.radius is None else float(spec.radius)
        if radius <= 0 or radius > r_max + 1e-9:
            raise ConfigurationError(f"hemisphere radius {radius} must lie in (0, {r_max}]")
        half_extent = radius
        c = np.array([extent[0] / 2, extent[1] / 2, base])
        inside = z >= base
        depth = radius - np.sqrt((x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2)
    elif spec.shape == "slab":
        top = extent[2] - spec.base_margin * h
        half_extent = top / 2
        inside = np.ones(dims, dtype=bool)
        depth = top - z
    else:
        raise ConfigurationError(f"unknown phantom shape {spec.shape!r}")

    if thick.sum() > half_extent:
        raise ConfigurationError(
            f"layer thicknesses sum to {thick.sum()} mm, more than half-extent {half_extent} mm"
        )

    bounds = np.cumsum(thick)
    labels = np.zeros(dims, dtype=np.uint8)
    body = inside & (depth >= 0)
    labels[body] = WM
    labels[body & (depth < bounds[2])] = GM
    labels[body & (depth < bounds[1])] = CSF1
    labels[body & (depth < bounds[0])] = SS

    for center, r in spec.csf2_pockets:
        center = np.asarray(center, dtype=float)
        pocket = (x - center[0]) ** 2 + (y - center[1]) ** 2 + (z - center[2]) ** 2 <= float(r) ** 2
        labels[pocket & ((labels == GM) | (labels == WM))] = CSF2

    table = dict(DEFAULT_TISSUES if spec.tissue_table is None else spec.tissue_table)
    phantom = VoxelPhantom(dims, h, labels, table)
    if not phantom.exterior_is_connected():
        raise ConfigurationError("phantom exterior is not connected")
    return phantom


@dataclass
class PerturbationField:
    shape: tuple[int, int, int]
    delta_mu_a: np.ndarray

    @classmethod
    def zeros(cls, phantom: VoxelPhantom) -> "PerturbationField":
        return cls(phantom.dims, np.zeros(phantom.dims))

    @property
    def support(self) -> np.ndarray:
        return self.delta_mu_a != 0

    @property
    def nnz(self) -> int:
        return int(np.count_nonzero(self.delta_mu_a))

    def flat(self) -> np.ndarray:
        return self.delta_mu_a.ravel()

    def __add__(self, other: "PerturbationField") -> "PerturbationField":
        if self.shape != other.shape:
            raise ConfigurationError("cannot add perturbation fields of different shapes")
        return PerturbationField(self.shape, self.delta_mu_a + other.delta_mu_a)


def insert_perturbation(
    phantom: VoxelPhantom,
    center,
    radius: float,
    contrast: float,
    tissue_filter=None,
    field: PerturbationField | None = None,
) -> PerturbationField:
    """Add a spherical absorption change of ``contrast`` mm^-1.

    Voxels whose centers lie within ``radius`` of ``center`` and inside the
    phantom (optionally only in ``tissue_filter``) receive the contrast. When
    ``field`` is given the sphere is added on top of it.
    """
    center = np.asarray(center, dtype=float)
    if radius <= 0:
        raise ConfigurationError("perturbation radius must be positive")
    if center.shape != (3,) or np.any(center < 0) or np.any(center > phantom.extent):
        raise ConfigurationError(f"perturbation center {center} lies outside the grid")
    coords = phantom.voxel_centers().reshape(*phantom.dims, 3)
    ball = np.sum((coords - center) ** 2, axis=-1) <= radius**2
    allowed = phantom.labels != AIR
    if tissue_filter is not None:
        allowed &= phantom.tissue_mask(tissue_filter)
    sel = ball & allowed
    out = PerturbationField.zeros(phantom) if field is None else PerturbationField(
        field.shape, field.delta_mu_a.copy()
    )
    if not sel.any():
        warnings.warn(f"perturbation at {center.tolist()} r={radius} hits no eligible voxel", stacklevel=2)
        return out
    out.delta_mu_a[sel] += contrast
    return out


@dataclass
class OptodeConfig:
    source_positions: np.ndarray
    source_normals: np.ndarray
    source_waists: np.ndarray
    detector_positions: np.ndarray
    detector_radii: np.ndarray
    frequency: float
    pairs: np.ndarray
    sds_cutoff: float
    source_voxels: np.ndarray = None
    detector_voxels: np.ndarray = None

    @property
    def n_sources(self) -> int:
        return len(self.source_positions)

    @property
    def n_detectors(self) -> int:
        return len(self.detector_positions)

    @property
    def m(self) -> int:
        return len(self.pairs)

    @property
    def l(self) -> int:
        return self.n_sources + self.n_detectors

    def separations(self) -> np.ndarray:
        s = self.source_positions[self.pairs[:, 0]]
        d = self.detector_positions[self.pairs[:, 1]]
        return np.linalg.norm(s - d, axis=1)


def surface_voxels(labels: np.ndarray) -> np.ndarray:
    """Labeled voxels with at least one exterior face-neighbour (grid edge counts as exterior)."""
    tissue = labels != AIR
    padded = np.pad(tissue, 1, constant_values=False)
    interior = np.ones_like(tissue)
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return tissue & ~interior


def inward_normals(phantom: VoxelPhantom, sigma: float = 1.5) -> np.ndarray:
    """Unit inward normals from the gradient of a smoothed tissue indicator."""
    ind = ndimage.gaussian_filter((phantom.labels != AIR).astype(float), sigma=sigma, mode="constant")
    grad = np.stack(np.gradient(ind), axis=-1)
    norm = np.linalg.norm(grad, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(norm > 0, grad / norm, 0.0)


def _snap_sites(phantom, sites, normals, max_snap):
    surf = np.flatnonzero(surface_voxels(phantom.labels).ravel())
    centers = phantom.voxel_centers(surf)
    h = phantom.voxel_size
    positions, inward, voxels = [], [], []
    for site in np.atleast_2d(np.asarray(sites, dtype=float)):
        dist = np.linalg.norm(centers - site, axis=1)
        k = int(np.argmin(dist))
        if dist[k] > max_snap:
            raise PlacementError(
                f"site {site.tolist()} is {dist[k]:.2f} mm from the nearest surface voxel (limit {max_snap})"
            )
        ijk = np.unravel_index(surf[k], phantom.dims)
        n = normals[ijk]
        if not np.any(n):
            raise PlacementError(f"no surface normal available at site {site.tolist()}")
        # The optode sits on the surface, half a voxel outward of the voxel center.
        positions.append(centers[k] - 0.5 * h * n)
        inward.append(n)
        voxels.append(surf[k])
    return np.array(positions).reshape(-1, 3), np.array(inward).reshape(-1, 3), np.array(voxels, dtype=np.int64)


def place_optodes(
    phantom: VoxelPhantom,
    source_sites,
    detector_sites,
    f: float,
    sds_cutoff: float,
    waist: float = 1.25,
    capture_radius: float = 1.82,
    max_snap: float | None = None,
    normal_sigma: float = 1.5,
) -> OptodeConfig:
    """Snap sites to the phantom surface and enumerate source-major pairs.

    Pairs ``(i, j)`` are listed source by source, detectors ascending, keeping
    only those with source-detector separation at most ``sds_cutoff``.
    """
    if max_snap is None:
        max_snap = 2.0 * phantom.voxel_size
    normals = inward_normals(phantom, normal_sigma)
    spos, snorm, svox = _snap_sites(phantom, source_sites, normals, max_snap)
    dpos, _, dvox = _snap_sites(phantom, detector_sites, normals, max_snap)
    if len(spos) == 0 or len(dpos) == 0:
        raise ConfigurationError("at least one source and one detector are required")
    dist = np.linalg.norm(spos[:, None, :] - dpos[None, :, :], axis=-1)
    pairs = np.argwhere(dist <= sds_cutoff).astype(np.int64)
    if len(pairs) == 0:
        raise ConfigurationError(f"no source-detector pair within sds_cutoff={sds_cutoff} mm")
    return OptodeConfig(
        source_positions=spos,
        source_normals=snorm,
        source_waists=np.full(len(spos), float(waist)),
        detector_positions=dpos,
        detector_radii=np.full(len(dpos), float(capture_radius)),
        frequency=float(f),
        pairs=pairs,
        sds_cutoff=float(sds_cutoff),
        source_voxels=svox,
        detector_voxels=dvox,
    )


def compute_fov(J_total: np.ndarray, threshold_fraction: float, reference_columns=None) -> np.ndarray:
    """Column mask of voxels sensitive enough to influence some measurement.

    Column ``j`` is kept when ``|J[r, j]|`` exceeds ``threshold_fraction``
    times the largest ``|J[r, :]|`` over ``reference_columns`` (the brain) for
    at least one row ``r``. Rows without any reference sensitivity are skipped.
    """
    if not 0 < threshold_fraction < 1:
        raise ConfigurationError("threshold_fraction must lie in (0, 1)")
    A = np.abs(np.asarray(J_total, dtype=float))
    ref = A if reference_columns is None else A[:, np.asarray(reference_columns)]
    if ref.shape[1] == 0:
        raise ConfigurationError("no reference columns for the FOV threshold")
    row_max = ref.max(axis=1)
    live = row_max > 0
    if not live.any():
        raise ConfigurationError("empty FOV: the Jacobian has no sensitivity in the reference region")
    fov = np.any(A[live] > threshold_fraction * row_max[live, None], axis=0)
    return fov


@dataclass
class RoiSpec:
    """Selects the ROI inside the FOV.

    kind:
      ``"fov"``        whole FOV
      ``"half_space"`` voxels with ``(center - point) . normal >= 0``
      ``"tissues"``    voxels whose label is in ``tissues``
    With ``as_roni=True`` the selection defines the RONI instead.
    """

    kind: str = "fov"
    normal: Sequence[float] | None = None
    point: Sequence[float] | None = None
    tissues: Sequence | None = None
    as_roni: bool = False

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "RoiSpec":
        return cls() if d is None else cls(**d)

    def select(self, phantom: VoxelPhantom) -> np.ndarray:
        if self.kind == "fov":
            sel = np.ones(phantom.dims, dtype=bool)
        elif self.kind == "half_space":
            if self.normal is None or self.point is None:
                raise ConfigurationError("half_space ROI needs 'normal' and 'point'")
            c = phantom.voxel_centers().reshape(*phantom.dims, 3)
            sel = (c - np.asarray(self.point, float)) @ np.asarray(self.normal, float) >= 0
        elif self.kind == "tissues":
            if not self.tissues:
                raise ConfigurationError("tissues ROI needs a nonempty tissue list")
            sel = phantom.tissue_mask(self.tissues)
        else:
            raise ConfigurationError(f"unknown ROI kind {self.kind!r}")
        return ~sel if self.as_roni else sel


@dataclass
class RegionMasks:
    fov: np.ndarray
    roi: np.ndarray
    roni: np.ndarray
    fov_index: np.ndarray
    roi_columns: np.ndarray
    roni_columns: np.ndarray

    @property
    def n(self) -> int:
        return int(self.roi.sum())

    @property
    def n_tilde(self) -> int:
        return int(self.roni.sum())

    @property
    def n_total(self) -> int:
        return int(self.fov.sum())

    @property
    def roi_index(self) -> np.ndarray:
        return self.fov_index[self.roi_columns]

    @property
    def roni_index(self) -> np.ndarray:
        return self.fov_index[self.roni_columns]


def split_roi_roni(fov: np.ndarray, roi_spec, phantom: VoxelPhantom) -> RegionMasks:
    """Partition the FOV volume mask into ROI and RONI.

    ``roi_spec`` is a :class:`RoiSpec`, a mapping accepted by
    :meth:`RoiSpec.from_dict`, or a callable ``(centers_mm, labels) -> bool
    volume``. Column maps index into the C-ordered FOV voxel list, so
    ``J_total[:, roi_columns]`` is the ROI Jacobian.
    """
    fov = np.asarray(fov, dtype=bool).reshape(phantom.dims)
    if callable(roi_spec):
        centers = phantom.voxel_centers().reshape(*phantom.dims, 3)
        sel = np.asarray(roi_spec(centers, phantom.labels), dtype=bool)
    else:
        if not isinstance(roi_spec, RoiSpec):
            roi_spec = RoiSpec.from_dict(roi_spec)
        sel = roi_spec.select(phantom)
    roi = fov & sel
    if not roi.any():
        raise ConfigurationError("ROI selection is empty inside the FOV")
    roni = fov & ~roi
    fov_index = np.flatnonzero(fov.ravel())
    in_roi = roi.ravel()[fov_index]
    return RegionMasks(
        fov=fov,
        roi=roi,
        roni=roni,
        fov_index=fov_index,
        roi_columns=np.flatnonzero(in_roi),
        roni_columns=np.flatnonzero(~in_roi),
    )
