"""Shared state of a scenario: phantom, optodes, cached records, FOV and prior."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from pathlib import Path

import numpy as np

from ..bayes import prior_covariance
from ..errors import ConfigurationError
from ..phantom import (
    AIR,
    PerturbationField,
    build_layered_phantom,
    compute_fov,
    insert_perturbation,
    place_optodes,
    split_roi_roni,
    tissue_index,
)
from ..replay import absorption_jacobian, simulate_frame
from ..transport import load_records, save_records, simulate_source
from .config import ScenarioConfig

log = logging.getLogger(__name__)

# scenario keys that only affect the case stage
RESEEDABLE = {"seed", "truth", "case", "coupling", "roi", "projection", "baseline", "output_dir"}


def resolve_sites(phantom_cfg, phantom, sites) -> np.ndarray:
    """Turn config sites into mm coordinates.

    Three-element sites are used as given. Two-element sites are ``(dx, dy)``
    offsets from the apex of a hemisphere (projected radially onto the dome)
    or from the center of a slab's top surface.
    """
    out = []
    ext = phantom.extent
    base = phantom_cfg.base_margin * phantom.voxel_size
    for s in sites:
        s = np.asarray(s, dtype=float)
        if s.shape == (3,):
            out.append(s)
            continue
        if s.shape != (2,):
            raise ConfigurationError(f"optode site {s.tolist()} must have 2 or 3 coordinates")
        if phantom_cfg.shape == "hemisphere":
            radius = phantom_cfg.radius
            if radius is None:
                radius = min(ext[0] / 2, ext[1] / 2, ext[2] - base) - phantom.voxel_size
            c = np.array([ext[0] / 2, ext[1] / 2, base])
            v = np.array([s[0], s[1], radius])
            out.append(c + radius * v / np.linalg.norm(v))
        else:
            top = ext[2] - base
            out.append(np.array([ext[0] / 2 + s[0], ext[1] / 2 + s[1], top]))
    return np.array(out)


class Workbench:
    """Everything a case needs, computed once per phantom and transport setup.

    Photon records are cached under ``cache_dir`` keyed by a hash of the
    geometry, the scattering properties and the transport settings; absorption
    does not enter the key because trajectories never depend on it.
    """

    def __init__(self, cfg: ScenarioConfig, cache_dir=None):
        self.cfg = cfg
        self.timing = {}
        t0 = time.perf_counter()
        self.phantom_cfg = cfg.phantom_config()
        self.phantom = build_layered_phantom(self.phantom_cfg)
        o = cfg.optodes
        self.optodes = place_optodes(
            self.phantom,
            resolve_sites(self.phantom_cfg, self.phantom, o["sources"]),
            resolve_sites(self.phantom_cfg, self.phantom, o["detectors"]),
            f=float(o["frequency"]),
            sds_cutoff=float(o["sds_cutoff"]),
            waist=float(o.get("waist", 1.25)),
            capture_radius=float(o.get("capture_radius", 1.82)),
        )
        self.seeds = cfg.seeds()
        self.timing["setup"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        self.cache_dir = None if cache_dir is None else Path(cache_dir)
        self.records = self._records()
        self.timing["transport"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        self.baseline_mu_a = self.phantom.mu_a_volume()
        labels = self.phantom.labels.ravel()
        self.tissue_voxels = np.flatnonzero(labels != AIR)
        J_all = self.jacobian(self.baseline_mu_a, self.tissue_voxels)
        brain = np.isin(labels[self.tissue_voxels], [tissue_index(t) for t in cfg.fov["reference_tissues"]])
        fov_cols = compute_fov(J_all, float(cfg.fov["threshold"]), reference_columns=np.flatnonzero(brain))
        fov = np.zeros(self.phantom.n_voxels, dtype=bool)
        fov[self.tissue_voxels[fov_cols]] = True
        self.fov = fov.reshape(self.phantom.dims)
        self.fov_index = np.flatnonzero(fov)
        self.J_total = J_all[:, fov_cols]
        self.timing["jacobian"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        p = cfg.prior
        self.prior = prior_covariance(self.phantom.voxel_centers(self.fov_index), float(p["sigma"]), float(p["d"]))
        self.timing["prior"] = time.perf_counter() - t0

    @property
    def pairs(self) -> np.ndarray:
        return self.optodes.pairs

    @property
    def f(self) -> float:
        return self.optodes.frequency

    @property
    def m(self) -> int:
        return self.optodes.m

    def cache_key(self) -> str:
        t = self.cfg.transport
        blob = {
            "labels": hashlib.sha256(self.phantom.labels.tobytes()).hexdigest(),
            "voxel_size": self.phantom.voxel_size,
            "scatter": {k: [v.mu_s, v.g, v.nu] for k, v in sorted(self.phantom.tissue_table.items())},
            "sources": np.round(self.optodes.source_positions, 12).tolist(),
            "normals": np.round(self.optodes.source_normals, 12).tolist(),
            "waists": self.optodes.source_waists.tolist(),
            "detectors": np.round(self.optodes.detector_positions, 12).tolist(),
            "radii": self.optodes.detector_radii.tolist(),
            "n_packets": int(t["n_packets"]),
            "seed": self.seeds["transport"],
            "tof_max": float(t.get("tof_max", 5e-9)),
        }
        return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()[:16]

    def _records(self):
        t = self.cfg.transport
        kw = dict(
            n_packets=int(t["n_packets"]),
            seed=self.seeds["transport"],
            tof_max=float(t.get("tof_max", 5e-9)),
            workers=int(t.get("workers", 1)),
        )
        folder = None
        if self.cache_dir is not None:
            folder = self.cache_dir / self.cache_key()
            files = [folder / f"source_{s:03d}.bin" for s in range(self.optodes.n_sources)]
            if all(p.exists() for p in files):
                log.info("reusing cached photon records in %s", folder)
                self.record_files = files
                return [load_records(p) for p in files]
        out = []
        for s in range(self.optodes.n_sources):
            log.info("simulating source %d (%d packets)", s, kw["n_packets"])
            out.append(simulate_source(self.phantom, self.optodes, s, **kw))
        if folder is not None:
            folder.mkdir(parents=True, exist_ok=True)
            self.record_files = []
            for rs in out:
                p = folder / f"source_{rs.source_index:03d}.bin"
                save_records(p, rs)
                self.record_files.append(p)
        return out

    def jacobian(self, mu_a, columns=None) -> np.ndarray:
        cols = self.fov_index if columns is None else columns
        return absorption_jacobian(self.records, mu_a, self.f, self.pairs, mask=cols)

    def frame(self, mu_a):
        return simulate_frame(self.records, mu_a, self.f, self.pairs)

    def truth_field(self, entries=None) -> PerturbationField:
        entries = self.cfg.truth if entries is None else entries
        fld = PerturbationField.zeros(self.phantom)
        for e in entries:
            fld = insert_perturbation(
                self.phantom, e["center"], float(e["radius"]), float(e["contrast"]), e.get("tissues"), field=fld
            )
        return fld

    def masks(self, roi_spec=None):
        return split_roi_roni(self.fov, self.cfg.roi_spec() if roi_spec is None else roi_spec, self.phantom)

    def nullspace_k(self) -> int:
        k = self.cfg.projection.get("k")
        return int(np.ceil(2 * self.m / 4)) if k is None else int(k)

    def with_overrides(self, **over) -> "Workbench":
        """Shallow copy with scenario keys that do not touch records, Jacobian or prior.

        Noise and coupling draws follow the new root seed; everything computed
        at construction is shared, which requires a pinned ``transport.seed``.
        """
        bad = set(over) - RESEEDABLE
        if bad:
            raise ConfigurationError(f"keys {sorted(bad)} need a new Workbench")
        cfg = self.cfg.with_overrides(**over)
        if cfg.seeds()["transport"] != self.seeds["transport"]:
            raise ConfigurationError("with_overrides needs a pinned transport.seed")
        other = copy.copy(self)
        other.cfg = cfg
        other.seeds = cfg.seeds()
        return other

    def with_seed(self, seed: int) -> "Workbench":
        return self.with_overrides(seed=int(seed))
