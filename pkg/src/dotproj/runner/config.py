"""Scenario configuration (YAML) and seed derivation."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from ..errors import ConfigurationError
from ..phantom import LayeredPhantomConfig, RoiSpec

DEFAULT_SCENARIO = {
    "phantom": {
        "dims": [32, 32, 32],
        "voxel_size": 2.0,
        "shape": "hemisphere",
        "radius": 29.0,
        "ss_thickness": 4.0,
        "csf1_thickness": 2.0,
        "gm_thickness": 4.0,
    },
    "optodes": {
        # (dx, dy) offsets from the dome apex, projected radially onto the surface
        "sources": [[0, 0], [-10, -10], [10, 10], [-10, 10], [10, -10]],
        "detectors": [[-10, 0], [10, 0], [0, -10], [0, 10], [-20, 0], [20, 0], [0, -20], [0, 20]],
        "frequency": 100e6,
        "sds_cutoff": 25.0,
        "waist": 1.25,
        "capture_radius": 3.0,
    },
    "transport": {"n_packets": 100_000, "seed": 20240101, "tof_max": 5e-9, "workers": 1},
    "fov": {"threshold": 0.01, "reference_tissues": ["CSF-2", "GM", "WM"]},
    "prior": {"sigma": 0.003, "d": 3.0},
    # one brain sphere on each side of the x = 32 mm plane
    "truth": [
        {"center": [26.0, 32.0, 22.0], "radius": 5.0, "contrast": 0.008},
        {"center": [40.0, 32.0, 22.0], "radius": 5.0, "contrast": 0.008},
    ],
    "case": 1,
    "coupling": {"delta_amp": 0.9, "delta_phase": math.pi / 360},
    "roi": {"kind": "half_space", "normal": [-1.0, 0.0, 0.0], "point": [32.0, 32.0, 0.0]},
    "projection": {"k": None, "rank_tolerance": 1e-10},
    "baseline": {"true_mu_a": {"GM": 0.014, "WM": 0.0032}, "probes": {"GM": -0.017, "WM": -0.013}},
    "seed": 0,
    "output_dir": "runs/scenario",
}

REQUIRED = {
    1: ("coupling",),
    2: ("roi",),
    3: ("baseline",),
    4: ("coupling", "roi"),
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ScenarioConfig:
    phantom: dict
    optodes: dict
    transport: dict
    fov: dict
    prior: dict
    truth: list
    case: int
    coupling: dict | None
    roi: dict | None
    projection: dict
    baseline: dict | None
    seed: int
    output_dir: str
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, d: dict, defaults: bool = True) -> "ScenarioConfig":
        merged = _merge(DEFAULT_SCENARIO, d) if defaults else dict(d)
        unknown = set(merged) - set(DEFAULT_SCENARIO)
        if unknown:
            raise ConfigurationError(f"unknown scenario keys: {sorted(unknown)}")
        cfg = cls(**{k: merged.get(k) for k in DEFAULT_SCENARIO}, raw=merged)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: top level must be a mapping")
        return cls.from_dict(data)

    def with_overrides(self, **over) -> "ScenarioConfig":
        return ScenarioConfig.from_dict(_merge(self.raw, over), defaults=False)

    def validate(self) -> None:
        if self.case not in REQUIRED:
            raise ConfigurationError(f"case must be 1, 2, 3 or 4, got {self.case!r}")
        for key in REQUIRED[self.case]:
            if not getattr(self, key):
                raise ConfigurationError(f"case {self.case} requires a '{key}' section")
        if self.case in (2, 4) and RoiSpec.from_dict(self.roi).kind == "fov":
            raise ConfigurationError(f"case {self.case} needs an ROI narrower than the FOV")
        if self.case == 3:
            b = self.baseline
            if not b.get("true_mu_a") or not b.get("probes"):
                raise ConfigurationError("case 3 needs baseline.true_mu_a and baseline.probes")
            if any(v == 0 for v in b["probes"].values()):
                raise ConfigurationError("baseline probe shifts must be nonzero")
        if int(self.transport.get("n_packets", 0)) < 1:
            raise ConfigurationError("transport.n_packets must be >= 1")
        for t in self.truth:
            if not {"center", "radius", "contrast"} <= set(t):
                raise ConfigurationError(f"truth entry {t} needs center, radius and contrast")

    def phantom_config(self) -> LayeredPhantomConfig:
        return LayeredPhantomConfig.from_dict(self.phantom)

    def roi_spec(self) -> RoiSpec:
        return RoiSpec.from_dict(self.roi)

    def seeds(self) -> dict:
        """Per-purpose seeds derived from the root seed.

        ``numpy.random.SeedSequence(seed).spawn(3)`` gives the noise, coupling
        and transport streams in that order; ``transport.seed`` overrides the
        last one so a simulation can be shared between scenario seeds.
        """
        children = np.random.SeedSequence(int(self.seed)).spawn(3)
        noise, coupling, transport = (int(c.generate_state(1, np.uint64)[0] >> np.uint64(1)) for c in children)
        if self.transport.get("seed") is not None:
            transport = int(self.transport["seed"])
        return {"noise": noise, "coupling": coupling, "transport": transport}

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)
