import copy
import time

import pytest

from dotproj.runner.config import ScenarioConfig
from dotproj.runner.workbench import Workbench

# 20^3 hemisphere with 3 sources and 6 detectors; builds in a few seconds
SMALL_SCENARIO = {
    "phantom": {"dims": [20, 20, 20], "voxel_size": 2.0, "radius": 17.0,
                "ss_thickness": 3.0, "csf1_thickness": 1.0, "gm_thickness": 3.0},
    "optodes": {"sources": [[0, 0], [-7, -7], [7, 7]],
                "detectors": [[-7, 0], [7, 0], [0, -7], [0, 7], [-14, 0], [14, 0]],
                "sds_cutoff": 20.0},
    "transport": {"n_packets": 20000, "seed": 7},
    "truth": [{"center": [16.0, 20.0, 14.0], "radius": 4.0, "contrast": 0.008},
              {"center": [24.0, 20.0, 14.0], "radius": 4.0, "contrast": 0.008}],
    "roi": {"kind": "half_space", "normal": [-1.0, 0.0, 0.0], "point": [20.0, 20.0, 0.0]},
}


@pytest.fixture
def small_scenario():
    return copy.deepcopy(SMALL_SCENARIO)


@pytest.fixture(scope="session")
def small_workbench(tmp_path_factory):
    cfg = ScenarioConfig.from_dict(copy.deepcopy(SMALL_SCENARIO))
    return Workbench(cfg, cache_dir=tmp_path_factory.mktemp("small_records"))


@pytest.fixture(scope="session")
def desk_workbench(tmp_path_factory):
    """Default desk-scale scenario; ``build_seconds`` covers transport, Jacobian and prior."""
    t0 = time.perf_counter()
    wb = Workbench(ScenarioConfig.from_dict({}), cache_dir=tmp_path_factory.mktemp("desk_records"))
    wb.build_seconds = time.perf_counter() - t0
    return wb
