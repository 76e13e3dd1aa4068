"""On-disk artifacts of a run: volumes, slices, error table, JSON report and manifest."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from ..io import save_volume, sha256, write_json
from .slices import export_slices, scatter_to_volume

REPORT_NAME = "report.json"
ERROR_COLUMNS = ("case", "mask", "naive", "projected", "reference", "projection_rank", "k")


def manifest_entries(root, paths) -> list[dict]:
    root = Path(root)
    out = []
    for p in sorted({Path(p) for p in paths}):
        out.append({"path": str(p.relative_to(root)), "sha256": sha256(p), "bytes": p.stat().st_size})
    return out


def verify_manifest(report_path) -> list[str]:
    """Return the manifest paths that are missing or whose checksum changed."""
    report_path = Path(report_path)
    rep = json.loads(report_path.read_text())
    bad = []
    for entry in rep.get("manifest", []):
        p = report_path.parent / entry["path"]
        if not p.exists() or sha256(p) != entry["sha256"]:
            bad.append(entry["path"])
    return bad


def error_rows(report) -> list[dict]:
    s = report if isinstance(report, dict) else report.summary()
    return [{
        "case": s["case"],
        "mask": s["error_mask"],
        **{k: s["errors"][k] for k in ("naive", "projected", "reference")},
        "projection_rank": s["projection"]["rank"],
        "k": s["projection"]["k"],
    }]


def write_error_table(path, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ERROR_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return path


def _slice_planes(wb) -> list[tuple[int, int]]:
    """Axial plane through the first truth sphere and the coronal plane through the grid middle."""
    h = wb.phantom.voxel_size
    dims = wb.phantom.dims
    if wb.cfg.truth:
        c = np.asarray(wb.cfg.truth[0]["center"], dtype=float)
        z = int(np.clip(np.floor(c[2] / h), 0, dims[2] - 1))
    else:
        z = dims[2] // 2
    return [(2, z), (1, dims[1] // 2)]


def write_run_artifacts(report, wb, out_dir) -> Path:
    """Write everything for one case run and return the report path.

    The manifest covers every file written here except ``report.json`` itself.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dims = wb.phantom.dims
    h = wb.phantom.voxel_size
    written = []
    vols = dict(report.estimates)
    if report.truth is not None:
        vols["truth"] = report.truth
    planes = _slice_planes(wb)
    a = max((float(np.max(np.abs(v))) for v in vols.values() if np.size(v)), default=0.0)
    for name, vec in sorted(vols.items()):
        vol = scatter_to_volume(vec, wb.fov_index, dims)
        written += save_volume(out_dir / "volumes" / f"{name}.f64", vol, h, masks=["fov"],
                               case=report.case, quantity="delta_mu_a_per_mm")
        written += export_slices(vol, wb.phantom, planes, out_dir / "slices", prefix=name,
                                 colormap="diverging", limits=a)
    written += save_volume(out_dir / "volumes" / "fov_mask.u8", wb.fov.astype(np.uint8), h, masks=["fov"])
    written.append(write_error_table(out_dir / "errors.csv", error_rows(report)))
    report.manifest = manifest_entries(out_dir, written)
    return write_json(out_dir / REPORT_NAME, report.summary())


def collect_reports(root) -> list[Path]:
    return sorted(Path(root).rglob(REPORT_NAME))
