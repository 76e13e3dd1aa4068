"""Command-line entry point: ``dotproj <command> [options]``.

Exit codes: 0 success, 1 other package error or failed manifest check,
2 configuration error, 3 dead channel, 4 numerical error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import yaml

from ..bayes import l2_error, posterior
from ..errors import DotProjError
from ..io import save_array, save_volume, write_json
from ..replay import add_noise, difference_data
from .cases import run_case
from .config import ScenarioConfig
from .report import (
    collect_reports,
    error_rows,
    manifest_entries,
    verify_manifest,
    write_error_table,
    write_run_artifacts,
)
from .slices import export_slices, scatter_to_volume
from .workbench import Workbench

log = logging.getLogger("dotproj")


def _load_config(args) -> ScenarioConfig:
    cfg = ScenarioConfig.load(args.config) if args.config else ScenarioConfig.from_dict({})
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.threads is not None:
        over["transport"] = {"workers": args.threads}
    if getattr(args, "case", None) is not None:
        over["case"] = args.case
    if args.output is not None:
        over["output_dir"] = str(args.output)
    return cfg.with_overrides(**over) if over else cfg


def _workbench(cfg, args) -> Workbench:
    cache = Path(args.cache) if args.cache else Path(cfg.output_dir) / "records"
    return Workbench(cfg, cache_dir=cache)


def cmd_phantom(cfg, args) -> int:
    """Build the phantom and optode layout and write labels, optodes and slices."""
    from ..phantom import build_layered_phantom, place_optodes
    from .workbench import resolve_sites

    out = Path(cfg.output_dir)
    pc = cfg.phantom_config()
    ph = build_layered_phantom(pc)
    o = cfg.optodes
    opt = place_optodes(ph, resolve_sites(pc, ph, o["sources"]), resolve_sites(pc, ph, o["detectors"]),
                        f=float(o["frequency"]), sds_cutoff=float(o["sds_cutoff"]),
                        waist=float(o.get("waist", 1.25)), capture_radius=float(o.get("capture_radius", 1.82)))
    files = list(save_volume(out / "phantom" / "labels.u8", ph.labels, ph.voxel_size,
                             masks=["labels"],
                             tissues={str(k): asdict(p) for k, p in ph.tissue_table.items()}))
    files.append(write_json(out / "phantom" / "optodes.json", {
        "sources": opt.source_positions, "source_normals": opt.source_normals,
        "detectors": opt.detector_positions, "pairs": opt.pairs, "frequency": opt.frequency,
        "separations": opt.separations(),
    }))
    files += export_slices(ph.labels, ph, [(2, ph.dims[2] // 2), (1, ph.dims[1] // 2)], out / "phantom",
                           prefix="labels", colormap="gray")
    print(f"phantom {ph.dims} with {opt.n_sources} sources, {opt.n_detectors} detectors, m={opt.m} -> {out}")
    return 0


def cmd_simulate(cfg, args) -> int:
    """Run (or reuse cached) photon transport for every source."""
    wb = _workbench(cfg, args)
    for rs in wb.records:
        print(f"source {rs.source_index}: {rs.launched_count} launched, {rs.detected_count} detected, "
              f"{rs.escape_count} escaped, {rs.expired_count} expired")
    print(f"records in {wb.cache_dir / wb.cache_key()}")
    return 0


def cmd_jacobian(cfg, args) -> int:
    """Write the FOV absorption Jacobian and the baseline frame."""
    wb = _workbench(cfg, args)
    out = Path(cfg.output_dir) / "jacobian"
    frame = wb.frame(wb.baseline_mu_a)
    meta = dict(f=wb.f, seed=wb.seeds["transport"], row_map=wb.pairs,
                baseline_mu_a={k: v.mu_a for k, v in wb.phantom.tissue_table.items()})
    save_array(out / "J_total.f64", wb.J_total, column_map=wb.fov_index,
               row_layout="lnA rows then phase rows, pairs in row_map order", **meta)
    save_array(out / "baseline_frame.f64", frame.values, **meta)
    print(f"J_total {wb.J_total.shape} -> {out}")
    return 0


def cmd_reconstruct(cfg, args) -> int:
    """Full-FOV reconstruction of the configured truth from ideal data."""
    wb = _workbench(cfg, args)
    out = Path(cfg.output_dir) / "reconstruct"
    truth = wb.truth_field().flat()
    y0 = difference_data(wb.frame(wb.baseline_mu_a + truth), wb.frame(wb.baseline_mu_a))
    y, Gamma_e = add_noise(y0, wb.seeds["noise"])
    res = posterior(wb.J_total, wb.prior.Gamma_x, Gamma_e, y, covariance=False)
    x_true = truth[wb.fov_index]
    err = l2_error(res.mean, x_true)
    files = []
    for name, vec in (("mean", res.mean), ("variance", res.variance), ("truth", x_true)):
        vol = scatter_to_volume(vec, wb.fov_index, wb.phantom.dims)
        files += save_volume(out / f"{name}.f64", vol, wb.phantom.voxel_size, masks=["fov"])
    write_json(out / "reconstruct.json", {"l2_error": err, "diagnostics": res.diagnostics,
                                          "manifest": manifest_entries(out, files)})
    print(f"relative L2 error {err:.4f} -> {out}")
    return 0


def cmd_case(cfg, args) -> int:
    """Run one of the four scenarios and write its report and artifacts."""
    wb = _workbench(cfg, args)
    rep = run_case(wb, cfg.case)
    path = write_run_artifacts(rep, wb, Path(cfg.output_dir) / f"case{cfg.case}")
    e = rep.errors
    print(f"case {cfg.case} ({rep.error_mask}): naive {e['naive']:.4f}  projected {e['projected']:.4f}  "
          f"reference {e['reference']:.4f}  rank {rep.projection['rank']}")
    print(f"report -> {path}")
    return 0


def cmd_report(cfg, args) -> int:
    """Verify manifests of all reports under the output directory and tabulate errors."""
    root = Path(cfg.output_dir)
    paths = collect_reports(root)
    if not paths:
        print(f"no reports under {root}", file=sys.stderr)
        return 1
    rows, failed = [], False
    for p in paths:
        bad = verify_manifest(p)
        if bad:
            failed = True
            print(f"{p}: checksum mismatch or missing: {bad}", file=sys.stderr)
        rows += error_rows(json.loads(p.read_text()))
    table = write_error_table(root / "errors.csv", rows)
    for r in rows:
        print(f"case {r['case']} {r['mask']}: naive {r['naive']:.4f} projected {r['projected']:.4f} "
              f"reference {r['reference']:.4f}")
    print(f"{len(paths)} report(s), table -> {table}")
    return 1 if failed else 0


COMMANDS = {
    "phantom": cmd_phantom,
    "simulate": cmd_simulate,
    "jacobian": cmd_jacobian,
    "reconstruct": cmd_reconstruct,
    "case": cmd_case,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", type=Path, help="scenario YAML file (defaults built in)")
    common.add_argument("-o", "--output", type=Path, help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="root seed (overrides seed)")
    common.add_argument("--threads", type=int, help="transport worker threads")
    common.add_argument("--cache", type=Path, help="photon record cache (default <output>/records)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="dotproj", description="Projection-based DOT reconstruction at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=(COMMANDS[name].__doc__ or name).splitlines()[0])
        if name == "case":
            p.add_argument("case", type=int, choices=(1, 2, 3, 4))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _load_config(args)
        return COMMANDS[args.command](cfg, args)
    except DotProjError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code
    except (FileNotFoundError, yaml.YAMLError) as err:
        print(f"error: cannot read config: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
