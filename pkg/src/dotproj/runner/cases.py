"""The four reconstruction scenarios: naive, projected and reference estimates."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..bayes import l2_error, posterior, projected_posterior
from ..projector import (
    baseline_subspace,
    combined_projection,
    coupling_jacobian,
    projection_from_basis,
    roni_subspace,
)
from ..replay import CouplingState, add_noise, apply_coupling, difference_data, tissue_difference_jacobian
from .workbench import Workbench


@dataclass
class RunReport:
    case: int
    errors: dict
    error_mask: str
    projection: dict
    sizes: dict
    timing: dict
    seeds: dict
    config: dict
    manifest: list = field(default_factory=list)
    estimates: dict = field(default_factory=dict, repr=False)
    truth: np.ndarray | None = field(default=None, repr=False)

    def summary(self) -> dict:
        return {
            "case": self.case,
            "errors": self.errors,
            "error_mask": self.error_mask,
            "projection": self.projection,
            "sizes": self.sizes,
            "timing": self.timing,
            "seeds": self.seeds,
            "config": self.config,
            "manifest": self.manifest,
        }


def _noise(wb: Workbench, y0):
    """Noise realization and covariance scaled on the absorption-only signal."""
    y, Gamma_e = add_noise(y0, wb.seeds["noise"])
    return y - y0, Gamma_e


def _signal(wb: Workbench, mu_base, delta, coupling=None):
    z0 = wb.frame(mu_base)
    z = wb.frame(mu_base + delta)
    y0 = difference_data(z, z0)
    if coupling is None:
        return y0, y0
    return y0, difference_data(apply_coupling(z, coupling), z0)


def _coupling_state(wb: Workbench):
    c = wb.cfg.coupling
    return CouplingState.random(
        wb.optodes.n_sources, wb.optodes.n_detectors, float(c["delta_amp"]), float(c["delta_phase"]),
        wb.seeds["coupling"],
    )


def _projection_info(P, eigenvalues=None):
    info = P.metadata()
    if eigenvalues is not None:
        info["eigenvalues"] = np.asarray(eigenvalues).tolist()
    return info


def _sizes(wb, masks=None):
    out = {"m": wb.m, "l": wb.optodes.l, "n_total": int(len(wb.fov_index))}
    if masks is not None:
        out.update(n=masks.n, n_tilde=masks.n_tilde)
    return out


def _report(wb, case, errors, mask_name, proj, masks, t0, estimates, truth):
    timing = dict(wb.timing)
    timing["case"] = time.perf_counter() - t0
    return RunReport(
        case=case,
        errors={k: float(v) for k, v in errors.items()},
        error_mask=mask_name,
        projection=proj,
        sizes=_sizes(wb, masks),
        timing=timing,
        seeds=dict(wb.seeds, root=int(wb.cfg.seed)),
        config=wb.cfg.to_dict(),
        estimates=estimates,
        truth=truth,
    )


def run_case1(wb: Workbench) -> RunReport:
    """Mismodeled coupling: ideal-coupling reference, naive and coupling-projected estimates over the FOV."""
    t0 = time.perf_counter()
    truth = wb.truth_field().flat()
    x_true = truth[wb.fov_index]
    state = _coupling_state(wb)
    y0, y_coupled = _signal(wb, wb.baseline_mu_a, truth, state)
    e, Gamma_e = _noise(wb, y0)
    G = wb.prior.Gamma_x
    Jc = coupling_jacobian(wb.pairs, wb.optodes.n_sources, wb.optodes.n_detectors)
    P = projection_from_basis(Jc.matrix, float(wb.cfg.projection.get("rank_tolerance", 1e-10)), "coupling")
    ref = posterior(wb.J_total, G, Gamma_e, y0 + e, covariance=False).mean
    naive = posterior(wb.J_total, G, Gamma_e, y_coupled + e, covariance=False).mean
    proj = projected_posterior(P, wb.J_total, G, Gamma_e, y_coupled + e, covariance=False).mean
    errors = {k: l2_error(v, x_true) for k, v in (("naive", naive), ("projected", proj), ("reference", ref))}
    return _report(wb, 1, errors, "fov", _projection_info(P), None, t0,
                   {"naive": naive, "projected": proj, "reference": ref}, x_true)


def run_case2(wb: Workbench) -> RunReport:
    """RONI activity: ROI-only reconstructions with and without the RONI projection."""
    t0 = time.perf_counter()
    masks = wb.masks()
    truth = wb.truth_field().flat()
    x_true = truth[wb.fov_index]
    y0, _ = _signal(wb, wb.baseline_mu_a, truth)
    e, Gamma_e = _noise(wb, y0)
    y = y0 + e
    J = wb.J_total[:, masks.roi_columns]
    J_tilde = wb.J_total[:, masks.roni_columns]
    G_roi = wb.prior.block(masks.roi_columns).Gamma_x
    G_roni = wb.prior.block(masks.roni_columns).Gamma_x
    k = wb.nullspace_k()
    V_tilde, w = roni_subspace(J_tilde, G_roni, k)
    P = projection_from_basis(V_tilde, float(wb.cfg.projection.get("rank_tolerance", 1e-10)), "roni")
    full = posterior(wb.J_total, wb.prior.Gamma_x, Gamma_e, y, covariance=False).mean
    ref = full[masks.roi_columns]
    naive = posterior(J, G_roi, Gamma_e, y, covariance=False).mean
    proj = projected_posterior(P, J, G_roi, Gamma_e, y, covariance=False).mean
    xr = x_true[masks.roi_columns]
    errors = {k_: l2_error(v, xr) for k_, v in (("naive", naive), ("projected", proj), ("reference", ref))}
    return _report(wb, 2, errors, "roi", _projection_info(P, w), masks, t0,
                   _embed(masks, {"naive": naive, "projected": proj, "reference": ref}), x_true)


def run_case3(wb: Workbench) -> RunReport:
    """Misspecified tissue baselines: data at true levels, Jacobian at assumed levels."""
    t0 = time.perf_counter()
    b = wb.cfg.baseline
    true_phantom = wb.phantom.with_tissue_mu_a(b["true_mu_a"])
    mu_true = true_phantom.mu_a_volume()
    truth = wb.truth_field().flat()
    x_true = truth[wb.fov_index]
    y0, _ = _signal(wb, mu_true, truth)
    e, Gamma_e = _noise(wb, y0)
    y = y0 + e
    G = wb.prior.Gamma_x
    J_assumed = wb.J_total
    J_true = wb.jacobian(mu_true)
    diffs = [
        tissue_difference_jacobian(wb.records, wb.phantom, tissue, float(delta), wb.f, wb.pairs, wb.fov_index)
        for tissue, delta in b["probes"].items()
    ]
    V, w = baseline_subspace(diffs, G, wb.nullspace_k())
    P = projection_from_basis(V, float(wb.cfg.projection.get("rank_tolerance", 1e-10)), "baseline")
    ref = posterior(J_true, G, Gamma_e, y, covariance=False).mean
    naive = posterior(J_assumed, G, Gamma_e, y, covariance=False).mean
    proj = projected_posterior(P, J_assumed, G, Gamma_e, y, covariance=False).mean
    errors = {k: l2_error(v, x_true) for k, v in (("naive", naive), ("projected", proj), ("reference", ref))}
    return _report(wb, 3, errors, "fov", _projection_info(P, w), None, t0,
                   {"naive": naive, "projected": proj, "reference": ref}, x_true)


def run_case4(wb: Workbench) -> RunReport:
    """Coupling mismatch and RONI activity together, projected with ``[J_c, V~]``."""
    t0 = time.perf_counter()
    masks = wb.masks()
    truth = wb.truth_field().flat()
    x_true = truth[wb.fov_index]
    state = _coupling_state(wb)
    y0, y_coupled = _signal(wb, wb.baseline_mu_a, truth, state)
    e, Gamma_e = _noise(wb, y0)
    J = wb.J_total[:, masks.roi_columns]
    J_tilde = wb.J_total[:, masks.roni_columns]
    G_roi = wb.prior.block(masks.roi_columns).Gamma_x
    G_roni = wb.prior.block(masks.roni_columns).Gamma_x
    Jc = coupling_jacobian(wb.pairs, wb.optodes.n_sources, wb.optodes.n_detectors)
    V_tilde, w = roni_subspace(J_tilde, G_roni, wb.nullspace_k())
    P = combined_projection(Jc, V_tilde, None, float(wb.cfg.projection.get("rank_tolerance", 1e-10)))
    full = posterior(wb.J_total, wb.prior.Gamma_x, Gamma_e, y0 + e, covariance=False).mean
    ref = full[masks.roi_columns]
    naive = posterior(J, G_roi, Gamma_e, y_coupled + e, covariance=False).mean
    proj = projected_posterior(P, J, G_roi, Gamma_e, y_coupled + e, covariance=False).mean
    xr = x_true[masks.roi_columns]
    errors = {k: l2_error(v, xr) for k, v in (("naive", naive), ("projected", proj), ("reference", ref))}
    return _report(wb, 4, errors, "roi", _projection_info(P, w), masks, t0,
                   _embed(masks, {"naive": naive, "projected": proj, "reference": ref}), x_true)


def _embed(masks, estimates):
    """ROI-length estimates to FOV-length vectors (zero in the RONI)."""
    out = {}
    for k, v in estimates.items():
        full = np.zeros(len(masks.fov_index))
        full[masks.roi_columns] = v
        out[k] = full
    return out


CASES = {1: run_case1, 2: run_case2, 3: run_case3, 4: run_case4}


def run_case(wb: Workbench, case: int | None = None) -> RunReport:
    return CASES[wb.cfg.case if case is None else int(case)](wb)
