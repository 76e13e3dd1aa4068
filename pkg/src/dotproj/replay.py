"""Frequency-domain measurements and exact absorption Jacobians by replay.

A detected packet with per-voxel pathlengths ``l[p, j]`` and time of flight
``t[p]`` carries the complex weight ``|w_p| exp(2 pi i f t_p)`` with
``|w_p| = exp(-sum_j mu_a[j] l[p, j])``. The complex relative intensity of a
source-detector pair is the launched-count average of these weights, and its
log-amplitude and phase are the measurements. Because the paths are fixed,
the measurement is analytic in ``mu_a`` and its gradient follows exactly.

Sums over packets run in launch-counter order with Kahan compensation so
results are reproducible bit for bit.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numba as nb
import numpy as np

from .errors import ConfigurationError, ContractError, DeadChannelError
from .phantom import tissue_index
from .transport import PhotonRecordSet


@nb.njit(cache=True)
def _optical_depth(offsets, voxels, lengths, mu_a):
    n = offsets.shape[0] - 1
    out = np.empty(n)
    for r in range(n):
        s = 0.0
        c = 0.0
        for e in range(offsets[r], offsets[r + 1]):
            yv = mu_a[voxels[e]] * lengths[e] - c
            t = s + yv
            c = (t - s) - yv
            s = t
        out[r] = s
    return out


@nb.njit(cache=True)
def _detector_sums(det, w_re, w_im, n_det):
    x = np.zeros(n_det)
    y = np.zeros(n_det)
    cx = np.zeros(n_det)
    cy = np.zeros(n_det)
    cnt = np.zeros(n_det, np.int64)
    for r in range(det.shape[0]):
        k = det[r]
        v = w_re[r] - cx[k]
        t = x[k] + v
        cx[k] = (t - x[k]) - v
        x[k] = t
        v = w_im[r] - cy[k]
        t = y[k] + v
        cy[k] = (t - y[k]) - v
        y[k] = t
        cnt[k] += 1
    return x, y, cnt


@nb.njit(cache=True)
def _weighted_path_sums(det, slot_of_det, offsets, voxels, lengths, w_re, w_im, n_slots, n_vox):
    """sum_p l[p, j] w_p per (slot, voxel), slots being the requested detectors."""
    sre = np.zeros((n_slots, n_vox))
    sim = np.zeros((n_slots, n_vox))
    cre = np.zeros((n_slots, n_vox))
    cim = np.zeros((n_slots, n_vox))
    for r in range(det.shape[0]):
        k = slot_of_det[det[r]]
        if k < 0:
            continue
        for e in range(offsets[r], offsets[r + 1]):
            j = voxels[e]
            v = lengths[e] * w_re[r] - cre[k, j]
            t = sre[k, j] + v
            cre[k, j] = (t - sre[k, j]) - v
            sre[k, j] = t
            v = lengths[e] * w_im[r] - cim[k, j]
            t = sim[k, j] + v
            cim[k, j] = (t - sim[k, j]) - v
            sim[k, j] = t
    return sre, sim


def packet_weights(records: PhotonRecordSet, mu_a, f: float):
    """Real and imaginary parts of each record's complex weight."""
    mu_a = np.ascontiguousarray(mu_a, dtype=float)
    od = _optical_depth(records.offsets, records.voxels, records.lengths, mu_a)
    mag = np.exp(-od)
    ang = 2.0 * np.pi * f * records.time_of_flight
    return mag * np.cos(ang), mag * np.sin(ang)


def _n_detectors(records: PhotonRecordSet, n_detectors):
    if n_detectors is not None:
        return int(n_detectors)
    return int(records.detector.max()) + 1 if len(records) else 0


def complex_intensity(records: PhotonRecordSet, mu_a, f: float, detectors=None, n_detectors=None) -> np.ndarray:
    """Complex relative intensity ``X + iY`` per detector for one source.

    ``X = (1/N) sum_p |w_p| cos(2 pi f t_p)`` and likewise ``Y`` with sine,
    ``N`` being the launched packet count. When ``detectors`` is given those
    detectors must each have at least one record, otherwise
    :class:`DeadChannelError` lists the empty ``(source, detector)`` pairs.
    """
    nd = _n_detectors(records, n_detectors)
    if detectors is not None:
        nd = max(nd, int(np.max(detectors)) + 1)
    w_re, w_im = packet_weights(records, mu_a, f)
    x, y, cnt = _detector_sums(records.detector.astype(np.int64), w_re, w_im, nd)
    if detectors is not None:
        dead = [(records.source_index, int(d)) for d in detectors if cnt[d] == 0]
        if dead:
            raise DeadChannelError(dead)
    return (x + 1j * y) / records.launched_count


@dataclass
class MeasurementFrame:
    """Length-2m measurement vector: m log-amplitudes then m phases (rad)."""

    values: np.ndarray
    pairs: np.ndarray
    f: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        if self.values.shape != (2 * len(self.pairs),):
            raise ContractError(f"frame of {len(self.values)} values does not match {len(self.pairs)} pairs")

    @property
    def m(self) -> int:
        return len(self.pairs)

    @property
    def log_amplitude(self) -> np.ndarray:
        return self.values[: self.m]

    @property
    def phase(self) -> np.ndarray:
        return self.values[self.m :]

    @classmethod
    def pack(cls, log_amplitude, phase, pairs, f) -> "MeasurementFrame":
        return cls(np.concatenate([np.asarray(log_amplitude, float), np.asarray(phase, float)]), pairs, f)

    def unpack(self) -> tuple[np.ndarray, np.ndarray]:
        return self.log_amplitude.copy(), self.phase.copy()

    def same_layout(self, other: "MeasurementFrame") -> bool:
        return self.f == other.f and np.array_equal(self.pairs, other.pairs)


def measurement_frame(intensities, pairs, f: float) -> MeasurementFrame:
    """Convert per-pair complex intensities to ``(lnA, phi)`` in frame order."""
    c = np.asarray(intensities, dtype=complex)
    dead = np.flatnonzero(np.abs(c) == 0)
    if dead.size:
        raise DeadChannelError([tuple(np.asarray(pairs)[k]) for k in dead])
    return MeasurementFrame.pack(np.log(np.hypot(c.real, c.imag)), np.arctan2(c.imag, c.real), pairs, f)


def pair_intensities(records_list, mu_a, f: float, pairs) -> np.ndarray:
    """Complex intensity of every pair, in pair order."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    out = np.empty(len(pairs), dtype=complex)
    dead = []
    for s in np.unique(pairs[:, 0]):
        rows = np.flatnonzero(pairs[:, 0] == s)
        dets = pairs[rows, 1]
        try:
            c = complex_intensity(records_list[s], mu_a, f, detectors=dets)
        except DeadChannelError as err:
            dead.extend(err.pairs)
            continue
        out[rows] = c[dets]
    if dead:
        raise DeadChannelError(dead)
    return out


def simulate_frame(records_list, mu_a, f: float, pairs) -> MeasurementFrame:
    """Replay every pair at absorption ``mu_a`` and return the frame."""
    return measurement_frame(pair_intensities(records_list, mu_a, f, pairs), pairs, f)


@dataclass
class CouplingState:
    """Per-optode coupling amplitudes (> 0) and phases (rad)."""

    source_amp: np.ndarray
    source_phase: np.ndarray
    detector_amp: np.ndarray
    detector_phase: np.ndarray

    def __post_init__(self):
        for name in ("source_amp", "source_phase", "detector_amp", "detector_phase"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.source_amp <= 0) or np.any(self.detector_amp <= 0):
            raise ConfigurationError("coupling amplitudes must be positive")

    @classmethod
    def ideal(cls, n_sources: int, n_detectors: int) -> "CouplingState":
        return cls(np.ones(n_sources), np.zeros(n_sources), np.ones(n_detectors), np.zeros(n_detectors))

    @classmethod
    def random(cls, n_sources, n_detectors, delta_amp, delta_phase, rng) -> "CouplingState":
        """Amplitudes ~ U(delta_amp, 1), phases ~ U(0, delta_phase)."""
        rng = np.random.default_rng(rng)
        return cls(
            rng.uniform(delta_amp, 1.0, n_sources),
            rng.uniform(0.0, delta_phase, n_sources),
            rng.uniform(delta_amp, 1.0, n_detectors),
            rng.uniform(0.0, delta_phase, n_detectors),
        )

    def eta(self) -> np.ndarray:
        """Stacked ``[ln A_src, ln A_det, phi_src, phi_det]`` (coupling Jacobian column order)."""
        return np.concatenate(
            [np.log(self.source_amp), np.log(self.detector_amp), self.source_phase, self.detector_phase]
        )


def apply_coupling(frame: MeasurementFrame, state: CouplingState) -> MeasurementFrame:
    """Shift every pair by its source and detector coupling (no phase wrapping)."""
    i, j = frame.pairs[:, 0], frame.pairs[:, 1]
    if i.max() >= len(state.source_amp) or j.max() >= len(state.detector_amp):
        raise ContractError("coupling state does not cover every optode in the frame")
    amp = np.log(state.source_amp)[i] + np.log(state.detector_amp)[j]
    ph = state.source_phase[i] + state.detector_phase[j]
    out = MeasurementFrame.pack(frame.log_amplitude + amp, frame.phase + ph, frame.pairs, frame.f)
    if np.any(np.abs(out.phase) > np.pi):
        warnings.warn("coupled phase left (-pi, pi]; linear coupling model applied without wrapping", stacklevel=2)
    return out


def difference_data(z: MeasurementFrame, z0: MeasurementFrame) -> np.ndarray:
    if not z.same_layout(z0):
        raise ContractError("difference_data needs frames with identical pairs and frequency")
    return z.values - z0.values


def add_noise(y0, seed):
    """Add 1 % Gaussian noise per data type.

    ``gamma_lnA`` and ``gamma_phi`` are 1 % of the largest absolute value in
    the amplitude and phase halves of ``y0``. Returns ``(y, Gamma_e)`` with
    ``Gamma_e`` the dense diagonal covariance.
    """
    y0 = np.asarray(y0, dtype=float)
    if not np.any(y0):
        raise ConfigurationError("cannot scale noise to an all-zero signal")
    m = len(y0) // 2
    std = noise_std(y0)
    rng = np.random.default_rng(seed)
    y = y0 + std * rng.standard_normal(2 * m)
    return y, np.diag(std**2)


def noise_std(y0) -> np.ndarray:
    y0 = np.asarray(y0, dtype=float)
    m = len(y0) // 2
    g_amp = 0.01 * np.max(np.abs(y0[:m]))
    g_ph = 0.01 * np.max(np.abs(y0[m:]))
    return np.concatenate([np.full(m, g_amp), np.full(m, g_ph)])


def absorption_jacobian(records_list, mu_a, f: float, pairs, mask=None) -> np.ndarray:
    """Exact derivative of ``(lnA, phi)`` with respect to voxel absorption.

    With ``C = X + iY`` and ``dC/dmu_j = -(1/N) sum_p l[p, j] w_p`` the rows are
    ``Re(conj(C) dC) / |C|^2`` (log-amplitude) and ``Im(conj(C) dC) / |C|^2``
    (phase). ``mask`` is a boolean volume or an index array selecting columns.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    mu_a = np.ascontiguousarray(mu_a, dtype=float)
    n_vox = mu_a.shape[0]
    cols = np.arange(n_vox) if mask is None else _columns(mask, n_vox)
    m = len(pairs)
    J = np.empty((2 * m, len(cols)))
    dead = []
    for s in np.unique(pairs[:, 0]):
        rows = np.flatnonzero(pairs[:, 0] == s)
        dets = pairs[rows, 1]
        rs = records_list[s]
        nd = max(_n_detectors(rs, None), int(dets.max()) + 1)
        w_re, w_im = packet_weights(rs, mu_a, f)
        x, y, cnt = _detector_sums(rs.detector.astype(np.int64), w_re, w_im, nd)
        missing = [(int(s), int(d)) for d in dets if cnt[d] == 0]
        if missing:
            dead.extend(missing)
            continue
        slot = np.full(nd, -1, dtype=np.int64)
        slot[dets] = np.arange(len(dets))
        sre, sim = _weighted_path_sums(
            rs.detector.astype(np.int64), slot, rs.offsets, rs.voxels, rs.lengths, w_re, w_im, len(dets), n_vox
        )
        N = rs.launched_count
        cx, cy = x[dets] / N, y[dets] / N
        d_re = -sre[:, cols] / N
        d_im = -sim[:, cols] / N
        mag2 = (cx**2 + cy**2)[:, None]
        J[rows] = (cx[:, None] * d_re + cy[:, None] * d_im) / mag2
        J[rows + m] = (cx[:, None] * d_im - cy[:, None] * d_re) / mag2
    if dead:
        raise DeadChannelError(dead)
    return J


def _columns(mask, n_vox):
    mask = np.asarray(mask)
    if mask.dtype == bool:
        flat = mask.ravel()
        if flat.shape[0] != n_vox:
            raise ContractError("mask size does not match the absorption vector")
        return np.flatnonzero(flat)
    return mask.astype(np.int64)


def tissue_difference_jacobian(records_list, phantom, tissue, delta: float, f: float, pairs, mask=None, mu_a=None):
    """``J(mu_a with one tissue shifted by delta) - J(mu_a)`` on shared records."""
    idx = tissue_index(tissue)
    sel = phantom.labels.ravel() == idx
    if idx not in phantom.tissue_table or not sel.any():
        raise ConfigurationError(f"tissue {tissue!r} is absent from the phantom")
    base = phantom.mu_a_volume() if mu_a is None else np.asarray(mu_a, dtype=float)
    if delta == 0:
        n = len(_columns(mask, base.shape[0])) if mask is not None else base.shape[0]
        return np.zeros((2 * len(pairs), n))
    shifted = base.copy()
    shifted[sel] += delta
    return absorption_jacobian(records_list, shifted, f, pairs, mask) - absorption_jacobian(
        records_list, base, f, pairs, mask
    )


@dataclass
class JacobianSet:
    J: np.ndarray
    J_tilde: np.ndarray
    roi_index: np.ndarray
    roni_index: np.ndarray
    baseline_mu_a: dict

    def __post_init__(self):
        if self.J.shape[1] != len(self.roi_index) or self.J_tilde.shape[1] != len(self.roni_index):
            raise ContractError("Jacobian column maps do not match matrix widths")
        if np.intersect1d(self.roi_index, self.roni_index).size:
            raise ContractError("ROI and RONI column maps overlap")

    @classmethod
    def from_total(cls, J_total, masks, baseline_mu_a) -> "JacobianSet":
        return cls(
            J=J_total[:, masks.roi_columns],
            J_tilde=J_total[:, masks.roni_columns],
            roi_index=masks.roi_index,
            roni_index=masks.roni_index,
            baseline_mu_a=dict(baseline_mu_a),
        )
