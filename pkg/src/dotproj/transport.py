"""Voxel-grid Monte Carlo photon-packet transport.

Packets carry no weight: absorption is applied afterwards by replay, so the
trajectories here never read ``mu_a``. Each packet draws its random numbers
from a stateless counter-based generator keyed by ``(seed, source, packet)``,
which makes every trajectory reproducible regardless of how packets are
distributed over worker threads.

Coordinates are in mm with the origin at the grid corner; voxel ``(i, j, k)``
spans ``[i*h, (i+1)*h)`` along each axis and has flat index ``(i*ny + j)*nz + k``.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numba as nb
import numpy as np

from .errors import ConfigurationError, LaunchError
from .phantom import AIR, OptodeConfig, VoxelPhantom

C0_MM_PER_S = 299_792_458e3
DEFAULT_TOF_MAX = 5e-9

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0

EV_SCATTER, EV_BOUNDARY, EV_EXPIRED = 0, 1, 2


@nb.njit(cache=True, inline="always")
def _mix64(x):
    z = x + _GAMMA
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@nb.njit(cache=True)
def packet_key(seed, source, counter):
    """64-bit stream key of one packet."""
    k = _mix64(np.uint64(seed))
    k = _mix64(k ^ _mix64(np.uint64(source) + np.uint64(0x632BE59BD9B4E019)))
    return _mix64(k ^ np.uint64(counter))


@nb.njit(cache=True, inline="always")
def _uniform(key, i):
    """i-th uniform draw in the open interval (0, 1) of stream ``key``."""
    x = _mix64(key + np.uint64(i) * _GAMMA)
    return (float(x >> _S11) + 0.5) * _INV53


@nb.njit(cache=True)
def hg_cosine(g, u):
    """Henyey-Greenstein deflection cosine by inverse CDF."""
    if abs(g) < 1e-6:
        return 2.0 * u - 1.0
    tmp = (1.0 - g * g) / (1.0 + g * (2.0 * u - 1.0))
    c = (1.0 + g * g - tmp * tmp) / (2.0 * g)
    return min(1.0, max(-1.0, c))


@nb.njit(cache=True)
def _scatter(d, g, u1, u2):
    ct = hg_cosine(g, u1)
    st = math.sqrt(max(0.0, 1.0 - ct * ct))
    phi = 2.0 * math.pi * u2
    cp = math.cos(phi)
    sp = math.sin(phi)
    ux, uy, uz = d[0], d[1], d[2]
    # branch-free orthonormal frame (b1, b2, d), exact for every direction (Duff et al. 2017)
    sg = 1.0 if uz >= 0.0 else -1.0
    a = -1.0 / (sg + uz)
    b = ux * uy * a
    b1x, b1y, b1z = 1.0 + sg * ux * ux * a, sg * b, -sg * ux
    b2x, b2y, b2z = b, sg + uy * uy * a, -uy
    u = st * cp
    v = st * sp
    nx = u * b1x + v * b2x + ct * ux
    ny = u * b1y + v * b2y + ct * uy
    nz = u * b1z + v * b2z + ct * uz
    nrm = math.sqrt(nx * nx + ny * ny + nz * nz)
    d[0] = nx / nrm
    d[1] = ny / nrm
    d[2] = nz / nrm


@nb.njit(cache=True)
def fresnel_reflectance(n1, n2, cos_i):
    """Unpolarized Fresnel reflectance leaving medium ``n1`` into ``n2``."""
    if n1 == n2:
        return 0.0
    cos_i = min(1.0, abs(cos_i))
    sin_t = n1 / n2 * math.sqrt(max(0.0, 1.0 - cos_i * cos_i))
    if sin_t >= 1.0:
        return 1.0
    cos_t = math.sqrt(1.0 - sin_t * sin_t)
    rs = (n1 * cos_i - n2 * cos_t) / (n1 * cos_i + n2 * cos_t)
    rp = (n1 * cos_t - n2 * cos_i) / (n1 * cos_t + n2 * cos_i)
    return 0.5 * (rs * rs + rp * rp)


@nb.njit(cache=True, inline="always")
def _flat(ix, iy, iz, ny, nz):
    return (ix * ny + iy) * nz + iz


@nb.njit(cache=True)
def _advance(labels, dims, h, mus_t, nu_t, pos, d, vox, s, l_rem, acc, touched, ntouched):
    """Move a packet until its dimensionless budget ``s`` is spent.

    The budget is consumed at rate mu_s per mm, so crossing into a voxel with
    different mu_s rescales the remaining physical distance. Per-voxel chord
    lengths are added to ``acc``; newly touched voxels are appended to
    ``touched``. Stops early at an exterior face (``EV_BOUNDARY``) or when the
    optical-path allowance ``l_rem`` (sum of nu * length) runs out.

    Returns ``(event, s_left, axis, side, ntouched, optical_length_used)``.
    """
    nx, ny, nz = dims[0], dims[1], dims[2]
    used = 0.0
    while True:
        ix, iy, iz = vox[0], vox[1], vox[2]
        idx = _flat(ix, iy, iz, ny, nz)
        lab = labels[idx]
        mus = mus_t[lab]
        nu = nu_t[lab]
        tb = np.inf
        axis = -1
        side = 0
        for a in range(3):
            da = d[a]
            if da > 0.0:
                t = ((vox[a] + 1) * h - pos[a]) / da
                sd = 1
            elif da < 0.0:
                t = (vox[a] * h - pos[a]) / da
                sd = -1
            else:
                continue
            if t < 0.0:
                t = 0.0
            if t < tb:
                tb = t
                axis = a
                side = sd
        if mus > 0.0 and s <= tb * mus:
            step = s / mus
            crossing = False
        else:
            step = tb
            crossing = True
        expired = False
        if step * nu >= l_rem - used:
            step = (l_rem - used) / nu
            expired = True
            crossing = False
        if step > 0.0:
            pos[0] += step * d[0]
            pos[1] += step * d[1]
            pos[2] += step * d[2]
            if acc[idx] == 0.0:
                touched[ntouched] = idx
                ntouched += 1
            acc[idx] += step
            used += step * nu
        if expired:
            return EV_EXPIRED, s, axis, side, ntouched, used
        if not crossing:
            return EV_SCATTER, 0.0, axis, side, ntouched, used
        s = max(0.0, s - tb * mus)
        pos[axis] = (vox[axis] + (1 if side > 0 else 0)) * h
        nxt = vox[axis] + side
        n_axis = dims[axis]
        if nxt < 0 or nxt >= n_axis:
            return EV_BOUNDARY, s, axis, side, ntouched, used
        vox[axis] = nxt
        if labels[_flat(vox[0], vox[1], vox[2], ny, nz)] == 0:
            vox[axis] = nxt - side
            return EV_BOUNDARY, s, axis, side, ntouched, used


@nb.njit(cache=True)
def _enter_grid(q, n, dims, h):
    """Advance point ``q`` along ``n`` to the grid box; False when it misses."""
    t0 = 0.0
    t1 = np.inf
    for a in range(3):
        hi = dims[a] * h
        if n[a] == 0.0:
            if q[a] < 0.0 or q[a] > hi:
                return False
            continue
        ta = (0.0 - q[a]) / n[a]
        tb = (hi - q[a]) / n[a]
        if ta > tb:
            ta, tb = tb, ta
        t0 = max(t0, ta)
        t1 = min(t1, tb)
    if t0 > t1:
        return False
    for a in range(3):
        q[a] += t0 * n[a]
    return True


@nb.njit(cache=True)
def _voxel_of(q, dims, h, vox):
    for a in range(3):
        i = int(math.floor(q[a] / h))
        if i < 0:
            i = 0
        if i >= dims[a]:
            i = dims[a] - 1
        vox[a] = i


@nb.njit(cache=True)
def _march_air(labels, dims, h, pos, d, vox):
    """Follow the beam through exterior voxels; True once it enters tissue."""
    ny, nz = dims[1], dims[2]
    for _ in range(4 * (dims[0] + dims[1] + dims[2]) + 8):
        if labels[_flat(vox[0], vox[1], vox[2], ny, nz)] != 0:
            return True
        tb = np.inf
        axis = -1
        side = 0
        for a in range(3):
            if d[a] > 0.0:
                t = ((vox[a] + 1) * h - pos[a]) / d[a]
                sd = 1
            elif d[a] < 0.0:
                t = (vox[a] * h - pos[a]) / d[a]
                sd = -1
            else:
                continue
            t = max(t, 0.0)
            if t < tb:
                tb, axis, side = t, a, sd
        for a in range(3):
            pos[a] += tb * d[a]
        pos[axis] = (vox[axis] + (1 if side > 0 else 0)) * h
        nxt = vox[axis] + side
        if nxt < 0 or nxt >= dims[axis]:
            return False
        vox[axis] = nxt
    return False


@nb.njit(cache=True)
def _launch(labels, dims, h, src_pos, src_n, waist, key, pos, d, vox):
    """Sample a launch point on the Gaussian beam and carry it to the tissue surface."""
    n0, n1, n2 = src_n[0], src_n[1], src_n[2]
    if abs(n0) < 0.9:
        ax, ay, az = 0.0, n2, -n1
    else:
        ax, ay, az = -n2, 0.0, n0
    an = math.sqrt(ax * ax + ay * ay + az * az)
    ax, ay, az = ax / an, ay / an, az / an
    bx = n1 * az - n2 * ay
    by = n2 * ax - n0 * az
    bz = n0 * ay - n1 * ax
    # Gaussian intensity exp(-2 r^2 / w^2), truncated at r = 2 w.
    u1 = _uniform(key, 0)
    u2 = _uniform(key, 1)
    r = waist * math.sqrt(-0.5 * math.log(1.0 - u1 * (1.0 - math.exp(-8.0))))
    phi = 2.0 * math.pi * u2
    c = r * math.cos(phi)
    s = r * math.sin(phi)
    back = 4.0 * h
    pos[0] = src_pos[0] + c * ax + s * bx - back * n0
    pos[1] = src_pos[1] + c * ay + s * by - back * n1
    pos[2] = src_pos[2] + c * az + s * bz - back * n2
    d[0], d[1], d[2] = n0, n1, n2
    if not _enter_grid(pos, d, dims, h):
        return False
    _voxel_of(pos, dims, h, vox)
    return _march_air(labels, dims, h, pos, d, vox)


@nb.njit(cache=True, nogil=True)
def _simulate_chunk(
    labels, dims, h, mus_t, g_t, nu_t,
    src_pos, src_n, waist, det_pos, det_r2,
    seed, source, start, stop, l_max,
    rec_counter, rec_det, rec_tof, rec_nnz, ent_vox, ent_len,
    acc, touched,
):
    nvox = labels.shape[0]
    ny, nz = dims[1], dims[2]
    cap_rec = rec_counter.shape[0]
    cap_ent = ent_vox.shape[0]
    n_rec = 0
    n_ent = 0
    n_esc = 0
    n_exp = 0
    pos = np.empty(3)
    d = np.empty(3)
    vox = np.empty(3, np.int64)
    counter = start
    while counter < stop:
        if n_rec >= cap_rec or n_ent + nvox > cap_ent:
            break
        key = packet_key(seed, source, counter)
        if not _launch(labels, dims, h, src_pos, src_n, waist, key, pos, d, vox):
            n_esc += 1
            counter += 1
            continue
        draw = 2
        s = -math.log(_uniform(key, draw))
        draw += 1
        l_opt = 0.0
        ntouched = 0
        fate = 0  # 1 detected, 2 escaped, 3 expired
        det = -1
        while fate == 0:
            ev, s, axis, side, ntouched, used = _advance(
                labels, dims, h, mus_t, nu_t, pos, d, vox, s, l_max - l_opt, acc, touched, ntouched
            )
            l_opt += used
            if ev == EV_EXPIRED:
                fate = 3
            elif ev == EV_SCATTER:
                lab = labels[_flat(vox[0], vox[1], vox[2], ny, nz)]
                _scatter(d, g_t[lab], _uniform(key, draw), _uniform(key, draw + 1))
                s = -math.log(_uniform(key, draw + 2))
                draw += 3
            else:
                lab = labels[_flat(vox[0], vox[1], vox[2], ny, nz)]
                refl = fresnel_reflectance(nu_t[lab], nu_t[0], d[axis])
                u = _uniform(key, draw)
                draw += 1
                if u < refl:
                    d[axis] = -d[axis]
                    continue
                fc0 = (vox[0] + 0.5) * h
                fc1 = (vox[1] + 0.5) * h
                fc2 = (vox[2] + 0.5) * h
                if axis == 0:
                    fc0 += 0.5 * side * h
                elif axis == 1:
                    fc1 += 0.5 * side * h
                else:
                    fc2 += 0.5 * side * h
                best = np.inf
                for k in range(det_pos.shape[0]):
                    e0 = fc0 - det_pos[k, 0]
                    e1 = fc1 - det_pos[k, 1]
                    e2 = fc2 - det_pos[k, 2]
                    dist2 = e0 * e0 + e1 * e1 + e2 * e2
                    if dist2 <= det_r2[k] and dist2 < best:
                        best = dist2
                        det = k
                fate = 1 if det >= 0 else 2
        if fate == 1:
            nnz = 0
            for t in range(ntouched):
                idx = touched[t]
                if acc[idx] > 0.0:
                    ent_vox[n_ent] = idx
                    ent_len[n_ent] = acc[idx]
                    n_ent += 1
                    nnz += 1
            rec_counter[n_rec] = counter
            rec_det[n_rec] = det
            rec_tof[n_rec] = l_opt
            rec_nnz[n_rec] = nnz
            n_rec += 1
        elif fate == 2:
            n_esc += 1
        else:
            n_exp += 1
        for t in range(ntouched):
            acc[touched[t]] = 0.0
        counter += 1
    return counter, n_rec, n_ent, n_esc, n_exp


@dataclass
class PhotonRecord:
    detector_index: int
    pathlengths: dict
    time_of_flight: float
    launch_counter: int


@dataclass
class PhotonRecordSet:
    """Detected-packet records of one source in compressed sparse-row form.

    Record ``r`` owns entries ``offsets[r]:offsets[r+1]`` of ``voxels`` and
    ``lengths``. Records are sorted by ``launch_counter``.
    """

    source_index: int
    launched_count: int
    launch_counter: np.ndarray
    detector: np.ndarray
    time_of_flight: np.ndarray
    offsets: np.ndarray
    voxels: np.ndarray
    lengths: np.ndarray
    escape_count: int = 0
    expired_count: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.launch_counter)

    @property
    def detected_count(self) -> int:
        return len(self.launch_counter)

    @property
    def records(self) -> list[PhotonRecord]:
        out = []
        for r in range(len(self)):
            sl = slice(self.offsets[r], self.offsets[r + 1])
            out.append(
                PhotonRecord(
                    detector_index=int(self.detector[r]),
                    pathlengths=dict(zip(self.voxels[sl].tolist(), self.lengths[sl].tolist())),
                    time_of_flight=float(self.time_of_flight[r]),
                    launch_counter=int(self.launch_counter[r]),
                )
            )
        return out

    def record_index(self) -> np.ndarray:
        """Owning record of every sparse entry."""
        return np.repeat(np.arange(len(self)), np.diff(self.offsets))

    def total_lengths(self) -> np.ndarray:
        return np.add.reduceat(self.lengths, self.offsets[:-1]) if len(self) else np.zeros(0)

    def select_detector(self, det: int) -> np.ndarray:
        return np.flatnonzero(self.detector == det)

    def equals(self, other: "PhotonRecordSet") -> bool:
        """Bitwise equality of all record content."""
        return (
            self.source_index == other.source_index
            and self.launched_count == other.launched_count
            and self.escape_count == other.escape_count
            and self.expired_count == other.expired_count
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("launch_counter", "detector", "time_of_flight", "offsets", "voxels", "lengths")
            )
        )


def _kernel_inputs(phantom: VoxelPhantom):
    labels = phantom.labels.ravel()
    dims = np.asarray(phantom.dims, dtype=np.int64)
    return (
        labels,
        dims,
        float(phantom.voxel_size),
        phantom.property_lookup("mu_s"),
        phantom.property_lookup("g"),
        phantom.property_lookup("nu"),
    )


def check_source(phantom: VoxelPhantom, optodes: OptodeConfig, source_index: int) -> None:
    """Raise :class:`LaunchError` when the source's central ray misses the tissue."""
    labels, dims, h, *_ = _kernel_inputs(phantom)
    pos = np.empty(3)
    d = np.empty(3)
    vox = np.empty(3, np.int64)
    n = np.asarray(optodes.source_normals[source_index], dtype=float)
    p = np.asarray(optodes.source_positions[source_index], dtype=float)
    # zero-waist launch reproduces the central ray
    ok = _launch(labels, dims, h, p, n, 0.0, packet_key(0, 0, 0), pos, d, vox)
    if not ok:
        raise LaunchError(f"source {source_index}: beam along its normal never enters the phantom")


def simulate_source(
    phantom: VoxelPhantom,
    optodes: OptodeConfig,
    source_index: int,
    n_packets: int,
    seed: int,
    tof_max: float = DEFAULT_TOF_MAX,
    workers: int = 1,
    chunk_size: int = 4096,
    record_capacity: int = 1 << 14,
) -> PhotonRecordSet:
    """Launch ``n_packets`` packets from one source and keep the detected ones.

    Packets are split into fixed chunks of ``chunk_size`` consecutive launch
    counters that run on ``workers`` threads; the merged records are ordered
    by launch counter, so the output does not depend on ``workers``.
    """
    if n_packets < 1:
        raise ConfigurationError("n_packets must be >= 1")
    if not 0 <= source_index < optodes.n_sources:
        raise ConfigurationError(f"source index {source_index} out of range")
    check_source(phantom, optodes, source_index)
    labels, dims, h, mus_t, g_t, nu_t = _kernel_inputs(phantom)
    src_pos = np.ascontiguousarray(optodes.source_positions[source_index], dtype=float)
    src_n = np.ascontiguousarray(optodes.source_normals[source_index], dtype=float)
    waist = float(optodes.source_waists[source_index])
    det_pos = np.ascontiguousarray(optodes.detector_positions, dtype=float)
    det_r2 = np.ascontiguousarray(optodes.detector_radii, dtype=float) ** 2
    l_max = float(tof_max) * C0_MM_PER_S
    nvox = labels.shape[0]

    def run(bounds):
        start, stop = bounds
        acc = np.zeros(nvox)
        touched = np.empty(nvox, dtype=np.int64)
        parts = []
        esc = exp = 0
        while start < stop:
            rc = np.empty(record_capacity, np.int64)
            rd = np.empty(record_capacity, np.int32)
            rt = np.empty(record_capacity, np.float64)
            rn = np.empty(record_capacity, np.int32)
            ev = np.empty(max(64 * record_capacity, 2 * nvox), np.int64)
            el = np.empty(ev.shape[0], np.float64)
            start, nr, ne, ns, nx = _simulate_chunk(
                labels, dims, h, mus_t, g_t, nu_t, src_pos, src_n, waist, det_pos, det_r2,
                np.uint64(seed), np.uint64(source_index), start, stop, l_max,
                rc, rd, rt, rn, ev, el, acc, touched,
            )
            esc += ns
            exp += nx
            parts.append((rc[:nr], rd[:nr], rt[:nr], rn[:nr], ev[:ne], el[:ne]))
        return parts, esc, exp

    chunks = [(a, min(a + chunk_size, n_packets)) for a in range(0, n_packets, chunk_size)]
    if workers <= 1:
        results = [run(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, chunks))

    parts = [p for res in results for p in res[0]]
    escaped = sum(r[1] for r in results)
    expired = sum(r[2] for r in results)
    counter = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0, np.int64)
    det = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0, np.int32)
    optical = np.concatenate([p[2] for p in parts]) if parts else np.zeros(0)
    nnz = np.concatenate([p[3] for p in parts]) if parts else np.zeros(0, np.int32)
    vox = np.concatenate([p[4] for p in parts]) if parts else np.zeros(0, np.int64)
    lens = np.concatenate([p[5] for p in parts]) if parts else np.zeros(0)

    # Chunks already hold ascending counters; sorting guards the merge order.
    order = np.argsort(counter, kind="stable")
    offsets = np.zeros(len(counter) + 1, dtype=np.int64)
    np.cumsum(nnz, out=offsets[1:])
    if not np.all(order == np.arange(len(order))):
        seg = [np.arange(offsets[r], offsets[r + 1]) for r in order]
        take = np.concatenate(seg) if seg else np.zeros(0, np.int64)
        vox, lens = vox[take], lens[take]
        counter, det, optical, nnz = counter[order], det[order], optical[order], nnz[order]
        np.cumsum(nnz, out=offsets[1:])
    return PhotonRecordSet(
        source_index=int(source_index),
        launched_count=int(n_packets),
        launch_counter=counter.astype(np.int64),
        detector=det.astype(np.int32),
        time_of_flight=optical / C0_MM_PER_S,
        offsets=offsets,
        voxels=vox.astype(np.int64),
        lengths=lens,
        escape_count=int(escaped),
        expired_count=int(expired),
        meta={"seed": int(seed), "tof_max": float(tof_max)},
    )


def simulate_all(phantom, optodes, n_packets, seed, **kw) -> list[PhotonRecordSet]:
    return [simulate_source(phantom, optodes, s, n_packets, seed, **kw) for s in range(optodes.n_sources)]


def sample_scatter_direction(g: float, incoming, u1: float, u2: float) -> np.ndarray:
    """New unit direction after a Henyey-Greenstein scattering event."""
    eps = 1e-12
    g = float(np.clip(g, -1 + eps, 1 - eps))
    u1 = float(np.clip(u1, eps, 1 - eps))
    u2 = float(np.clip(u2, eps, 1 - eps))
    d = np.array(incoming, dtype=float)
    d /= np.linalg.norm(d)
    _scatter(d, g, u1, u2)
    return d


@dataclass
class AdvanceResult:
    event: str
    position: np.ndarray
    voxel: tuple
    budget_left: float
    pathlengths: dict
    exit_axis: int = -1
    exit_side: int = 0


def advance_packet(phantom: VoxelPhantom, position, direction, dimensionless_path_budget: float) -> AdvanceResult:
    """Free flight of a single packet, for inspection and testing.

    Returns a ``"scatter"`` event when the budget is spent inside the phantom
    or an ``"exit"`` event when the packet reaches an exterior face first.
    """
    labels, dims, h, mus_t, _, nu_t = _kernel_inputs(phantom)
    pos = np.array(position, dtype=float)
    d = np.array(direction, dtype=float)
    d /= np.linalg.norm(d)
    vox = np.empty(3, np.int64)
    _voxel_of(pos, dims, h, vox)
    if labels[np.ravel_multi_index(tuple(vox), phantom.dims)] == AIR:
        raise ConfigurationError("advance_packet start position is outside the phantom")
    acc = np.zeros(labels.shape[0])
    touched = np.empty(labels.shape[0], np.int64)
    ev, s_left, axis, side, nt, _ = _advance(
        labels, dims, h, mus_t, nu_t, pos, d, vox, float(dimensionless_path_budget), np.inf, acc, touched, 0
    )
    lengths = {int(touched[i]): float(acc[touched[i]]) for i in range(nt) if acc[touched[i]] > 0}
    return AdvanceResult(
        event="scatter" if ev == EV_SCATTER else "exit",
        position=pos,
        voxel=tuple(int(v) for v in vox),
        budget_left=float(s_left),
        pathlengths=lengths,
        exit_axis=int(axis) if ev == EV_BOUNDARY else -1,
        exit_side=int(side) if ev == EV_BOUNDARY else 0,
    )


@dataclass
class BoundaryOutcome:
    exits: bool
    direction: np.ndarray
    reflectance: float


def boundary_interaction(nu_inside, nu_outside, direction, surface_normal, u) -> BoundaryOutcome:
    """Fresnel exit-or-reflect decision for a packet hitting the surface.

    ``surface_normal`` points outward and ``direction . surface_normal > 0``.
    The packet reflects when ``u < R``; beyond the critical angle ``R = 1``.
    """
    d = np.asarray(direction, dtype=float)
    n = np.asarray(surface_normal, dtype=float)
    n = n / np.linalg.norm(n)
    cos_i = float(d @ n)
    if cos_i <= 0:
        raise ConfigurationError("boundary_interaction expects an outgoing direction")
    refl = fresnel_reflectance(float(nu_inside), float(nu_outside), cos_i)
    if u < refl:
        return BoundaryOutcome(False, d - 2 * cos_i * n, refl)
    eta = nu_inside / nu_outside
    cos_t = math.sqrt(max(0.0, 1.0 - eta**2 * (1.0 - cos_i**2)))
    t = eta * d + (cos_t - eta * cos_i) * n
    return BoundaryOutcome(True, t / np.linalg.norm(t), refl)


# Binary record-set layout (little-endian):
#   header  <4s I i Q Q Q Q   magic b"DOTR", version, source, N, n_records, escaped, expired
#   per record  <i d q I      detector, time of flight [s], launch counter, entry count
#               then count x <I d  voxel flat index, length [mm]
_MAGIC = b"DOTR"
_HEADER = struct.Struct("<4sIiQQQQ")
_REC = np.dtype([("det", "<i4"), ("tof", "<f8"), ("counter", "<i8"), ("count", "<u4")])
_ENT = np.dtype([("voxel", "<u4"), ("length", "<f8")])


def save_records(path, rs: PhotonRecordSet) -> None:
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(
            _HEADER.pack(_MAGIC, 1, rs.source_index, rs.launched_count, len(rs), rs.escape_count, rs.expired_count)
        )
        for r in range(len(rs)):
            a, b = rs.offsets[r], rs.offsets[r + 1]
            rec = np.array([(rs.detector[r], rs.time_of_flight[r], rs.launch_counter[r], b - a)], dtype=_REC)
            fh.write(rec.tobytes())
            ent = np.empty(b - a, dtype=_ENT)
            ent["voxel"] = rs.voxels[a:b]
            ent["length"] = rs.lengths[a:b]
            fh.write(ent.tobytes())


def load_records(path) -> PhotonRecordSet:
    buf = Path(path).read_bytes()
    magic, version, source, n, nrec, esc, exp = _HEADER.unpack_from(buf, 0)
    if magic != _MAGIC or version != 1:
        raise ConfigurationError(f"{path}: not a version-1 photon record file")
    pos = _HEADER.size
    det = np.empty(nrec, np.int32)
    tof = np.empty(nrec)
    counter = np.empty(nrec, np.int64)
    offsets = np.zeros(nrec + 1, np.int64)
    vox_parts, len_parts = [], []
    for r in range(nrec):
        rec = np.frombuffer(buf, dtype=_REC, count=1, offset=pos)[0]
        pos += _REC.itemsize
        cnt = int(rec["count"])
        ent = np.frombuffer(buf, dtype=_ENT, count=cnt, offset=pos)
        pos += cnt * _ENT.itemsize
        det[r], tof[r], counter[r] = rec["det"], rec["tof"], rec["counter"]
        offsets[r + 1] = offsets[r] + cnt
        vox_parts.append(ent["voxel"].astype(np.int64))
        len_parts.append(ent["length"].astype(np.float64))
    return PhotonRecordSet(
        source_index=source,
        launched_count=n,
        launch_counter=counter,
        detector=det,
        time_of_flight=tof,
        offsets=offsets,
        voxels=np.concatenate(vox_parts) if vox_parts else np.zeros(0, np.int64),
        lengths=np.concatenate(len_parts) if len_parts else np.zeros(0),
        escape_count=esc,
        expired_count=exp,
    )
