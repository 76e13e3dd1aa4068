import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import central_difference_jacobian, replay_intensity_loop

from dotproj.errors import ConfigurationError, ContractError, DeadChannelError
from dotproj.phantom import LayeredPhantomConfig, build_layered_phantom, place_optodes
from dotproj.projector import coupling_jacobian
from dotproj.replay import (
    CouplingState,
    JacobianSet,
    MeasurementFrame,
    absorption_jacobian,
    add_noise,
    apply_coupling,
    complex_intensity,
    difference_data,
    measurement_frame,
    noise_std,
    simulate_frame,
    tissue_difference_jacobian,
)
from dotproj.runner.workbench import resolve_sites
from dotproj.transport import PhotonRecordSet, simulate_source


def make_records(entries, detectors, tof=None, n_launched=None, source=0):
    """Record set from a list of ``{voxel: length}`` dicts."""
    offsets = np.zeros(len(entries) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(e) for e in entries])
    vox = np.array([v for e in entries for v in e], dtype=np.int64)
    lens = np.array([l for e in entries for l in e.values()], dtype=float)
    n = len(entries)
    return PhotonRecordSet(
        source_index=source,
        launched_count=n if n_launched is None else n_launched,
        launch_counter=np.arange(n, dtype=np.int64),
        detector=np.asarray(detectors, dtype=np.int32),
        time_of_flight=np.zeros(n) if tof is None else np.asarray(tof, dtype=float),
        offsets=offsets,
        voxels=vox,
        lengths=lens,
    )


def test_single_packet_unit_weight():
    rs = make_records([{0: 2.0}], [0], n_launched=10)
    C = complex_intensity(rs, np.zeros(1), 0.0)
    assert C[0] == pytest.approx(1 / 10)


def test_single_packet_half_absorbed():
    rs = make_records([{0: 1.0}], [0], n_launched=4)
    C = complex_intensity(rs, np.array([math.log(2)]), 0.0)
    assert C[0].real == pytest.approx(0.5 / 4, rel=1e-15) and C[0].imag == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_intensity_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    n_vox, n_det = 12, 3
    entries = [
        {int(v): float(rng.uniform(0.1, 5.0)) for v in rng.choice(n_vox, rng.integers(1, 6), replace=False)}
        for _ in range(40)
    ]
    det = rng.integers(0, n_det, 40)
    det[:n_det] = np.arange(n_det)
    tof = rng.uniform(0, 2e-9, 40)
    rs = make_records(entries, det, tof, n_launched=1000)
    mu = rng.uniform(0, 0.05, n_vox)
    f = 1e8
    got = complex_intensity(rs, mu, f, n_detectors=n_det)
    ref = replay_intensity_loop(rs, mu, f, n_det)
    assert np.allclose(got, ref, rtol=1e-12, atol=0)


def test_dead_detector_raises():
    rs = make_records([{0: 1.0}], [0], n_launched=4)
    with pytest.raises(DeadChannelError) as err:
        complex_intensity(rs, np.zeros(1), 0.0, detectors=[0, 1])
    assert err.value.exit_code == 3


@pytest.mark.parametrize("x,y,lnA,phi", [
    (1.0, 0.0, 0.0, 0.0),
    (0.0, 1.0, 0.0, math.pi / 2),
    (-0.3, -0.4, math.log(0.5), math.atan2(-0.4, -0.3)),
])
def test_measurement_frame_values(x, y, lnA, phi):
    fr = measurement_frame(np.array([complex(x, y)]), [[0, 0]], 1e8)
    assert fr.log_amplitude[0] == pytest.approx(lnA, abs=1e-15)
    assert fr.phase[0] == pytest.approx(phi, abs=1e-15)


def test_measurement_frame_third_quadrant_value():
    fr = measurement_frame(np.array([complex(-0.3, -0.4)]), [[0, 0]], 1e8)
    assert fr.phase[0] == pytest.approx(-2.214, abs=5e-4)


def test_frame_pack_unpack_round_trip():
    pairs = np.array([[0, 0], [0, 2], [1, 1]])
    a, p = np.array([1.0, 2.0, 3.0]), np.array([0.1, 0.2, 0.3])
    fr = MeasurementFrame.pack(a, p, pairs, 1e8)
    a2, p2 = fr.unpack()
    assert np.array_equal(a, a2) and np.array_equal(p, p2)
    assert np.array_equal(fr.values, np.concatenate([a, p]))
    assert np.array_equal(fr.pairs, pairs)


@pytest.fixture(scope="module")
def setup():
    pc = LayeredPhantomConfig(dims=(16, 16, 16), voxel_size=2.0)
    ph = build_layered_phantom(pc)
    opt = place_optodes(ph, resolve_sites(pc, ph, [[0, 0], [-6, 6]]),
                        resolve_sites(pc, ph, [[-8, 0], [8, 0], [0, -8], [0, 8]]),
                        f=100e6, sds_cutoff=25.0, capture_radius=3.0)
    recs = [simulate_source(ph, opt, s, 20000, seed=5) for s in range(opt.n_sources)]
    return ph, opt, recs


def test_ideal_coupling_leaves_frame(setup):
    ph, opt, recs = setup
    z = simulate_frame(recs, ph.mu_a_volume(), opt.frequency, opt.pairs)
    out = apply_coupling(z, CouplingState.ideal(opt.n_sources, opt.n_detectors))
    assert np.array_equal(out.values, z.values)


def test_single_source_amplitude_shift(setup):
    ph, opt, recs = setup
    z = simulate_frame(recs, ph.mu_a_volume(), opt.frequency, opt.pairs)
    st_ = CouplingState.ideal(opt.n_sources, opt.n_detectors)
    st_.source_amp[0] = 0.9
    out = apply_coupling(z, st_)
    hit = opt.pairs[:, 0] == 0
    assert np.allclose(out.log_amplitude[hit] - z.log_amplitude[hit], math.log(0.9), rtol=0, atol=1e-15)
    assert np.array_equal(out.log_amplitude[~hit], z.log_amplitude[~hit])
    assert np.array_equal(out.phase, z.phase)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.5, 0.99), st.floats(0.0, 0.3))
def test_coupling_difference_is_linear(setup, seed, da, dphi):
    ph, opt, recs = setup
    z = simulate_frame(recs, ph.mu_a_volume(), opt.frequency, opt.pairs)
    s = CouplingState.random(opt.n_sources, opt.n_detectors, da, dphi, seed)
    Jc = coupling_jacobian(opt.pairs, opt.n_sources, opt.n_detectors)
    diff = difference_data(apply_coupling(z, s), z)
    assert np.allclose(diff, Jc.matrix @ s.eta(), rtol=0, atol=1e-13)


def test_phase_wrap_warns():
    fr = MeasurementFrame.pack(np.zeros(1), np.array([3.1]), [[0, 0]], 1e8)
    s = CouplingState(np.ones(1), np.array([0.1]), np.ones(1), np.zeros(1))
    with pytest.warns(UserWarning):
        apply_coupling(fr, s)


def test_nonpositive_coupling_amplitude_rejected():
    with pytest.raises(ConfigurationError):
        CouplingState(np.zeros(1), np.zeros(1), np.ones(1), np.zeros(1))


def test_difference_of_identical_frames_is_zero(setup):
    ph, opt, recs = setup
    z = simulate_frame(recs, ph.mu_a_volume(), opt.frequency, opt.pairs)
    assert not np.any(difference_data(z, z))


def test_difference_layout_mismatch(setup):
    ph, opt, recs = setup
    z = simulate_frame(recs, ph.mu_a_volume(), opt.frequency, opt.pairs)
    other = MeasurementFrame(z.values[2:], z.pairs[1:], z.f)
    with pytest.raises(ContractError):
        difference_data(z, other)


def test_small_contrast_linearity(setup):
    ph, opt, recs = setup
    mu = ph.mu_a_volume()
    tissue = ph.labels.ravel() != 0
    eps = 1e-4
    z0 = simulate_frame(recs, mu, opt.frequency, opt.pairs)
    y1 = difference_data(simulate_frame(recs, mu + eps * tissue, opt.frequency, opt.pairs), z0)
    y2 = difference_data(simulate_frame(recs, mu + 2 * eps * tissue, opt.frequency, opt.pairs), z0)
    assert np.all(np.abs(y2 - 2 * y1) <= 0.05 * np.abs(2 * y1))


def test_noise_level_formula():
    y0 = np.array([0.2, -0.1, 0.05, 0.01, -0.03, 0.02])
    std = noise_std(y0)
    assert np.allclose(std[:3], 0.002) and np.allclose(std[3:], 0.0003)
    y, G = add_noise(y0, 7)
    assert np.allclose(np.diag(G), std**2)
    y_again, _ = add_noise(y0, 7)
    assert np.array_equal(y, y_again)


def test_noise_empirical_std():
    y0 = np.array([0.2, -0.1, 0.05, 0.01, -0.03, 0.02])
    draws = np.array([add_noise(y0, s)[0] - y0 for s in range(10_000)])
    emp = draws.std(axis=0)
    assert np.all(np.abs(emp / noise_std(y0) - 1) <= 0.03)


def test_zero_signal_noise_rejected():
    with pytest.raises(ConfigurationError):
        add_noise(np.zeros(4), 0)


def test_single_packet_derivative():
    rs = make_records([{3: 2.5}], [0], n_launched=7)
    J = absorption_jacobian([rs], np.full(5, 0.02), 0.0, [[0, 0]])
    assert J[0, 3] == pytest.approx(-2.5, rel=1e-15)
    assert J[1, 3] == 0.0
    assert np.all(J[:, [0, 1, 2, 4]] == 0)


def test_jacobian_matches_central_differences(setup):
    ph, opt, recs = setup
    mu = ph.mu_a_volume()
    cols = np.flatnonzero(ph.labels.ravel() != 0)
    J = absorption_jacobian(recs, mu, opt.frequency, opt.pairs, mask=cols)
    F = central_difference_jacobian(recs, mu, opt.frequency, opt.pairs, cols, 1e-6)
    both_zero = (J == 0) & (F == 0)
    rel = np.abs(J - F)[~both_zero] / np.abs(J)[~both_zero]
    assert rel.max() <= 1e-6


def test_jacobian_first_order_taylor(setup):
    ph, opt, recs = setup
    mu = ph.mu_a_volume()
    tissue = (ph.labels.ravel() != 0).astype(float)
    J = absorption_jacobian(recs, mu, opt.frequency, opt.pairs)
    z0 = simulate_frame(recs, mu, opt.frequency, opt.pairs)
    errs = []
    for eps in (1e-4, 5e-5):
        y = difference_data(simulate_frame(recs, mu + eps * tissue, opt.frequency, opt.pairs), z0)
        errs.append(np.linalg.norm(y - J @ (eps * tissue)))
    # second-order remainder: halving eps quarters the error
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)


def test_absorption_increase_lowers_intensity(setup):
    ph, opt, recs = setup
    rs = recs[0]
    mu = ph.mu_a_volume()
    j = int(np.bincount(rs.voxels).argmax())
    base = np.abs(complex_intensity(rs, mu, 0.0, n_detectors=opt.n_detectors))
    mu2 = mu.copy()
    mu2[j] += 0.01
    after = np.abs(complex_intensity(rs, mu2, 0.0, n_detectors=opt.n_detectors))
    touched = np.unique(rs.detector[np.repeat(np.arange(len(rs)), np.diff(rs.offsets))[rs.voxels == j]])
    assert np.all(after[touched] < base[touched])


def test_jacobian_dead_channel(setup):
    ph, opt, recs = setup
    pairs = np.vstack([opt.pairs, [[0, 9]]])
    with pytest.raises(DeadChannelError) as err:
        absorption_jacobian(recs, ph.mu_a_volume(), opt.frequency, pairs)
    assert (0, 9) in err.value.pairs


def test_tissue_difference_zero_delta(setup):
    ph, opt, recs = setup
    D = tissue_difference_jacobian(recs, ph, "GM", 0.0, opt.frequency, opt.pairs, mask=np.arange(50))
    assert D.shape == (2 * opt.m, 50) and not np.any(D)


def test_tissue_difference_matches_definition(setup):
    ph, opt, recs = setup
    mu = ph.mu_a_volume()
    D = tissue_difference_jacobian(recs, ph, "GM", -0.017, opt.frequency, opt.pairs)
    shifted = ph.with_tissue_mu_a({"GM": 0.048 - 0.017}).mu_a_volume()
    ref = absorption_jacobian(recs, shifted, opt.frequency, opt.pairs) - absorption_jacobian(
        recs, mu, opt.frequency, opt.pairs)
    assert np.allclose(D, ref, rtol=0, atol=1e-14 * np.abs(ref).max())


def test_tissue_difference_richardson(setup):
    ph, opt, recs = setup
    mu = ph.mu_a_volume()
    gm = (ph.labels.ravel() == 4).astype(float)
    h = 1e-6
    # directional second derivative of J along the GM indicator
    d2 = (absorption_jacobian(recs, mu + h * gm, opt.frequency, opt.pairs)
          - absorption_jacobian(recs, mu - h * gm, opt.frequency, opt.pairs)) / (2 * h)
    errs = []
    for delta in (2e-3, 1e-3):
        D = tissue_difference_jacobian(recs, ph, "GM", delta, opt.frequency, opt.pairs)
        errs.append(np.linalg.norm(D / delta - d2))
    assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.1)


def test_tissue_difference_missing_tissue(setup):
    ph, opt, recs = setup
    with pytest.raises(ConfigurationError):
        tissue_difference_jacobian(recs, ph, "CSF-2", 0.01, opt.frequency, opt.pairs)


def test_jacobian_set_column_maps(setup):
    ph, opt, recs = setup
    J = np.arange(2 * opt.m * 6, dtype=float).reshape(2 * opt.m, 6)

    class M:
        roi_columns = np.array([0, 2, 4])
        roni_columns = np.array([1, 3, 5])
        roi_index = np.array([10, 12, 14])
        roni_index = np.array([11, 13, 15])

    js = JacobianSet.from_total(J, M, {"GM": 0.048})
    assert np.array_equal(js.J, J[:, ::2]) and np.array_equal(js.J_tilde, J[:, 1::2])
    with pytest.raises(ContractError):
        JacobianSet(J[:, :3], J[:, 3:], np.array([1, 2, 3]), np.array([3, 4, 5]), {})


def test_no_unexpected_warnings(setup):
    ph, opt, recs = setup
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        simulate_frame(recs, ph.mu_a_volume(), opt.frequency, opt.pairs)
