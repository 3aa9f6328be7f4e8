import math

import numpy as np
import pytest

from surftrap.constants import MHZ, UM
from surftrap.control import (
    InfeasibleError,
    RankDeficientError,
    StrayField,
    Waveform,
    axis_tilt_check,
    compensate_stray_field,
    micromotion_amplitude,
    minimum_jerk,
    shuttle_waveform,
    solve_well,
)
from surftrap.fields import analytic_bases, stacked_gradients
from surftrap.geometry import builtin_smit_layout
from surftrap.pseudo import DriveConfig, SecularResult, characterize, find_rf_null, rail_midline

# q E / (m w^2) for Sr-88+, E = 1e3 V/m, w = 2 pi 1.7 MHz, evaluated by hand
# with CODATA constants: 1.602177e-16 / (1.459719e-25 * 1.140920e14)
MIT_STRAY_DISPLACEMENT = 9.6202e-6  # m


@pytest.fixture(scope="module")
def mit_setup(layout150, analytic150):
    rf = {n: analytic150[n] for n in layout150.rf_names}
    dc = {n: analytic150[n] for n in layout150.dc_names}
    x = layout150.electrode_center("3T")[0]
    r0 = find_rf_null(rf, [x, rail_midline(layout150), 75e-6])
    return rf, dc, x, r0


def _secular(axes, freqs=(1.7e6, 2.1e6, 0.54e6), q=None):
    return SecularResult(np.zeros(3), np.zeros(3), np.array(freqs), np.asarray(axes, float), 0.0, 0.0, mathieu_q=q)


def test_zero_stray_gives_zero_deltas(mit_setup):
    _, dc, _, r0 = mit_setup
    res = compensate_stray_field(dc, StrayField((0.0, 0.0, 0.0)), r0)
    assert all(v == 0.0 for v in res.deltas.values())
    assert res.feasible


def test_constructed_inverse(mit_setup):
    _, dc, _, r0 = mit_setup
    basis = {n: dc[n] for n in ("C", "3T", "3B")}
    e_c = -dc["C"].gradient(r0)
    res = compensate_stray_field(basis, StrayField(tuple(-e_c)), r0)
    assert res.deltas["C"] == pytest.approx(1.0, rel=1e-9)
    assert abs(res.deltas["3T"]) < 1e-9 and abs(res.deltas["3B"]) < 1e-9


def test_random_stray_matches_normal_equations(mit_setup):
    _, dc, _, r0 = mit_setup
    G = -stacked_gradients(list(dc.values()), r0[None, :])[0]
    rng = np.random.default_rng(7)
    for _ in range(5):
        e = rng.uniform(-1, 1, 3)
        e *= 1e3 * rng.uniform() / np.linalg.norm(e)
        res = compensate_stray_field(dc, StrayField(tuple(e)), r0)
        assert res.residual_norm < 1e-6 * np.linalg.norm(e)
        oracle = np.linalg.lstsq(G, -e, rcond=None)[0]  # minimum-norm normal-equations solution
        np.testing.assert_allclose([res.deltas[n] for n in dc], oracle, atol=1e-9 * max(1.0, np.abs(oracle).max()))


def test_compensation_rank_deficient(mit_setup):
    _, dc, _, r0 = mit_setup
    with pytest.raises(RankDeficientError):
        compensate_stray_field({"C": dc["C"], "3T": dc["3T"]}, StrayField((1.0, 0.0, 0.0)), r0)


def test_compensation_bounds_flag_infeasible(mit_setup):
    _, dc, _, r0 = mit_setup
    res = compensate_stray_field(dc, StrayField((0.0, 5e5, 5e5)), r0, bounds=0.1)
    assert not res.feasible and res.active_bounds
    with pytest.raises(InfeasibleError):
        compensate_stray_field(dc, StrayField((0.0, 5e5, 5e5)), r0, bounds=0.1, strict=True)


def test_stray_field_validation():
    with pytest.raises(ValueError):
        StrayField((1.0, 2.0))
    with pytest.raises(ValueError):
        StrayField((2e6, 0.0, 0.0))
    with pytest.raises(ValueError):
        StrayField((1.0, 0.0, 0.0), provenance="guessed")


def test_tilt_identity_axes():
    rep = axis_tilt_check(_secular(np.eye(3)), [(1 / math.sqrt(2), 1 / math.sqrt(2), 0.0)])
    assert rep.projections[2] == pytest.approx(0.0, abs=1e-15)
    assert rep.flagged == ("z",)


def test_tilt_beam_along_eigenvector():
    rep = axis_tilt_check(_secular(np.eye(3)), [(0.0, 1.0, 0.0)])
    assert rep.projections[1] == pytest.approx(1.0)


def test_tilt_rotated_axes():
    th = math.radians(14.0)
    # radial axes rotated 14 deg about the trap axis (lab x); axial axis along x
    axes = np.array([[0, 0, 1], [math.cos(th), -math.sin(th), 0], [math.sin(th), math.cos(th), 0]], float)
    rep = axis_tilt_check(_secular(axes), [(1.0, 0.0, 0.0)])
    assert rep.projections[2] == pytest.approx(1.0)
    np.testing.assert_allclose(rep.projections[:2], [0.0, 0.0], atol=1e-15)
    beam = np.array([1.0, 1.0, 0.0]) / math.sqrt(2)
    rep = axis_tilt_check(_secular(axes), [beam])
    np.testing.assert_allclose(rep.projections, np.abs(beam @ axes))
    assert rep.projections[0] == pytest.approx(math.cos(th) / math.sqrt(2))


def test_solve_well_hits_published_axial_frequency(mit_setup, sr88, mit_drive, mit_config, layout150, analytic150):
    rf, dc, x, r0 = mit_setup
    # position of the well set by the published MIT voltages, then re-solve for the quoted 0.54 MHz there
    table = characterize(rf, analytic150, mit_drive, mit_config["voltages"], sr88, r0, 150e-6, depth=False)
    well = solve_well(dc, rf, mit_drive, sr88, table.minimum[0], 0.54 * MHZ, bounds=15.0, seed=r0, span=layout150.dc_span())
    assert well.secular.frequencies[2] == pytest.approx(0.54 * MHZ, rel=0.05)
    assert max(abs(v) for v in well.voltages.values()) <= 15.0


def test_solve_well_linear_in_curvature(mit_setup, sr88, mit_drive, layout150):
    rf, dc, x, r0 = mit_setup
    a = solve_well(dc, rf, mit_drive, sr88, x, 0.3 * MHZ, bounds=15.0, seed=r0, verify=False)
    b = solve_well(dc, rf, mit_drive, sr88, x, 0.3 * math.sqrt(2) * MHZ, bounds=15.0, seed=r0, verify=False)
    assert max(abs(v) for v in b.voltages.values()) < 15.0
    for n in dc:
        assert b.voltages[n] == pytest.approx(2 * a.voltages[n], rel=1e-6, abs=1e-9)


def test_solve_well_outside_array(mit_setup, sr88, mit_drive, layout150):
    rf, dc, _, r0 = mit_setup
    with pytest.raises(InfeasibleError, match="outside"):
        solve_well(dc, rf, mit_drive, sr88, -2e-3, 0.5 * MHZ, span=layout150.dc_span())


def test_minimum_jerk_endpoints():
    s = np.linspace(0, 1, 11)
    m = minimum_jerk(s)
    assert m[0] == 0.0 and m[-1] == 1.0 and np.all(np.diff(m) > 0)
    np.testing.assert_allclose(m + minimum_jerk(1 - s), 1.0, atol=1e-15)


@pytest.fixture(scope="module")
def nist_setup():
    # load zone geometry: 150 um rails with the loading slot under pair 2
    layout = builtin_smit_layout(150 * UM, with_slot=True)
    bases = analytic_bases(layout)
    rf = {n: bases[n] for n in layout.rf_names}
    dc = {n: bases[n] for n in layout.dc_names}
    return layout, rf, dc


def test_shuttle_degenerate_path(mit_setup, sr88, mit_drive, layout150):
    rf, dc, x, r0 = mit_setup
    wf = shuttle_waveform(dc, rf, mit_drive, sr88, x, x, 4, 0.5 * MHZ, seed=r0, span=layout150.dc_span())
    single = solve_well(dc, rf, mit_drive, sr88, x, 0.5 * MHZ, seed=r0, span=layout150.dc_span())
    for f in wf.frames:
        assert dict(f) == dict(single.voltages)


def test_nist_transport(nist_setup, mg25):
    layout, rf, dc = nist_setup
    drive = DriveConfig.parse("140V@52MHz")
    x0, x1 = layout.electrode_center("2T")[0], layout.electrode_center("5T")[0]
    seed = [x0, 0.0, 75e-6]
    # 7 frames: near x = 165 um, by the slot edge, 1 MHz needs ~101% of the 15 V budget
    wf = shuttle_waveform(dc, rf, drive, mg25, x0, x1, 7, 1.0 * MHZ, duration=50e-6, bounds=15.0, seed=seed, span=layout.dc_span())
    assert len(wf) == 7 and len(wf.secular) == 7
    assert np.abs(wf.matrix()).max() <= 15.0
    xs = np.array([s.minimum[0] for s in wf.secular])
    assert np.all(np.diff(xs) > 0)
    np.testing.assert_allclose(xs, wf.positions, atol=1 * UM)
    for s in wf.secular:
        assert s.frequencies[2] == pytest.approx(1.0 * MHZ, rel=0.10)
    back = shuttle_waveform(dc, rf, drive, mg25, x1, x0, 7, 1.0 * MHZ, duration=50e-6, bounds=15.0, seed=seed, span=layout.dc_span())
    np.testing.assert_allclose(back.matrix(), wf.matrix()[::-1], atol=1e-6)
    again = Waveform.from_csv(wf.to_csv())
    np.testing.assert_allclose(again.matrix(), wf.matrix(), rtol=1e-8)
    assert again.frame_period == pytest.approx(50e-6 / 6)


def test_micromotion(sr88, mit_drive):
    sec = _secular(np.eye(3), freqs=(1.7e6, 2.1e6, 0.54e6), q=np.array([0.12, 0.15, 0.0]))
    zero = micromotion_amplitude(None, mit_drive, sr88, StrayField((0.0, 0.0, 0.0)), sec, [(1e7, 0, 0)])
    assert np.all(zero.displacement == 0) and np.all(zero.modulation_index == 0)
    one = micromotion_amplitude(None, mit_drive, sr88, StrayField((1e3, 0.0, 0.0)), sec, [(1e7, 0, 0)])
    assert one.displacement[0] == pytest.approx(MIT_STRAY_DISPLACEMENT, rel=1e-4)
    assert one.amplitude[0] == pytest.approx(0.06 * MIT_STRAY_DISPLACEMENT, rel=1e-4)
    two = micromotion_amplitude(None, mit_drive, sr88, StrayField((2e3, 0.0, 0.0)), sec, [(1e7, 0, 0)])
    np.testing.assert_allclose(two.displacement, 2 * one.displacement)
    np.testing.assert_allclose(two.modulation_index, 2 * one.modulation_index)
