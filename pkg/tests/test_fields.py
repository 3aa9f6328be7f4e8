import numpy as np
import pytest

from surftrap.constants import UM
from surftrap.fields import (
    AnalyticField,
    FIELDMAP_HEADER,
    FieldDomainError,
    MissingBasisError,
    VoltageSet,
    analytic_bases,
    field_at,
    potential_at,
    rectangle_field,
    sample_grid,
)
from surftrap.geometry import LayoutError, gap_fillers


def laplace_ratio(fn, p, h=0.1 * UM):
    """|discrete Laplacian| over the summed magnitude of its three terms."""
    p = np.asarray(p, float)
    c = fn(p)
    terms = []
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        terms.append(fn(p + e) + fn(p - e) - 2 * c)
    return abs(sum(terms)) / sum(abs(t) for t in terms)


def test_plane_capacitor_limit():
    f = rectangle_field(-1.0, 1.0, -1.0, 1.0)
    assert f.potential([0.0, 0.0, 1 * UM]) == pytest.approx(1.0, abs=1e-5)


def test_decay():
    f = rectangle_field(0, 100 * UM, 0, 100 * UM)
    assert f.potential([0, 0, 1.0]) < 1e-8


def test_potential_in_unit_interval(analytic150):
    rng = np.random.default_rng(1)
    pts = rng.uniform([-200e-6, -300e-6, 1e-6], [1.2e-3, 300e-6, 300e-6], size=(500, 3))
    for f in analytic150.values():
        phi = f.potential(pts)
        assert phi.min() >= -1e-12 and phi.max() <= 1 + 1e-12


def test_gapless_completeness(layout150, analytic150):
    rects = np.array(gap_fillers(layout150))
    fill = AnalyticField("fill", rects, np.ones(len(rects)))
    x1, x2, y1, y2 = layout150.bounds
    # far inside the tiled box, the covered plane looks infinite
    for z in (1e-6, 74e-6, 300e-6):
        p = np.array([0.5 * (x1 + x2), 0.0, z])
        total = sum(f.potential(p) for f in analytic150.values()) + fill.potential(p)
        outside = 1.0 - rectangle_field(x1, x2, y1, y2).potential(p)
        assert total + outside == pytest.approx(1.0, abs=1e-9)


def test_laplace_residual_analytic(analytic150, layout150):
    x = layout150.electrode_center("3T")[0]
    for name in ("RF_T", "C", "3T"):
        for p in ([x, 0, 74e-6], [x + 37e-6, 20e-6, 40e-6], [x, -60e-6, 10e-6]):
            assert laplace_ratio(analytic150[name].potential, p) < 1e-4


def test_superposition(analytic150):
    p = np.array([[455e-6, 0.0, 74e-6], [300e-6, 20e-6, 50e-6]])
    assert np.all(potential_at(analytic150, {}, p) == 0.0)
    assert np.all(potential_at(analytic150, {"C": 0.0}, p) == 0.0)
    a = potential_at(analytic150, {"3T": 1.7}, p)
    b = potential_at(analytic150, {"C": -2.3}, p)
    ab = potential_at(analytic150, {"3T": 1.7, "C": -2.3}, p)
    np.testing.assert_allclose(a + b, ab, rtol=1e-12, atol=1e-15)
    v = {"3T": 1.7, "C": -2.3, "2B": 4.0}
    np.testing.assert_allclose(potential_at(analytic150, {k: 2 * x for k, x in v.items()}, p), 2 * potential_at(analytic150, v, p), rtol=1e-12)
    np.testing.assert_allclose(field_at(analytic150, {k: 2 * x for k, x in v.items()}, p), 2 * field_at(analytic150, v, p), rtol=1e-12)


def test_field_is_minus_gradient(analytic150):
    v = {"3T": 1.7, "C": -2.3, "RF_T": 3.0}
    p = np.array([455e-6, 10e-6, 60e-6])
    h = 1e-9
    fd = np.array([(potential_at(analytic150, v, p + h * e) - potential_at(analytic150, v, p - h * e)) / (2 * h) for e in np.eye(3)])
    E = field_at(analytic150, v, p)
    np.testing.assert_allclose(-fd, E, rtol=1e-6, atol=1e-6 * np.abs(E).max())


def test_rail_symmetry(analytic150, layout150):
    x = layout150.electrode_center("3T")[0]
    p = np.array([x, 0.0, 60e-6])
    assert field_at(analytic150, {"RF_T": 1.0, "RF_B": 1.0}, p)[1] == pytest.approx(0.0, abs=1e-9)
    anti = {"RF_T": 1.0, "RF_B": -1.0}
    assert potential_at(analytic150, anti, p) == pytest.approx(0.0, abs=1e-12)
    assert field_at(analytic150, anti, p)[2] == pytest.approx(0.0, abs=1e-6)


def test_rf_alias_expands_to_rails(analytic150):
    p = [455e-6, 0.0, 74e-6]
    assert potential_at(analytic150, {"RF": 2.0}, p) == pytest.approx(potential_at(analytic150, {"RF_T": 2.0, "RF_B": 2.0}, p))


def test_unknown_electrode(analytic150):
    with pytest.raises(MissingBasisError):
        potential_at(analytic150, {"99T": 1.0}, [0, 0, 1e-5])


def test_voltage_set_bounds_and_resolution(layout150):
    with pytest.raises(ValueError, match="outside"):
        VoltageSet({"C": 16.0})
    v = VoltageSet({"RF": 2.34, "3T": 1.0})
    r = v.resolved(layout150)
    assert r["RF_T"] == r["RF_B"] == 2.34 and r["3T"] == 1.0 and r["2T"] == 0.0
    with pytest.raises(LayoutError):
        VoltageSet({"nope": 1.0}).resolved(layout150)


def test_below_plane_rejected(analytic150):
    with pytest.raises(FieldDomainError):
        analytic150["C"].potential([0, 0, -1e-6])


def test_fieldmap_format_and_determinism(analytic150):
    box = ((400e-6, 500e-6), (-10e-6, 10e-6), (60e-6, 80e-6))
    v = {"C": 1.0, "3T": 2.0}
    text = sample_grid(analytic150, v, box, (2, 2, 2))
    lines = text.splitlines()
    assert lines[0] == ",".join(FIELDMAP_HEADER)
    assert len(lines) == 9
    xs = [float(l.split(",")[0]) for l in lines[1:3]]
    assert xs == [400.0, 500.0]  # x varies fastest
    assert float(lines[1].split(",")[1]) == float(lines[2].split(",")[1])
    assert text == sample_grid(analytic150, v, box, (2, 2, 2))


def test_fieldmap_below_plane(analytic150):
    with pytest.raises(FieldDomainError):
        sample_grid(analytic150, {"C": 1.0}, ((0, 1e-5), (0, 1e-5), (-1e-6, 1e-5)), (2, 2, 2))


def test_analytic_bases_cover_layout(layout150, analytic150):
    assert set(analytic150) == set(layout150.names)
    assert analytic150["RF_T"].role == "rf"
    assert set(analytic_bases(layout150, ["C"])) == {"C"}
