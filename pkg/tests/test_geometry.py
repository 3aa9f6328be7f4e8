import copy

import numpy as np
import pytest

from surftrap.constants import UM
from surftrap.geometry import (
    LayoutError,
    MeshError,
    builtin_smit_layout,
    discretize,
    gap_fillers,
    load_layout,
    rect_polygon,
    rectilinear_decompose,
)


def _rail_edges(layout):
    y1, y2 = sorted([layout["RF_T"].bounds[2:], layout["RF_B"].bounds[2:]])
    # y1 is the bottom rail (lower, upper), y2 the top rail
    return y2[0] - y1[1], y2[1] - y1[0]


@pytest.mark.parametrize("spacing, gap, span", [(150, 130, 170), (75, 55, 95)])
def test_builtin_rail_edges(spacing, gap, span):
    inner, outer = _rail_edges(builtin_smit_layout(spacing * UM))
    assert inner == pytest.approx(gap * UM, abs=1e-12)
    assert outer == pytest.approx(span * UM, abs=1e-12)


def test_builtin_slot_cuts_center_electrode():
    plain = builtin_smit_layout(125 * UM)
    slotted = builtin_smit_layout(125 * UM, with_slot=True)
    x1, x2, y1, y2 = slotted.loading_slot
    assert slotted["C"].area == pytest.approx(plain["C"].area - (x2 - x1) * (y2 - y1), rel=1e-12)
    assert len(slotted["C"].rectangles) > len(plain["C"].rectangles)


def test_builtin_rejects_unknown_spacing():
    with pytest.raises(LayoutError, match="unsupported rail spacing"):
        builtin_smit_layout(90 * UM)


def test_rails_are_raised(layout150):
    assert layout150["RF_T"].layer_height == pytest.approx(10 * UM)
    assert layout150["C"].layer_height == 0.0
    assert layout150.rf_names == ["RF_T", "RF_B"]


def test_round_trip(layout150):
    again = load_layout(layout150.dumps())
    assert again.to_document() == layout150.to_document()
    assert again.names == layout150.names


def test_duplicate_name_rejected(layout150):
    doc = layout150.to_document()
    doc["electrodes"][3]["name"] = "C"
    with pytest.raises(LayoutError, match="duplicate electrode name 'C'"):
        load_layout(doc)


def test_overlap_names_both(layout150):
    doc = copy.deepcopy(layout150.to_document())
    a = next(e for e in doc["electrodes"] if e["name"] == "2T")
    b = next(e for e in doc["electrodes"] if e["name"] == "3T")
    b["polygons"] = copy.deepcopy(a["polygons"])
    b["polygons"][0][0][0] += 10.0
    with pytest.raises(LayoutError) as info:
        load_layout(doc)
    assert "'2T'" in str(info.value) and "'3T'" in str(info.value)


def test_schema_violation_reports_path(layout150):
    doc = layout150.to_document()
    doc["electrodes"][0]["role"] = "bogus"
    with pytest.raises(LayoutError, match="schema violation"):
        load_layout(doc)


def test_rectilinear_decompose_l_shape():
    poly = [(0, 0), (2, 0), (2, 1), (1, 1), (1, 2), (0, 2)]
    rects = rectilinear_decompose(poly)
    assert sum((x2 - x1) * (y2 - y1) for x1, x2, y1, y2 in rects) == pytest.approx(3.0)


def test_rail_panel_count():
    # 20 um x 1 mm rail at 5 um panels -> 4 x 200 = 800 panels
    doc = {
        "format": "surftrap-layout",
        "version": 1,
        "units": "um",
        "electrodes": [{"name": "RF", "role": "rf", "polygons": [[list(p) for p in rect_polygon(0, 1000, 0, 20)]]}],
    }
    mesh = discretize(load_layout(doc), 5 * UM)
    assert len(mesh) == 800
    assert mesh.area_of("RF") == pytest.approx(20e-6 * 1e-3, rel=1e-12)


def test_halving_edge_quadruples_panels(layout150):
    a = len(discretize(layout150, 20 * UM))
    b = len(discretize(layout150, 10 * UM))
    assert b / a == pytest.approx(4.0, rel=0.1)


def test_graded_mesh_conserves_area(layout150):
    x = layout150.electrode_center("3T")[0]
    mesh = discretize(layout150, 5 * UM, focus=(x, 0.0), growth=0.3, max_edge=200 * UM, fine_radius=(100 * UM, 100 * UM))
    for name in layout150.names:
        assert mesh.area_of(name) == pytest.approx(layout150[name].area, rel=5e-3)


def test_edge_larger_than_smallest_electrode(layout150):
    with pytest.raises(MeshError, match="smallest electrode"):
        discretize(layout150, 30 * UM)


def test_gap_fillers_tile_bounding_box(layout150):
    x1, x2, y1, y2 = layout150.bounds
    filled = sum((b - a) * (d - c) for a, b, c, d in gap_fillers(layout150))
    assert filled + sum(e.area for e in layout150.electrodes) == pytest.approx((x2 - x1) * (y2 - y1), rel=1e-12)


def test_filler_aspect_cap(layout150):
    x = layout150.electrode_center("3T")[0]
    kw = dict(focus=(x, 0.0), growth=0.3, max_edge=200 * UM, fine_radius=(100 * UM, 100 * UM), fill_gaps=True)
    mesh = discretize(layout150, 5 * UM, max_aspect=8.0, **kw)
    fill = mesh.panels_of("_fill")
    h = mesh.half_sizes[fill]
    assert np.all(h.max(axis=1) / h.min(axis=1) <= 8.0 + 1e-9)
    assert mesh.area_of("_fill") == pytest.approx(discretize(layout150, 5 * UM, **kw).area_of("_fill"), rel=1e-12)
