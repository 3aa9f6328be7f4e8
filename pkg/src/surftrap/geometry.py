"""Planar electrode layouts: definition, validation, (de)serialization, meshing.

Coordinates are SI (meters) internally with x along the trap axis, y
transverse in the chip plane and z normal to the chip. Layout documents on
disk are JSON in micrometers.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import jsonschema
import numpy as np
from shapely.geometry import Polygon, box
from shapely.validation import explain_validity

from .constants import UM

logger = logging.getLogger(__name__)

ROLES = ("rf", "dc", "ground_plane")
BUILTIN_SPACINGS_UM = (75, 100, 125, 150)

# Zone-graded DC widths in um for pairs 2..20 (figure range 50-300 um).
DEFAULT_DC_WIDTHS_UM = {n: 300.0 for n in range(2, 5)}
DEFAULT_DC_WIDTHS_UM.update({n: 200.0 for n in range(5, 9)})
DEFAULT_DC_WIDTHS_UM.update({n: 100.0 for n in range(9, 14)})
DEFAULT_DC_WIDTHS_UM.update({n: 50.0 for n in range(14, 21)})

RAIL_WIDTH_UM = 20.0
RAIL_HEIGHT_UM = 10.0
GAP_UM = 5.0
DC_LENGTH_UM = 1000.0
RAIL_OVERHANG_UM = 500.0
GROUND_WIDTH_UM = 1000.0

Rect = tuple[float, float, float, float]  # x1, x2, y1, y2


class LayoutError(ValueError):
    """Invalid layout; carries the offending electrode name(s) and location."""

    def __init__(self, message: str, electrodes: Sequence[str] = (), location=None):
        super().__init__(message)
        self.electrodes = tuple(electrodes)
        self.location = location


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class Electrode:
    name: str
    role: str
    polygons: tuple[tuple[tuple[float, float], ...], ...]
    layer_height: float = 0.0

    def __post_init__(self):
        if self.role not in ROLES:
            raise LayoutError(f"electrode {self.name!r}: unknown role {self.role!r}", [self.name])
        if not self.polygons:
            raise LayoutError(f"electrode {self.name!r} has no polygons", [self.name])
        for k, poly in enumerate(self.polygons):
            shp = Polygon(poly)
            if len(poly) < 3 or not shp.is_valid or shp.area <= 0.0:
                why = explain_validity(shp) if len(poly) >= 3 else "fewer than 3 vertices"
                raise LayoutError(
                    f"electrode {self.name!r} polygon {k} is not a simple polygon with "
                    f"nonzero area ({why})",
                    [self.name],
                    location=poly[0] if poly else None,
                )

    @cached_property
    def shapes(self) -> list[Polygon]:
        return [Polygon(p) for p in self.polygons]

    @property
    def area(self) -> float:
        return float(sum(s.area for s in self.shapes))

    @cached_property
    def rectangles(self) -> tuple[Rect, ...]:
        """Axis-aligned rectangle decomposition of all polygons."""
        out: list[Rect] = []
        for poly in self.polygons:
            out.extend(rectilinear_decompose(poly, self.name))
        return tuple(out)

    @property
    def min_dimension(self) -> float:
        return min(min(x2 - x1, y2 - y1) for x1, x2, y1, y2 in self.rectangles)

    @property
    def bounds(self) -> Rect:
        r = np.array(self.rectangles)
        return (r[:, 0].min(), r[:, 1].max(), r[:, 2].min(), r[:, 3].max())


def rect_polygon(x1, x2, y1, y2) -> tuple[tuple[float, float], ...]:
    return ((x1, y1), (x2, y1), (x2, y2), (x1, y2))


def rectilinear_decompose(poly: Sequence[tuple[float, float]], name: str = "?") -> list[Rect]:
    """Split an orthogonal polygon into axis-aligned rectangles.

    Cells of the grid spanned by the vertex coordinates are kept when their
    center is inside, then merged into horizontal strips and stacked.
    """
    pts = np.asarray(poly, dtype=float)
    nxt = np.roll(pts, -1, axis=0)
    axis_aligned = (pts[:, 0] == nxt[:, 0]) | (pts[:, 1] == nxt[:, 1])
    if not axis_aligned.all():
        k = int(np.argmin(axis_aligned))
        raise LayoutError(
            f"electrode {name!r}: polygon edge {k} is not axis-aligned; "
            "cannot decompose into rectangles",
            [name],
            location=tuple(pts[k]),
        )
    xs = np.unique(pts[:, 0])
    ys = np.unique(pts[:, 1])
    if len(pts) == 4 and len(xs) == 2 and len(ys) == 2:
        return [(xs[0], xs[1], ys[0], ys[1])]
    shp = Polygon(poly)
    strips: list[list[float]] = []
    for j in range(len(ys) - 1):
        yc = 0.5 * (ys[j] + ys[j + 1])
        run = None
        for i in range(len(xs) - 1):
            xc = 0.5 * (xs[i] + xs[i + 1])
            inside = shp.contains(_point(xc, yc))
            if inside and run is None:
                run = xs[i]
            if not inside and run is not None:
                strips.append([run, xs[i], ys[j], ys[j + 1]])
                run = None
        if run is not None:
            strips.append([run, xs[-1], ys[j], ys[j + 1]])
    return _stack_strips(strips)


def _point(x, y):
    from shapely.geometry import Point

    return Point(x, y)


def _stack_strips(strips: list[list[float]]) -> list[Rect]:
    merged: list[list[float]] = []
    for s in strips:
        for m in merged:
            if m[0] == s[0] and m[1] == s[1] and m[3] == s[2]:
                m[3] = s[3]
                break
        else:
            merged.append(list(s))
    return [tuple(float(v) for v in m) for m in merged]


@dataclass(frozen=True)
class ElectrodeLayout:
    electrodes: tuple[Electrode, ...]
    loading_slot: Rect | None = None
    rail_spacing: float | None = None
    name: str = "layout"
    units: str = "m"

    def __post_init__(self):
        names = [e.name for e in self.electrodes]
        seen = set()
        for n in names:
            if n in seen:
                raise LayoutError(f"duplicate electrode name {n!r}", [n])
            seen.add(n)
        self._check_overlaps()

    def _check_overlaps(self):
        els = self.electrodes
        for i in range(len(els)):
            for j in range(i + 1, len(els)):
                a, b = els[i], els[j]
                if a.layer_height != b.layer_height:
                    continue
                for sa in a.shapes:
                    for sb in b.shapes:
                        if not sa.intersects(sb):
                            continue
                        inter = sa.intersection(sb)
                        tol = 1e-9 * min(sa.area, sb.area)
                        if inter.area > tol:
                            c = inter.centroid
                            raise LayoutError(
                                f"electrodes {a.name!r} and {b.name!r} overlap near "
                                f"({c.x / UM:.3f}, {c.y / UM:.3f}) um",
                                [a.name, b.name],
                                location=(c.x, c.y),
                            )

    def __getitem__(self, name: str) -> Electrode:
        for e in self.electrodes:
            if e.name == name:
                return e
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(e.name == name for e in self.electrodes)

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.electrodes]

    def names_with_role(self, role: str) -> list[str]:
        return [e.name for e in self.electrodes if e.role == role]

    @property
    def rf_names(self) -> list[str]:
        return self.names_with_role("rf")

    @property
    def dc_names(self) -> list[str]:
        return self.names_with_role("dc")

    @property
    def bounds(self) -> Rect:
        b = np.array([e.bounds for e in self.electrodes])
        return (b[:, 0].min(), b[:, 1].max(), b[:, 2].min(), b[:, 3].max())

    def electrode_center(self, name: str) -> tuple[float, float]:
        x1, x2, y1, y2 = self[name].bounds
        return 0.5 * (x1 + x2), 0.5 * (y1 + y2)

    def dc_span(self) -> tuple[float, float]:
        """Axial extent covered by the DC control electrodes."""
        b = np.array([self[n].bounds for n in self.dc_names])
        return float(b[:, 0].min()), float(b[:, 1].max())

    def to_document(self) -> dict:
        def um(v):
            return round(v / UM, 9)

        return {
            "format": "surftrap-layout",
            "version": 1,
            "units": "um",
            "name": self.name,
            "rail_spacing_um": None if self.rail_spacing is None else um(self.rail_spacing),
            "loading_slot_um": None if self.loading_slot is None else [um(v) for v in self.loading_slot],
            "electrodes": [
                {
                    "name": e.name,
                    "role": e.role,
                    "layer_height_um": um(e.layer_height),
                    "polygons": [[[um(x), um(y)] for x, y in poly] for poly in e.polygons],
                }
                for e in self.electrodes
            ],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_document(), indent=1) + "\n"


LAYOUT_SCHEMA = {
    "type": "object",
    "required": ["electrodes"],
    "properties": {
        "units": {"enum": ["um"]},
        "name": {"type": "string"},
        "rail_spacing_um": {"type": ["number", "null"]},
        "loading_slot_um": {
            "oneOf": [
                {"type": "null"},
                {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4},
            ]
        },
        "electrodes": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "role", "polygons"],
                "properties": {
                    "name": {"type": "string", "minLength": 1},
                    "role": {"enum": list(ROLES)},
                    "layer_height_um": {"type": "number", "minimum": 0},
                    "polygons": {
                        "type": "array",
                        "minItems": 1,
                        "items": {
                            "type": "array",
                            "minItems": 3,
                            "items": {
                                "type": "array",
                                "items": {"type": "number"},
                                "minItems": 2,
                                "maxItems": 2,
                            },
                        },
                    },
                },
            },
        },
    },
}


def load_layout(document: str | Mapping) -> ElectrodeLayout:
    """Parse and validate a layout document (JSON text or already-parsed dict)."""
    doc = json.loads(document) if isinstance(document, str) else document
    try:
        jsonschema.validate(doc, LAYOUT_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path)
        names = []
        if len(exc.absolute_path) >= 2 and exc.absolute_path[0] == "electrodes":
            try:
                names = [doc["electrodes"][exc.absolute_path[1]].get("name", "?")]
            except (IndexError, AttributeError, TypeError):
                pass
        raise LayoutError(f"schema violation at /{path}: {exc.message}", names, location=path) from None

    def m(v):
        return float(v) * UM

    electrodes = tuple(
        Electrode(
            name=e["name"],
            role=e["role"],
            polygons=tuple(tuple((m(x), m(y)) for x, y in poly) for poly in e["polygons"]),
            layer_height=m(e.get("layer_height_um", 0.0)),
        )
        for e in doc["electrodes"]
    )
    slot = doc.get("loading_slot_um")
    spacing = doc.get("rail_spacing_um")
    return ElectrodeLayout(
        electrodes=electrodes,
        loading_slot=None if slot is None else tuple(m(v) for v in slot),
        rail_spacing=None if spacing is None else m(spacing),
        name=doc.get("name", "layout"),
    )


def builtin_smit_layout(
    rail_spacing: float,
    with_slot: bool = False,
    dc_widths_um: Mapping[int, float] | None = None,
) -> ElectrodeLayout:
    """Single-zone reconstruction of the multiplexed surface trap.

    Two 20 um RF rails raised 10 um at the given center-to-center spacing, a
    center electrode between them, 19 DC pairs ``2T/2B`` ... ``20T/20B``
    outside the rails and a grounded frame. ``x = 0`` is the left edge of
    pair 2. All gaps are 5 um.
    """
    s_um = rail_spacing / UM
    matches = [s for s in BUILTIN_SPACINGS_UM if abs(s - s_um) < 1e-6]
    if not matches:
        raise LayoutError(
            f"unsupported rail spacing {s_um:g} um; expected one of {BUILTIN_SPACINGS_UM}"
        )
    s = float(matches[0])
    widths = dict(DEFAULT_DC_WIDTHS_UM if dc_widths_um is None else dc_widths_um)
    rw, g = RAIL_WIDTH_UM, GAP_UM

    lefts = {}
    x = 0.0
    for n in range(2, 21):
        lefts[n] = x
        x += widths[n] + g
    array_end = x - g
    X1, X2 = -RAIL_OVERHANG_UM, array_end + RAIL_OVERHANG_UM

    rail_in, rail_out = s / 2 - rw / 2, s / 2 + rw / 2
    c_half = rail_in - g
    dc_in, dc_out = rail_out + g, rail_out + g + DC_LENGTH_UM

    def el(name, role, rects, h=0.0):
        return Electrode(
            name,
            role,
            tuple(rect_polygon(*(v * UM for v in r)) for r in rects),
            layer_height=h * UM,
        )

    electrodes = [
        el("RF_T", "rf", [(X1, X2, rail_in, rail_out)], RAIL_HEIGHT_UM),
        el("RF_B", "rf", [(X1, X2, -rail_out, -rail_in)], RAIL_HEIGHT_UM),
    ]
    slot = None
    if with_slot:
        sx1, sx2 = lefts[2], lefts[2] + widths[2]
        sh = c_half / 2
        slot = (sx1, sx2, -sh, sh)
        c_rects = [
            (X1, sx1, -c_half, c_half),
            (sx2, X2, -c_half, c_half),
            (sx1, sx2, sh, c_half),
            (sx1, sx2, -c_half, -sh),
        ]
    else:
        c_rects = [(X1, X2, -c_half, c_half)]
    electrodes.append(el("C", "dc", c_rects))
    for n in range(2, 21):
        a, b = lefts[n], lefts[n] + widths[n]
        electrodes.append(el(f"{n}T", "dc", [(a, b, dc_in, dc_out)]))
        electrodes.append(el(f"{n}B", "dc", [(a, b, -dc_out, -dc_in)]))

    # grounded end blocks beside the DC array plus a surrounding frame
    W = GROUND_WIDTH_UM
    gnd = [
        (X1, -g, dc_in, dc_out),
        (X1, -g, -dc_out, -dc_in),
        (array_end + g, X2, dc_in, dc_out),
        (array_end + g, X2, -dc_out, -dc_in),
        (X1 - g - W, X2 + g + W, dc_out + g, dc_out + g + W),
        (X1 - g - W, X2 + g + W, -dc_out - g - W, -dc_out - g),
        (X1 - g - W, X1 - g, -dc_out - g, dc_out + g),
        (X2 + g, X2 + g + W, -dc_out - g, dc_out + g),
    ]
    electrodes.append(el("GND", "ground_plane", gnd))
    return ElectrodeLayout(
        electrodes=tuple(electrodes),
        loading_slot=None if slot is None else tuple(v * UM for v in slot),
        rail_spacing=s * UM,
        name=f"smit-{int(s)}um" + ("-slot" if with_slot else ""),
    )


def gap_fillers(layout: ElectrodeLayout, bbox: Rect | None = None) -> list[Rect]:
    """Rectangles tiling ``bbox`` minus the (z-projected) electrode union.

    Together with the electrodes these tile the bounding box exactly, which is
    what the gapless-plane completeness check needs.
    """
    rects = [r for e in layout.electrodes for r in e.rectangles]
    if bbox is None:
        bbox = layout.bounds
    bx1, bx2, by1, by2 = bbox
    xs = np.unique(np.clip([v for r in rects for v in r[:2]] + [bx1, bx2], bx1, bx2))
    ys = np.unique(np.clip([v for r in rects for v in r[2:]] + [by1, by2], by1, by2))
    R = np.array(rects)
    strips = []
    for j in range(len(ys) - 1):
        yc = 0.5 * (ys[j] + ys[j + 1])
        xc = 0.5 * (xs[:-1] + xs[1:])
        covered = (
            (xc[:, None] > R[None, :, 0])
            & (xc[:, None] < R[None, :, 1])
            & (yc > R[None, :, 2])
            & (yc < R[None, :, 3])
        ).any(axis=1)
        run = None
        for i, cov in enumerate(covered):
            if not cov and run is None:
                run = xs[i]
            if cov and run is not None:
                strips.append([run, xs[i], ys[j], ys[j + 1]])
                run = None
        if run is not None:
            strips.append([run, xs[-1], ys[j], ys[j + 1]])
    return _stack_strips(strips)


@dataclass(frozen=True)
class PanelMesh:
    """Rectangular panels, all with normal +z, tagged with their electrode."""

    centers: np.ndarray  # (N, 3)
    half_sizes: np.ndarray  # (N, 2) half-widths in x and y
    owner: np.ndarray  # (N,) index into electrode_names
    electrode_names: tuple[str, ...]
    target_edge: float
    normals: np.ndarray = field(repr=False, default=None)
    electrode_roles: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.normals is None:
            n = np.zeros_like(self.centers)
            n[:, 2] = 1.0
            object.__setattr__(self, "normals", n)

    def __len__(self) -> int:
        return len(self.centers)

    @property
    def areas(self) -> np.ndarray:
        return 4.0 * self.half_sizes[:, 0] * self.half_sizes[:, 1]

    def panels_of(self, name: str) -> np.ndarray:
        return np.flatnonzero(self.owner == self.electrode_names.index(name))

    def role_of(self, name: str) -> str:
        if self.electrode_roles is None:
            return "dc"
        return self.electrode_roles[self.electrode_names.index(name)]

    def area_of(self, name: str) -> float:
        return float(self.areas[self.panels_of(name)].sum())


def _graded_ruler(lo: float, hi: float, focus: float, fine: float, h0: float, growth: float, hmax: float):
    """Nodes covering [lo, hi], spaced h0 within ``fine`` of focus and growing
    linearly (rate ``growth``) beyond, capped at hmax. Symmetric about focus."""

    def side(extent):
        nodes = [0.0]
        t = 0.0
        while t < extent:
            h = min(hmax, h0 + growth * max(0.0, t - fine))
            t += h
            nodes.append(t)
        return np.array(nodes)

    right = focus + side(max(0.0, hi - focus))
    left = focus - side(max(0.0, focus - lo))[1:]
    return np.concatenate([left[::-1], right])


def _subdivide(a: float, b: float, ruler: np.ndarray | None, h: float) -> np.ndarray:
    if ruler is None:
        n = max(1, math.ceil((b - a) / h - 1e-9))
        return np.linspace(a, b, n + 1)
    inner = ruler[(ruler > a) & (ruler < b)]
    nodes = np.concatenate([[a], inner, [b]])
    # drop nodes that would leave slivers next to the rectangle edges
    steps = np.diff(nodes)
    if len(nodes) > 2:
        keep = np.ones(len(nodes), bool)
        local = np.interp(nodes, ruler, np.gradient(ruler)) if len(ruler) > 1 else np.full(len(nodes), h)
        if steps[0] < 0.5 * local[1]:
            keep[1] = False
        if steps[-1] < 0.5 * local[-2]:
            keep[-2] = False
        nodes = nodes[keep]
    return nodes


def _cap_steps(nodes: np.ndarray, hmax: float) -> np.ndarray:
    out = [nodes[:1]]
    for a, b in zip(nodes[:-1], nodes[1:]):
        n = max(1, math.ceil((b - a) / hmax - 1e-9))
        out.append(np.linspace(a, b, n + 1)[1:])
    return np.concatenate(out)


def discretize(
    layout: ElectrodeLayout,
    target_edge: float,
    focus: tuple[float, float] | None = None,
    growth: float = 0.0,
    max_edge: float | None = None,
    fine_radius: tuple[float, float] = (0.0, 0.0),
    fill_gaps: bool = False,
    max_aspect: float | None = None,
) -> PanelMesh:
    """Rectangular panelization of every electrode.

    With ``focus=None`` every rectangle is split uniformly into cells no
    larger than ``target_edge``. With a focus point the panel edge is
    ``target_edge`` within ``fine_radius`` (x, y) of the focus and grows by
    ``growth`` per unit distance beyond, up to ``max_edge``.

    ``fill_gaps`` adds grounded filler panels over the inter-electrode gaps
    (owner name ``"_fill"``), turning the mesh into a gapless plane.
    ``max_aspect`` splits filler cells so none is longer than that multiple
    of its width; thin gap strips otherwise produce needle panels.
    """
    if target_edge <= 0:
        raise MeshError("target_edge must be positive")
    smallest = min(layout.electrodes, key=lambda e: e.min_dimension)
    if target_edge > smallest.min_dimension * (1 + 1e-9):
        raise MeshError(
            f"target_edge {target_edge / UM:g} um exceeds the smallest electrode "
            f"dimension ({smallest.name!r}: {smallest.min_dimension / UM:g} um)"
        )
    hmax = max_edge if max_edge is not None else target_edge
    rx = ry = None
    if focus is not None:
        x1, x2, y1, y2 = layout.bounds
        rx = _graded_ruler(x1, x2, focus[0], fine_radius[0], target_edge, growth, hmax)
        ry = _graded_ruler(y1, y2, focus[1], fine_radius[1], target_edge, growth, hmax)

    groups: list[tuple[str, float, Iterable[Rect]]] = [
        (e.name, e.layer_height, e.rectangles) for e in layout.electrodes
    ]
    roles = [e.role for e in layout.electrodes]
    if fill_gaps:
        groups.append(("_fill", 0.0, gap_fillers(layout)))
        roles.append("ground_plane")
    names = tuple(g[0] for g in groups)

    centers, halves, owner = [], [], []
    for idx, (_, z, rects) in enumerate(groups):
        for x1, x2, y1, y2 in rects:
            xn = _subdivide(x1, x2, rx, target_edge)
            yn = _subdivide(y1, y2, ry, target_edge)
            if max_aspect is not None and names[idx] == "_fill":
                xn = _cap_steps(xn, max_aspect * np.diff(yn).min())
                yn = _cap_steps(yn, max_aspect * np.diff(xn).min())
            cx = 0.5 * (xn[1:] + xn[:-1])
            cy = 0.5 * (yn[1:] + yn[:-1])
            hx = 0.5 * np.diff(xn)
            hy = 0.5 * np.diff(yn)
            CX, CY = np.meshgrid(cx, cy, indexing="ij")
            HX, HY = np.meshgrid(hx, hy, indexing="ij")
            centers.append(np.column_stack([CX.ravel(), CY.ravel(), np.full(CX.size, z)]))
            halves.append(np.column_stack([HX.ravel(), HY.ravel()]))
            owner.append(np.full(CX.size, idx))
    mesh = PanelMesh(
        centers=np.concatenate(centers),
        half_sizes=np.concatenate(halves),
        owner=np.concatenate(owner),
        electrode_names=names,
        target_edge=target_edge,
        electrode_roles=tuple(roles),
    )
    logger.info("discretized %s into %d panels", layout.name, len(mesh))
    return mesh
