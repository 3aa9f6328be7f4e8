"""Unit-voltage basis potentials, superposition and grid sampling.

A basis field Phi_i(r) is the potential (V per applied V) produced when
electrode i is held at 1 V and every other conductor at 0 V. Anything linear
in the electrode voltages is a weighted sum of these.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numba
import numpy as np

from .geometry import ElectrodeLayout, LayoutError

logger = logging.getLogger(__name__)

DC_LIMIT_V = 15.0
RF_ALIAS = "RF"


class MissingBasisError(KeyError):
    pass


class FieldDomainError(ValueError):
    pass


def as_points(points) -> tuple[np.ndarray, bool]:
    p = np.asarray(points, dtype=float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    if p.shape[-1] != 3:
        raise ValueError(f"points must have 3 coordinates, got shape {p.shape}")
    return p, single


@numba.njit(cache=True, error_model="numpy")
def _rect_eval(points, rects, weights, want_phi, want_grad):
    n = points.shape[0]
    phi = np.zeros(n)
    grad = np.zeros((n, 3))
    inv2pi = 1.0 / (2.0 * math.pi)
    for p in range(n):
        x = points[p, 0]
        y = points[p, 1]
        z = points[p, 2]
        z2 = z * z
        for r in range(rects.shape[0]):
            w = weights[r] * inv2pi
            for j in range(2):
                a = x - rects[r, j]
                a2z = a * a + z2
                for k in range(2):
                    b = y - rects[r, 2 + k]
                    b2z = b * b + z2
                    sgn = w if (j + k) % 2 == 0 else -w
                    R = math.sqrt(a * a + b * b + z2)
                    if want_phi:
                        phi[p] += sgn * math.atan(a * b / (z * R))
                    if want_grad:
                        grad[p, 0] += sgn * b * z / (R * a2z)
                        grad[p, 1] += sgn * a * z / (R * b2z)
                        grad[p, 2] -= sgn * a * b * (R * R + z2) / (R * a2z * b2z)
    return phi, grad


class BasisField:
    """Potential of one electrode (or a fixed linear combination) per volt."""

    name: str
    method: str
    role: str = "dc"

    def potential(self, points):
        raise NotImplementedError

    def gradient(self, points):
        raise NotImplementedError

    def scaled(self, c: float) -> "BasisField":
        return SumField(f"{c:g}*{self.name}", [self], [c])


def _check_upper(p: np.ndarray):
    if np.any(p[:, 2] <= 0.0):
        raise FieldDomainError("field points must lie above the electrode plane (z > 0)")


@dataclass(frozen=True, eq=False)
class AnalyticField(BasisField):
    """Gapless-plane closed form: rectangles in an infinite grounded plane."""

    name: str
    rects: np.ndarray  # (k, 4) x1, x2, y1, y2
    weights: np.ndarray  # (k,)
    role: str = "dc"
    method: str = "analytic_planar"

    def potential(self, points):
        p, single = as_points(points)
        _check_upper(p)
        phi, _ = _rect_eval(p, self.rects, self.weights, True, False)
        return phi[0] if single else phi

    def gradient(self, points):
        p, single = as_points(points)
        _check_upper(p)
        _, g = _rect_eval(p, self.rects, self.weights, False, True)
        return g[0] if single else g

    def evaluate(self, points):
        p, _ = as_points(points)
        return _rect_eval(p, self.rects, self.weights, True, True)

    def scaled(self, c: float) -> "AnalyticField":
        return AnalyticField(f"{c:g}*{self.name}", self.rects, self.weights * c, self.role)


@dataclass(frozen=True, eq=False)
class SumField(BasisField):
    name: str
    parts: Sequence[BasisField]
    coeffs: Sequence[float]
    role: str = "dc"
    method: str = "sum"

    def potential(self, points):
        return sum(c * f.potential(points) for f, c in zip(self.parts, self.coeffs))

    def gradient(self, points):
        return sum(c * f.gradient(points) for f, c in zip(self.parts, self.coeffs))


def rectangle_field(x1, x2, y1, y2, name="rect") -> AnalyticField:
    return AnalyticField(name, np.array([[x1, x2, y1, y2]], float), np.ones(1))


def analytic_basis_planar(layout: ElectrodeLayout, electrode: str) -> AnalyticField:
    """Closed-form basis field of one electrode, projected onto z = 0."""
    try:
        el = layout[electrode]
    except KeyError:
        raise MissingBasisError(f"layout has no electrode {electrode!r}") from None
    rects = np.array(el.rectangles, dtype=float)
    if rects.size == 0:
        raise LayoutError(f"electrode {electrode!r} has no rectangle decomposition", [electrode])
    return AnalyticField(electrode, rects, np.ones(len(rects)), el.role)


def analytic_bases(layout: ElectrodeLayout, names: Iterable[str] | None = None) -> dict[str, AnalyticField]:
    names = layout.names if names is None else names
    return {n: analytic_basis_planar(layout, n) for n in names}


def combine(fields: Sequence[BasisField], coeffs: Sequence[float], name: str = "combined") -> BasisField:
    """Single field equal to sum(c_i * Phi_i), merged where the method allows."""
    fields = list(fields)
    coeffs = [float(c) for c in coeffs]
    if fields and all(isinstance(f, AnalyticField) for f in fields):
        rects = np.concatenate([f.rects for f in fields])
        weights = np.concatenate([f.weights * c for f, c in zip(fields, coeffs)])
        return AnalyticField(name, rects, weights, fields[0].role)
    from .bem import BemField  # local import, bem depends on this module

    if fields and all(isinstance(f, BemField) for f in fields):
        sol = fields[0].solution
        if all(f.solution is sol for f in fields):
            q = sum(c * f.charges for f, c in zip(fields, coeffs))
            return BemField(name, sol, q, fields[0].role)
    return SumField(name, fields, coeffs)


class VoltageSet(Mapping[str, float]):
    """Electrode voltages; unnamed electrodes are grounded.

    The key ``"RF"`` is accepted as an alias for every rf-role electrode and is
    interpreted as a DC offset on the rails ("RF plus 2.34 V DC"). DC values
    must lie within ``limit`` volts.
    """

    def __init__(self, values: Mapping[str, float], limit: float = DC_LIMIT_V):
        vals = {str(k): float(v) for k, v in values.items()}
        for k, v in vals.items():
            if not math.isfinite(v):
                raise ValueError(f"voltage on {k!r} is not finite")
            if abs(v) > limit + 1e-12:
                raise ValueError(f"voltage {v:g} V on {k!r} outside +/-{limit:g} V")
        self._values = dict(sorted(vals.items()))
        self.limit = limit

    def __getitem__(self, k):
        return self._values[k]

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def __repr__(self):
        return f"VoltageSet({self._values})"

    def __eq__(self, other):
        return isinstance(other, Mapping) and dict(self) == dict(other)

    def resolved(self, layout: ElectrodeLayout) -> dict[str, float]:
        """Full electrode -> volts map for ``layout`` with the RF alias expanded."""
        out = {n: 0.0 for n in layout.names}
        for k, v in self._values.items():
            if k == RF_ALIAS and RF_ALIAS not in layout:
                for n in layout.rf_names:
                    out[n] = v
            elif k in out:
                out[k] = v
            else:
                raise LayoutError(f"voltage given for unknown electrode {k!r}", [k])
        return out

    def nonzero(self) -> dict[str, float]:
        return {k: v for k, v in self._values.items() if v != 0.0}


def _basis_map(basis) -> dict[str, BasisField]:
    if isinstance(basis, Mapping):
        return dict(basis)
    return {f.name: f for f in basis}


def _expand(basis: dict[str, BasisField], v: Mapping[str, float]) -> tuple[list[BasisField], list[float]]:
    fields, coeffs = [], []
    for k, volts in v.items():
        if volts == 0.0:
            continue
        if k in basis:
            fields.append(basis[k])
            coeffs.append(volts)
        elif k == RF_ALIAS:
            rf = [f for f in basis.values() if f.role == "rf"]
            if not rf:
                raise MissingBasisError("no basis field for the RF electrodes")
            fields.extend(rf)
            coeffs.extend([volts] * len(rf))
        else:
            raise MissingBasisError(f"no basis field for electrode {k!r}")
    return fields, coeffs


def superpose(basis, v: Mapping[str, float], name: str = "dc") -> BasisField | None:
    fields, coeffs = _expand(_basis_map(basis), v)
    if not fields:
        return None
    return combine(fields, coeffs, name)


def potential_at(basis, v: Mapping[str, float], point):
    """sum_i v_i Phi_i(r) in volts."""
    p, single = as_points(point)
    f = superpose(basis, v)
    out = np.zeros(len(p)) if f is None else np.asarray(f.potential(p), float)
    return out[0] if single else out


def field_at(basis, v: Mapping[str, float], point):
    """E = -sum_i v_i grad Phi_i(r) in V/m."""
    p, single = as_points(point)
    f = superpose(basis, v)
    out = np.zeros((len(p), 3)) if f is None else -np.asarray(f.gradient(p), float)
    return out[0] if single else out


FIELDMAP_HEADER = ["x_um", "y_um", "z_um", "phi_V", "Ex_Vpm", "Ey_Vpm", "Ez_Vpm"]


def grid_points(box, resolution) -> np.ndarray:
    """Grid points with x varying fastest, then y, then z."""
    axes = []
    for (lo, hi), n in zip(box, resolution):
        n = int(n)
        if n < 1:
            raise ValueError("resolution entries must be >= 1")
        axes.append(np.array([0.5 * (lo + hi)]) if n == 1 else np.linspace(lo, hi, n))
    Z, Y, X = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    return np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])


def sample_grid(basis, v: Mapping[str, float], box, resolution, out=None, max_points: int = 2_000_000) -> str:
    """Write the FieldMap CSV for ``box = ((x1,x2),(y1,y2),(z1,z2))`` meters.

    Returns the CSV text; also writes it to ``out`` (path or file) if given.
    """
    n_total = int(np.prod([int(n) for n in resolution]))
    if n_total > max_points:
        raise MemoryError(f"grid of {n_total} points exceeds the cap of {max_points}")
    if min(box[2]) <= 0.0:
        raise FieldDomainError("sample box reaches z <= 0 (below the conductor plane)")
    pts = grid_points(box, resolution)
    phi = np.atleast_1d(potential_at(basis, v, pts))
    E = np.atleast_2d(field_at(basis, v, pts))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIELDMAP_HEADER)
    um = pts / 1e-6
    for i in range(len(pts)):
        w.writerow([f"{val:.8e}" for val in (*um[i], phi[i], *E[i])])
    text = buf.getvalue()
    if out is not None:
        if hasattr(out, "write"):
            out.write(text)
        else:
            with open(out, "w", newline="") as fh:
                fh.write(text)
    return text


def stacked_gradients(fields: Sequence[BasisField], points) -> np.ndarray:
    """Gradients of several basis fields at once, shape (n_points, 3, n_fields).

    BEM fields sharing one solution are evaluated in a single panel sweep.
    """
    from .bem import BemField, apply_charges

    p, _ = as_points(points)
    out = np.empty((len(p), 3, len(fields)))
    groups: dict[int, list[int]] = {}
    for k, f in enumerate(fields):
        if isinstance(f, BemField):
            groups.setdefault(id(f.solution), []).append(k)
        else:
            out[:, :, k] = np.atleast_2d(f.gradient(p))
    for ks in groups.values():
        sol = fields[ks[0]].solution
        Q = np.column_stack([fields[k].charges for k in ks])
        _, g = apply_charges(sol.mesh, Q, p, gradient=True)
        out[:, :, ks] = g
    return out
