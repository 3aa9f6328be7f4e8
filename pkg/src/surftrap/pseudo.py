"""Pseudopotential, RF null, secular frequencies, principal axes and trap depth.

Energies are in eV, positions in meters. The total effective potential is
``U = Psi + Z * Phi_DC`` with ``Psi = q^2 V^2 |grad Phi_RF|^2 / (4 m Omega^2)``.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import scipy.ndimage

from .constants import ATOMIC_MASS, ELEMENTARY_CHARGE, MHZ, TWO_PI, UM, ion_mass_u
from .fields import BasisField, as_points, combine, superpose

logger = logging.getLogger(__name__)

HESSIAN_STEP = 0.5 * UM
NULL_STEP_FLOOR = 1e-12  # m
DEGENERACY_TOL = 1e-3
MATHIEU_Q_LIMIT = 0.4
MAX_RF_AMPLITUDE = 400.0


class TrapAnalysisError(RuntimeError):
    pass


class NullNotFoundError(TrapAnalysisError):
    pass


class NotTrappingError(TrapAnalysisError):
    pass


class SaddleNotFoundError(TrapAnalysisError):
    pass


_SPECIES_RE = re.compile(r"^(\d+)([A-Z][a-z]?)(\+*)$")


@dataclass(frozen=True)
class IonSpecies:
    label: str
    mass_u: float
    charge: int = 1

    def __post_init__(self):
        if not self.mass_u > 0:
            raise ValueError("ion mass must be positive")
        if self.charge < 1:
            raise ValueError("ion charge must be >= 1")

    @classmethod
    def from_label(cls, label: str) -> "IonSpecies":
        """Parse labels such as ``"88Sr+"`` or ``"111Cd+"``."""
        m = _SPECIES_RE.match(label.strip())
        if m is None:
            raise ValueError(f"cannot parse ion species {label!r}")
        charge = max(1, len(m.group(3)))
        isotope = m.group(1) + m.group(2)
        try:
            mass = ion_mass_u(isotope, charge)
        except KeyError:
            raise ValueError(f"unknown isotope {isotope!r}") from None
        return cls(label.strip(), mass, charge)

    @property
    def mass(self) -> float:
        return self.mass_u * ATOMIC_MASS

    @property
    def q(self) -> float:
        return self.charge * ELEMENTARY_CHARGE


_DRIVE_RE = re.compile(r"^\s*([0-9.eE+-]+)\s*V\s*@\s*([0-9.eE+-]+)\s*MHz\s*$")


@dataclass(frozen=True)
class DriveConfig:
    """RF drive: zero-to-peak amplitude (V), frequency (Hz), DC offset on the rails (V)."""

    rf_amplitude: float
    rf_frequency: float
    rf_dc_offset: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.rf_amplitude <= MAX_RF_AMPLITUDE:
            raise ValueError(f"RF amplitude {self.rf_amplitude:g} V outside (0, {MAX_RF_AMPLITUDE:g}] V")
        if not self.rf_frequency > 0.0:
            raise ValueError("RF frequency must be positive")

    @property
    def omega(self) -> float:
        return TWO_PI * self.rf_frequency

    @classmethod
    def parse(cls, text: str, rf_dc_offset: float = 0.0) -> "DriveConfig":
        """Parse ``"<amp>V@<freq>MHz"``, e.g. ``"155V@40.6MHz"``."""
        m = _DRIVE_RE.match(text)
        if m is None:
            raise ValueError(f"drive must look like '155V@40.6MHz', got {text!r}")
        return cls(float(m.group(1)), float(m.group(2)) * MHZ, rf_dc_offset)

    def with_amplitude(self, volts: float) -> "DriveConfig":
        return DriveConfig(volts, self.rf_frequency, self.rf_dc_offset)

    def label(self) -> str:
        return f"{self.rf_amplitude:g}V@{self.rf_frequency / MHZ:g}MHz"


def _single_field(basis, name: str) -> BasisField | None:
    if basis is None or isinstance(basis, BasisField):
        return basis
    fields = list(basis.values()) if isinstance(basis, Mapping) else list(basis)
    if not fields:
        return None
    return fields[0] if len(fields) == 1 else combine(fields, [1.0] * len(fields), name)


class TrapPotential:
    """Total effective potential for one configuration.

    ``rf`` is the unit-voltage potential of the RF electrodes (all rails
    together). ``dc`` is the already-superposed DC potential in volts,
    including any DC offset carried by the rails.
    """

    def __init__(self, rf: BasisField, dc: BasisField | None, drive: DriveConfig, species: IonSpecies):
        self.rf = rf
        self.dc = dc
        self.drive = drive
        self.species = species
        # Psi in eV per (V/m)^2 of RF gradient
        self.psi_scale = species.charge * species.q * drive.rf_amplitude**2 / (4.0 * species.mass * drive.omega**2)

    @classmethod
    def build(cls, rf_basis, dc_basis, drive: DriveConfig, voltages: Mapping[str, float] | None, species: IonSpecies):
        rf = _single_field(rf_basis, "rf")
        v = dict(voltages or {})
        dc = None
        terms = {k: x for k, x in v.items() if x != 0.0}
        fields, coeffs = [], []
        if terms:
            f = superpose(dc_basis, terms, "dc")
            fields.append(f)
            coeffs.append(1.0)
        if drive.rf_dc_offset != 0.0:
            fields.append(rf)
            coeffs.append(drive.rf_dc_offset)
        if fields:
            dc = fields[0] if coeffs == [1.0] else combine(fields, coeffs, "dc")
        return cls(rf, dc, drive, species)

    def with_drive(self, drive: DriveConfig) -> "TrapPotential":
        return TrapPotential(self.rf, self.dc, drive, self.species)

    def pseudo(self, points):
        p, single = as_points(points)
        g = np.atleast_2d(self.rf.gradient(p))
        out = self.psi_scale * np.einsum("ij,ij->i", g, g)
        return out[0] if single else out

    def dc_energy(self, points):
        p, single = as_points(points)
        out = np.zeros(len(p)) if self.dc is None else self.species.charge * np.atleast_1d(self.dc.potential(p))
        return out[0] if single else out

    def total(self, points):
        p, single = as_points(points)
        out = self.pseudo(p) + self.dc_energy(p)
        return out[0] if single else out

    __call__ = total


def pseudopotential_at(rf_basis, drive: DriveConfig, species: IonSpecies, point):
    """Psi(r) in eV."""
    return TrapPotential(_single_field(rf_basis, "rf"), None, drive, species).pseudo(point)


def total_potential_at(rf_basis, dc_basis, drive: DriveConfig, v: Mapping[str, float], species: IonSpecies, point):
    """U(r) = Psi(r) + q Phi_DC(r) in eV."""
    return TrapPotential.build(rf_basis, dc_basis, drive, v, species).total(point)


# finite differences


def _stencil_hessian(fn: Callable, x0: np.ndarray, h: float) -> np.ndarray:
    x0 = np.asarray(x0, float)
    E = np.eye(3) * h
    pts = [x0]
    for i in range(3):
        pts += [x0 + E[i], x0 - E[i]]
    pairs = [(i, j) for i in range(3) for j in range(i + 1, 3)]
    for i, j in pairs:
        pts += [x0 + E[i] + E[j], x0 + E[i] - E[j], x0 - E[i] + E[j], x0 - E[i] - E[j]]
    f = np.asarray(fn(np.array(pts)), float)
    H = np.empty((3, 3))
    for i in range(3):
        H[i, i] = (f[1 + 2 * i] - 2 * f[0] + f[2 + 2 * i]) / h**2
    for n, (i, j) in enumerate(pairs):
        a, b, c, d = f[7 + 4 * n : 11 + 4 * n]
        H[i, j] = H[j, i] = (a - b - c + d) / (4 * h**2)
    return H


def hessian(fn: Callable, x0, h: float = HESSIAN_STEP) -> np.ndarray:
    """Central-difference Hessian with one Richardson step (h and h/2)."""
    H1 = _stencil_hessian(fn, x0, h)
    H2 = _stencil_hessian(fn, x0, 0.5 * h)
    return (4.0 * H2 - H1) / 3.0


def gradient_fd(fn: Callable, x0, h: float = 0.1 * UM) -> np.ndarray:
    x0 = np.asarray(x0, float)
    E = np.eye(3) * h
    pts = np.array([x0 + s * E[i] for i in range(3) for s in (1, -1)])
    f = np.asarray(fn(pts), float)
    return (f[0::2] - f[1::2]) / (2 * h)


def field_jacobian(field: BasisField, x0, h: float = 0.1 * UM) -> np.ndarray:
    """Hessian of a basis potential from differences of its analytic gradient."""
    x0 = np.asarray(x0, float)
    E = np.eye(3) * h
    pts = np.array([x0 + s * E[i] for i in range(3) for s in (1, -1)])
    g = np.atleast_2d(field.gradient(pts))
    J = np.column_stack([(g[2 * i] - g[2 * i + 1]) / (2 * h) for i in range(3)])
    return 0.5 * (J + J.T)


# RF null and minimum


def find_rf_null(rf, seed, tol: float = 1e-6, max_iter: int = 60, fixed_axis: int | None = 0) -> np.ndarray:
    """RF null by damped Gauss-Newton on |grad Phi_RF|^2 with backtracking.

    Linear rails give a null line rather than a point, so by default the
    trap-axis coordinate is held at its seed value and the transverse
    gradient is driven below ``tol`` times its seed value. The small axial
    gradient from the finite rail length is left alone. ``fixed_axis=None``
    frees all three coordinates.
    """
    rf = _single_field(rf, "rf")
    free = np.array([k != fixed_axis for k in range(3)])
    r = np.asarray(seed, float).copy()
    g = rf.gradient(r)
    g0 = float(np.linalg.norm(g[free]))
    if g0 == 0.0:
        return r
    for it in range(max_iter):
        gn = float(np.linalg.norm(g[free]))
        if gn < tol * g0:
            break
        J = field_jacobian(rf, r)[np.ix_(free, free)]
        step = np.zeros(3)
        step[free] = -np.linalg.lstsq(J, g[free], rcond=1e-6)[0]
        if np.linalg.norm(step) < NULL_STEP_FLOOR:
            break  # already at the null to within round-off
        t = 1.0
        while True:
            trial = r + t * step
            if trial[2] > 0.0:
                gt = rf.gradient(trial)
                if np.linalg.norm(gt[free]) < gn:
                    break
            t *= 0.5
            if t < 1e-6:
                raise NullNotFoundError(f"line search failed at iteration {it}, |grad| = {gn:.3e} V/m^2")
        r, g = trial, gt
    else:
        raise NullNotFoundError(f"no convergence in {max_iter} iterations, |grad| = {np.linalg.norm(g):.3e}")
    J = field_jacobian(rf, r)
    eig = np.linalg.eigvalsh(J)
    scale = np.abs(eig).max()
    if not (eig[0] < -1e-6 * scale and eig[-1] > 1e-6 * scale):
        raise NullNotFoundError("stationary point is not a quadrupole null (Hessian has one sign)")
    return r


def find_minimum(U: Callable, seed, tol: float = 1e-9, max_iter: int = 60, max_step: float = 20 * UM) -> np.ndarray:
    """Local minimum of U by damped Newton with finite-difference derivatives.

    ``tol`` is the step-size convergence threshold in meters.
    """
    r = np.asarray(seed, float).copy()
    u = float(U(r))
    for it in range(max_iter):
        g = gradient_fd(U, r)
        H = hessian(U, r)
        w, V = np.linalg.eigh(H)
        if w[0] > 0:
            step = -np.linalg.solve(H, g)
        else:
            # saddle-free Newton: descend along negative curvature directions
            step = -V @ ((V.T @ g) / np.abs(np.where(w == 0, 1.0, w)))
        n = np.linalg.norm(step)
        if n > max_step:
            step *= max_step / n
        t = 1.0
        while True:
            trial = r + t * step
            if trial[2] > 0:
                ut = float(U(trial))
                if ut <= u + 1e-14 * abs(u):
                    break
            t *= 0.5
            if t < 1e-4:
                break
        if t < 1e-4:
            # line search stalled; accept if already stationary to FD precision
            if np.linalg.norm(step) < 100 * tol:
                return r
            raise NotTrappingError(f"minimum search stalled at iteration {it}")
        r, u = trial, ut
        if np.linalg.norm(t * step) < tol:
            break
    else:
        raise NotTrappingError(f"minimum search did not converge in {max_iter} iterations")
    return r


# secular analysis


@dataclass
class SecularResult:
    null_position: np.ndarray
    minimum: np.ndarray
    frequencies: np.ndarray  # Hz, order (x', y', z)
    axes: np.ndarray  # columns are the x', y', z principal directions
    axis_rotation_deg: float  # tilt of the radial axes about the trap axis
    in_plane_rotation_deg: float  # axial direction about the chip normal
    labels: tuple[str, str, str] = ("x'", "y'", "z")
    degenerate: bool = False
    trap_depth_ev: float | None = None
    escape_point: np.ndarray | None = None
    pseudo_depth_ev: float | None = None
    mathieu_q: np.ndarray | None = None
    mathieu_a: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    @property
    def frequencies_mhz(self) -> np.ndarray:
        return self.frequencies / MHZ

    @property
    def ion_height(self) -> float:
        return float(self.minimum[2])

    def to_dict(self) -> dict:
        def um(v):
            return None if v is None else [round(float(x) / UM, 6) for x in v]

        def f(x, nd=9):
            return None if x is None else float(f"{float(x):.{nd}g}")

        d = {
            "null_position_um": um(self.null_position),
            "minimum_um": um(self.minimum),
            "ion_height_um": f(self.minimum[2] / UM),
            "frequencies_mhz": {lab: f(w / MHZ) for lab, w in zip(self.labels, self.frequencies)},
            "principal_axes": [[f(x) for x in self.axes[:, k]] for k in range(3)],
            "axis_rotation_deg": f(self.axis_rotation_deg),
            "in_plane_rotation_deg": f(self.in_plane_rotation_deg),
            "radial_degenerate": self.degenerate,
            "trap_depth_ev": f(self.trap_depth_ev),
            "escape_point_um": um(self.escape_point),
            "pseudo_depth_ev": f(self.pseudo_depth_ev),
            "mathieu_q": None if self.mathieu_q is None else [f(x) for x in self.mathieu_q],
            "mathieu_a": None if self.mathieu_a is None else [f(x) for x in self.mathieu_a],
        }
        if self.mathieu_q is not None:
            d["mathieu_valid"] = bool(np.all(np.abs(self.mathieu_q) < MATHIEU_Q_LIMIT))
        for k, v in sorted(self.extras.items()):
            d[k] = v
        return d


def _fold(angle: float, period: float) -> float:
    """Map an angle (deg) into (-period/2, period/2]."""
    a = math.fmod(angle, period)
    if a <= -period / 2:
        a += period
    elif a > period / 2:
        a -= period
    return a


def _radial_tilt(v: np.ndarray) -> float:
    """Angle (deg) of a radial eigenvector from the transverse y axis, about x."""
    return _fold(math.degrees(math.atan2(v[2], v[1])), 180.0)


def secular_analysis(U: Callable, minimum, species: IonSpecies, h: float = HESSIAN_STEP) -> SecularResult:
    """Frequencies and principal axes from the Hessian of U (eV) at ``minimum``.

    The axial mode is the eigenvector with the largest trap-axis component.
    The two radial modes are ordered by frequency, or by |tilt| when they are
    degenerate to within ``DEGENERACY_TOL``.
    """
    r0 = np.asarray(minimum, float)
    H = hessian(U, r0, h) * ELEMENTARY_CHARGE  # J/m^2
    asym = np.abs(H - H.T).max()
    H = 0.5 * (H + H.T)
    w, V = np.linalg.eigh(H)
    if w[0] <= 0:
        raise NotTrappingError(f"Hessian not positive definite at {r0 / UM} um (eigenvalues {w})")
    ax = int(np.argmax(np.abs(V[0])))
    radial = [k for k in range(3) if k != ax]
    omegas = np.sqrt(w / species.mass)
    radial.sort(key=lambda k: omegas[k])
    wr = omegas[radial]
    degenerate = abs(wr[1] - wr[0]) / wr.mean() < DEGENERACY_TOL
    if degenerate:
        radial.sort(key=lambda k: abs(_radial_tilt(V[:, k])))
    order = radial + [ax]
    axes = V[:, order].copy()
    # sign convention: axial along +x, x' with +y component, right-handed
    if axes[0, 2] < 0:
        axes[:, 2] *= -1
    if axes[1, 0] < 0 or (axes[1, 0] == 0 and axes[2, 0] < 0):
        axes[:, 0] *= -1
    axes[:, 1] = np.cross(axes[:, 2], axes[:, 0])
    tilt = _fold(_radial_tilt(axes[:, 0]), 90.0)
    in_plane = _fold(math.degrees(math.atan2(axes[1, 2], axes[0, 2])), 180.0)
    res = SecularResult(
        null_position=r0,
        minimum=r0,
        frequencies=omegas[order] / TWO_PI,
        axes=axes,
        axis_rotation_deg=tilt,
        in_plane_rotation_deg=in_plane,
        degenerate=bool(degenerate),
    )
    res.extras["hessian_asymmetry"] = float(f"{asym / np.abs(H).max():.3g}")
    return res


# trap depth


def _saddle_refine(U: Callable, x0, free: np.ndarray, max_iter: int = 40, max_step: float = 5 * UM):
    """Newton on grad U = 0 in the free coordinates; returns point and eigenvalues."""
    r = np.asarray(x0, float).copy()
    idx = np.flatnonzero(free)
    for _ in range(max_iter):
        g = gradient_fd(U, r)[idx]
        H = hessian(U, r)[np.ix_(idx, idx)]
        step = -np.linalg.lstsq(H, g, rcond=1e-10)[0]
        n = np.linalg.norm(step)
        if n > max_step:
            step *= max_step / n
        r[idx] += step
        if r[2] <= 0:
            raise SaddleNotFoundError("saddle refinement left the upper half-space")
        if n < 1e-9:
            break
    else:
        raise SaddleNotFoundError("saddle refinement did not converge")
    H = hessian(U, r)[np.ix_(idx, idx)]
    return r, np.linalg.eigvalsh(H)


def default_depth_box(minimum, rail_spacing: float, zone_length: float = 1e-3):
    m = np.asarray(minimum, float)
    return (
        (m[0] - zone_length, m[0] + zone_length),
        (m[1] - 2 * rail_spacing, m[1] + 2 * rail_spacing),
        (0.3 * m[2], 4.0 * m[2]),
    )


def trap_depth(
    U: Callable,
    minimum,
    box,
    resolution=(11, 41, 61),
    expand: bool = True,
    iterations: int = 60,
):
    """Lowest escape barrier U(saddle) - U(minimum) and the saddle location.

    The barrier level is bracketed on a coarse grid by flood-filling the
    sublevel set that contains the minimum until it reaches the box boundary,
    then the saddle is refined by Newton's method and must have exactly one
    negative curvature. Axes given with a single grid point are held fixed
    (a 2D transverse depth, for example).
    """
    m = np.asarray(minimum, float)
    box = [tuple(map(float, b)) for b in box]
    resolution = tuple(int(n) for n in resolution)
    free = np.array([n > 1 for n in resolution])
    axes = [np.linspace(lo, hi, n) if n > 1 else np.array([m[i]]) for i, ((lo, hi), n) in enumerate(zip(box, resolution))]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
    vals = np.asarray(U(pts), float).reshape(X.shape)
    u_min = float(U(m))
    seed = tuple(int(np.argmin(np.abs(a - m[i]))) for i, a in enumerate(axes))
    boundary = np.zeros(X.shape, bool)
    for d in range(3):
        if resolution[d] > 1:
            sl = [slice(None)] * 3
            sl[d] = 0
            boundary[tuple(sl)] = True
            sl[d] = -1
            boundary[tuple(sl)] = True
    structure = scipy.ndimage.generate_binary_structure(3, 1)

    def component(level):
        mask = vals < level
        mask[seed] = True
        lab, _ = scipy.ndimage.label(mask, structure)
        return lab == lab[seed]

    lo = max(u_min, float(vals[seed]))
    hi = float(vals.max()) + 1e-12
    if not component(hi)[boundary].any():
        raise SaddleNotFoundError("basin does not reach the box boundary")
    if component(lo + 1e-15)[boundary].any():
        raise SaddleNotFoundError("minimum is on the box boundary")
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if component(mid)[boundary].any():
            hi = mid
        else:
            lo = mid
    comp = component(hi)
    cand = np.where(comp, vals, -np.inf)
    k = np.unravel_index(int(np.argmax(cand)), vals.shape)
    on_edge = bool(boundary[k])
    if on_edge:
        if expand:
            c = m
            new_box = [(ci - 2 * (ci - lo_), ci + 2 * (hi_ - ci)) if free[i] else (lo_, hi_) for i, (ci, (lo_, hi_)) in enumerate(zip(c, box))]
            new_box[2] = (box[2][0], c[2] + 2 * (box[2][1] - c[2]))
            logger.info("escape point on the box edge, expanding the search box once")
            return trap_depth(U, m, new_box, resolution, expand=False, iterations=iterations)
        raise SaddleNotFoundError("lowest escape point lies on the search-box boundary")
    x_grid = np.array([axes[0][k[0]], axes[1][k[1]], axes[2][k[2]]])
    saddle, eig = _saddle_refine(U, x_grid, free)
    n_neg = int((eig < 0).sum())
    if n_neg != 1:
        raise SaddleNotFoundError(f"refined stationary point has {n_neg} negative curvatures, expected 1")
    depth = float(U(saddle)) - u_min
    if depth < 0:
        raise SaddleNotFoundError("saddle lies below the minimum")
    return depth, saddle


# Mathieu parameters


def mathieu_parameters(rf: BasisField, dc: BasisField | None, drive: DriveConfig, species: IonSpecies, result: SecularResult):
    """(q_i, a_i) along the principal axes of ``result``.

    q_i = 2 q V |kappa_i| / (m Omega^2) from the RF Hessian at the null;
    a_i = 4 q kappa_DC,i / (m Omega^2) from the DC Hessian at the minimum.
    """
    rf = _single_field(rf, "rf")
    H_rf = field_jacobian(rf, result.null_position)
    kappa = np.einsum("ik,ij,jk->k", result.axes, H_rf, result.axes)
    c = species.q / (species.mass * drive.omega**2)
    q = 2.0 * c * drive.rf_amplitude * np.abs(kappa)
    if dc is None:
        a = np.zeros(3)
    else:
        H_dc = field_jacobian(dc, result.minimum)
        a = 4.0 * c * np.einsum("ik,ij,jk->k", result.axes, H_dc, result.axes)
    return q, a


def mathieu_valid(q) -> bool:
    return bool(np.all(np.abs(q) < MATHIEU_Q_LIMIT))


# end-to-end


def rail_midline(layout) -> float:
    ys = [layout.electrode_center(n)[1] for n in layout.rf_names]
    return float(np.mean(ys))


def characterize(
    rf_basis,
    dc_basis,
    drive: DriveConfig,
    voltages: Mapping[str, float] | None,
    species: IonSpecies,
    seed,
    rail_spacing: float,
    depth: bool = True,
    depth_resolution=(11, 41, 61),
    zone_length: float = 1e-3,
) -> SecularResult:
    """Null, minimum, secular frequencies, axes, depths and Mathieu parameters."""
    pot = TrapPotential.build(rf_basis, dc_basis, drive, voltages, species)
    null = find_rf_null(pot.rf, seed)
    minimum = find_minimum(pot.total, null)
    res = secular_analysis(pot.total, minimum, species)
    res.null_position = null
    q, a = mathieu_parameters(pot.rf, pot.dc, drive, species, res)
    res.mathieu_q, res.mathieu_a = q, a
    if depth:
        box = default_depth_box(minimum, rail_spacing, zone_length)
        res.trap_depth_ev, res.escape_point = trap_depth(pot.total, minimum, box, depth_resolution)
        radial_box = (box[0], box[1], box[2])
        psi = TrapPotential(pot.rf, None, drive, species)
        res.pseudo_depth_ev, _ = trap_depth(psi.total, null, radial_box, (1, depth_resolution[1], depth_resolution[2]))
    return res
