"""Inverse problems on the DC electrode voltages.

Stray-field compensation, axial well placement, shuttling waveforms, the
beam-projection check on principal axes and a micromotion proxy.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import lsq_linear

from .constants import TWO_PI, UM
from .fields import DC_LIMIT_V, BasisField, VoltageSet, as_points, stacked_gradients
from .pseudo import (
    DriveConfig,
    IonSpecies,
    SecularResult,
    TrapPotential,
    find_minimum,
    find_rf_null,
    secular_analysis,
)

logger = logging.getLogger(__name__)

STRAY_FIELD_LIMIT = 1e6  # V/m
TILT_THRESHOLD = 0.05

# solve_well row weights, rows normalized to the ion height; the first two act
# as near-hard constraints, the radial rows only break ties
W_GRADIENT = 1e4
W_AXIAL = 1e3
W_CROSS = 1e2
W_RADIAL = 10.0


class ControlError(RuntimeError):
    pass


class RankDeficientError(ControlError):
    def __init__(self, message: str, null_direction: np.ndarray):
        super().__init__(message)
        self.null_direction = null_direction


class InfeasibleError(ControlError):
    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best


class VerificationError(ControlError):
    pass


@dataclass(frozen=True)
class StrayField:
    """Uniform stray field (V/m), optional gradient (V/m^2), provenance tag."""

    E: tuple[float, float, float]
    gradient: tuple | None = None
    provenance: str = "assumed"

    def __post_init__(self):
        e = np.asarray(self.E, float)
        if e.shape != (3,) or not np.all(np.isfinite(e)):
            raise ValueError("stray field must be a finite 3-vector")
        if np.linalg.norm(e) > STRAY_FIELD_LIMIT:
            raise ValueError(f"stray field {np.linalg.norm(e):.3g} V/m exceeds {STRAY_FIELD_LIMIT:g} V/m")
        if self.gradient is not None and not np.all(np.isfinite(np.asarray(self.gradient, float))):
            raise ValueError("stray-field gradient must be finite")
        if self.provenance not in ("assumed", "measured"):
            raise ValueError("provenance must be 'assumed' or 'measured'")

    @property
    def vector(self) -> np.ndarray:
        return np.asarray(self.E, float)

    def scaled(self, c: float) -> "StrayField":
        g = None if self.gradient is None else tuple(np.asarray(self.gradient, float) * c)
        return StrayField(tuple(self.vector * c), g, self.provenance)


def _bounds_for(names: Sequence[str], bounds) -> tuple[np.ndarray, np.ndarray]:
    if bounds is None:
        b = np.full(len(names), DC_LIMIT_V)
    elif isinstance(bounds, Mapping):
        b = np.array([float(bounds.get(n, DC_LIMIT_V)) for n in names])
    else:
        b = np.full(len(names), float(bounds))
    return -b, b


def _bounded_lsq(A: np.ndarray, b: np.ndarray, lo: np.ndarray, hi: np.ndarray, ridge: float) -> np.ndarray:
    """Box-constrained least squares (BVLS active set) with a small ridge term
    that selects the smallest-norm solution among near-minimizers."""
    n = A.shape[1]
    Aa = np.vstack([A, math.sqrt(ridge) * np.eye(n)])
    ba = np.concatenate([b, np.zeros(n)])
    res = lsq_linear(Aa, ba, bounds=(lo, hi), method="bvls", tol=1e-14, max_iter=2000)
    return np.clip(res.x, lo, hi)


# compensation


@dataclass
class CompensationResult:
    deltas: VoltageSet
    residual: np.ndarray  # V/m
    active_bounds: tuple[str, ...]
    feasible: bool

    @property
    def residual_norm(self) -> float:
        return float(np.linalg.norm(self.residual))


def compensate_stray_field(
    dc_basis: Mapping[str, BasisField],
    stray: StrayField,
    r0,
    bounds=None,
    rel_tol: float = 1e-6,
    strict: bool = False,
) -> CompensationResult:
    """DC voltage deltas that cancel a uniform stray field at ``r0``.

    Minimizes |E_stray + sum_i dv_i E_i(r0)| with E_i the field of electrode i
    at 1 V. The minimum-norm least-squares solution is used when it respects
    the bounds; otherwise a bounded solve. With ``strict`` an infeasible case
    raises InfeasibleError carrying the best result.
    """
    names = list(dc_basis)
    r0 = np.asarray(r0, float)
    G = -stacked_gradients([dc_basis[n] for n in names], r0[None, :])[0]  # (3, k) V/m per V
    lo, hi = _bounds_for(names, bounds)
    free = hi > 0
    if free.sum() < 3:
        raise RankDeficientError("fewer than 3 controllable electrodes", np.full(3, np.nan))
    U, s, _ = np.linalg.svd(G[:, free])
    rank = int((s > s[0] * 1e-9).sum()) if s.size else 0
    if rank < 3:
        raise RankDeficientError(
            f"electrode fields at r0 span only {rank} dimensions",
            U[:, rank],
        )
    e = stray.vector
    v = np.zeros(len(names))
    v[free] = np.linalg.pinv(G[:, free], rcond=1e-12) @ (-e)
    if np.any(v < lo - 1e-12) or np.any(v > hi + 1e-12):
        scale = float(np.abs(G[:, free]).max())
        v = np.zeros(len(names))
        v[free] = _bounded_lsq(G[:, free] / scale, -e / scale, lo[free], hi[free], 1e-12)
    v = np.clip(v, lo, hi)
    residual = e + G @ v
    active = tuple(n for n, x, a, b in zip(names, v, lo, hi) if b > 0 and (x <= a or x >= b))
    feasible = bool(np.linalg.norm(residual) <= rel_tol * max(np.linalg.norm(e), 1e-300) or np.linalg.norm(e) == 0)
    res = CompensationResult(VoltageSet(dict(zip(names, v)), limit=float(hi.max(initial=DC_LIMIT_V))), residual, active, feasible)
    if strict and not feasible:
        raise InfeasibleError(
            f"stray field not cancellable within bounds: residual {res.residual_norm:.3g} V/m, active {list(active)}",
            res,
        )
    return res


# beam projections


@dataclass
class TiltReport:
    labels: tuple[str, ...]
    projections: np.ndarray  # max |axis . k| over beams, per mode
    flagged: tuple[str, ...]
    threshold: float

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "projections": {lab: float(f"{p:.9g}") for lab, p in zip(self.labels, self.projections)},
            "flagged": list(self.flagged),
        }


def axis_tilt_check(secular: SecularResult, beam_directions, threshold: float = TILT_THRESHOLD) -> TiltReport:
    """Largest projection of each principal axis onto the cooling beams."""
    axes = np.asarray(secular.axes, float)
    if not np.allclose(axes.T @ axes, np.eye(3), atol=1e-8):
        raise ValueError("principal axes are not orthonormal")
    k = np.atleast_2d(np.asarray(beam_directions, float))
    k = k / np.linalg.norm(k, axis=1, keepdims=True)
    proj = np.abs(k @ axes).max(axis=0)
    flagged = tuple(lab for lab, p in zip(secular.labels, proj) if p < threshold)
    return TiltReport(tuple(secular.labels), proj, flagged, threshold)


# well placement


@dataclass
class WellSolution:
    voltages: VoltageSet
    target_x: float
    target_frequency: float
    null_position: np.ndarray
    secular: SecularResult | None
    residual: float

    def to_dict(self) -> dict:
        d = {
            "target_x_um": float(f"{self.target_x / UM:.9g}"),
            "target_axial_mhz": float(f"{self.target_frequency / 1e6:.9g}"),
            "voltages": {k: float(f"{v:.9g}") for k, v in self.voltages.items()},
            "residual": float(f"{self.residual:.3g}"),
        }
        if self.secular is not None:
            d["secular"] = self.secular.to_dict()
        return d


def _hessians(fields: Sequence[BasisField], r0: np.ndarray, h: float = 0.1 * UM) -> np.ndarray:
    """Per-field Hessians at r0 from differenced gradients, shape (k, 3, 3)."""
    E = np.eye(3) * h
    pts = np.array([r0 + s * E[i] for i in range(3) for s in (1, -1)])
    g = stacked_gradients(fields, pts)  # (6, 3, k)
    H = np.empty((len(fields), 3, 3))
    for i in range(3):
        H[:, :, i] = ((g[2 * i] - g[2 * i + 1]) / (2 * h)).T
    return 0.5 * (H + H.transpose(0, 2, 1))


def solve_well(
    dc_basis: Mapping[str, BasisField],
    rf_basis,
    drive: DriveConfig,
    species: IonSpecies,
    target_x: float,
    target_frequency: float,
    bounds=None,
    seed=None,
    span: tuple[float, float] | None = None,
    radial_split: float = 0.0,
    tilt_deg: float = 0.0,
    verify: bool = True,
    ridge: float = 1e-10,
) -> WellSolution:
    """DC voltages placing an axial well of ``target_frequency`` (Hz) at ``target_x``.

    At the RF null r0 above ``target_x`` the DC potential must have zero
    gradient, axial curvature m w_z^2 / q and no axial-radial cross terms.
    The radial DC curvature difference is softly steered to ``radial_split``
    (V/m^2) rotated by ``tilt_deg`` about the trap axis. Solved as bounded
    least squares; verified by a full secular analysis unless ``verify`` is off.
    """
    if span is not None and not span[0] <= target_x <= span[1]:
        raise InfeasibleError(f"target x = {target_x / UM:.1f} um outside the electrode span {np.array(span) / UM} um")
    names = list(dc_basis)
    fields = [dc_basis[n] for n in names]
    seed = np.array([target_x, 0.0, 50 * UM]) if seed is None else np.array(seed, float)
    seed[0] = target_x
    pot0 = TrapPotential.build(rf_basis, None, drive, None, species)
    r0 = find_rf_null(pot0.rf, seed)
    scale = r0[2]  # ion height as the length scale for conditioning
    g = stacked_gradients(fields, r0[None, :])[0]  # (3, k)
    H = _hessians(fields, r0)
    kz = species.mass * (TWO_PI * target_frequency) ** 2 / species.q  # V/m^2
    c2, s2 = math.cos(math.radians(2 * tilt_deg)), math.sin(math.radians(2 * tilt_deg))
    rows, rhs, w = [], [], []
    for i in range(3):
        rows.append(g[i] * scale)
        rhs.append(0.0)
        w.append(W_GRADIENT)
    rows.append(H[:, 0, 0] * scale**2)
    rhs.append(kz * scale**2)
    w.append(W_AXIAL)
    for i, j in ((0, 1), (0, 2)):
        rows.append(H[:, i, j] * scale**2)
        rhs.append(0.0)
        w.append(W_CROSS)
    rows.append((H[:, 1, 1] - H[:, 2, 2]) * scale**2)
    rhs.append(radial_split * c2 * scale**2)
    w.append(W_RADIAL)
    rows.append(2 * H[:, 1, 2] * scale**2)
    rhs.append(radial_split * s2 * scale**2)
    w.append(W_RADIAL)
    A = np.array(rows) * np.array(w)[:, None]
    b = np.array(rhs) * np.array(w)
    norm = float(np.abs(A).max())
    lo, hi = _bounds_for(names, bounds)
    v = _bounded_lsq(A / norm, b / norm, lo, hi, ridge)
    achieved = float(H[:, 0, 0] @ v)
    residual = float(np.linalg.norm(A @ v - b) / max(abs(b[3]), 1e-300))
    if achieved < 0.9 * kz:
        raise InfeasibleError(
            f"axial curvature {achieved:.3g} V/m^2 reaches only {achieved / kz:.1%} of the {kz:.3g} V/m^2 target within bounds"
        )
    vs = VoltageSet(dict(zip(names, v)), limit=float(hi.max()))
    sec = None
    if verify:
        sec = verify_well(dc_basis, rf_basis, drive, species, vs, r0, target_frequency)
    return WellSolution(vs, target_x, target_frequency, r0, sec, residual)


def verify_well(dc_basis, rf_basis, drive, species, voltages, r0, target_frequency, pos_tol=1 * UM, freq_tol=0.10) -> SecularResult:
    pot = TrapPotential.build(rf_basis, dc_basis, drive, voltages, species)
    minimum = find_minimum(pot.total, r0)
    sec = secular_analysis(pot.total, minimum, species)
    sec.null_position = np.asarray(r0, float)
    err = float(np.linalg.norm(minimum - r0))
    ferr = abs(sec.frequencies[2] - target_frequency) / target_frequency
    if err > pos_tol or ferr > freq_tol:
        raise VerificationError(
            f"well check failed: minimum {err / UM:.3f} um from target, axial {sec.frequencies[2] / 1e6:.4f} MHz "
            f"vs {target_frequency / 1e6:.4f} MHz"
        )
    return sec


# shuttling


def minimum_jerk(s: np.ndarray) -> np.ndarray:
    """10 s^3 - 15 s^4 + 6 s^5 on [0, 1]."""
    s = np.asarray(s, float)
    return s**3 * (10.0 - 15.0 * s + 6.0 * s * s)


@dataclass
class Waveform:
    names: tuple[str, ...]
    frames: list[VoltageSet]
    frame_period: float
    positions: np.ndarray  # scheduled x per frame
    path: str = ""
    secular: list[SecularResult] = field(default_factory=list)

    def __post_init__(self):
        for k, f in enumerate(self.frames):
            for n, v in f.items():
                if abs(v) > DC_LIMIT_V:
                    raise ValueError(f"frame {k}: {n} = {v:g} V outside +/-{DC_LIMIT_V:g} V")

    def __len__(self):
        return len(self.frames)

    def matrix(self) -> np.ndarray:
        return np.array([[f.get(n, 0.0) for n in self.names] for f in self.frames])

    def max_step(self) -> float:
        m = self.matrix()
        return float(np.abs(np.diff(m, axis=0)).max()) if len(m) > 1 else 0.0

    def to_csv(self, out=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["frame", "time_s", *self.names])
        for k, row in enumerate(self.matrix()):
            w.writerow([k, f"{k * self.frame_period:.8e}", *(f"{v:.8e}" for v in row)])
        text = buf.getvalue()
        if out is not None:
            if hasattr(out, "write"):
                out.write(text)
            else:
                with open(out, "w", newline="") as fh:
                    fh.write(text)
        return text

    @classmethod
    def from_csv(cls, text: str) -> "Waveform":
        rows = list(csv.reader(io.StringIO(text)))
        header = rows[0]
        if header[:2] != ["frame", "time_s"]:
            raise ValueError("waveform CSV must start with 'frame,time_s'")
        names = tuple(header[2:])
        frames = [VoltageSet(dict(zip(names, map(float, r[2:])))) for r in rows[1:]]
        times = [float(r[1]) for r in rows[1:]]
        period = times[1] - times[0] if len(times) > 1 else 0.0
        return cls(names, frames, period, np.full(len(frames), np.nan))


def shuttle_waveform(
    dc_basis: Mapping[str, BasisField],
    rf_basis,
    drive: DriveConfig,
    species: IonSpecies,
    x_start: float,
    x_end: float,
    n_frames: int,
    target_frequency: float,
    duration: float = 100e-6,
    bounds=None,
    seed=None,
    span=None,
    max_slew: float | None = None,
    verify: bool = True,
) -> Waveform:
    """Frame-by-frame ``solve_well`` along a minimum-jerk position schedule."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    s = np.linspace(0.0, 1.0, n_frames) if n_frames > 1 else np.zeros(1)
    xs = x_start + (x_end - x_start) * minimum_jerk(s)
    frames, secs = [], []
    cache: dict[float, WellSolution] = {}
    for k, x in enumerate(xs):
        key = float(x)
        try:
            sol = cache.get(key) or solve_well(
                dc_basis, rf_basis, drive, species, x, target_frequency, bounds, seed, span, verify=verify
            )
        except ControlError as exc:
            raise InfeasibleError(f"frame {k} at x = {x / UM:.2f} um: {exc}") from exc
        cache[key] = sol
        frames.append(sol.voltages)
        if sol.secular is not None:
            secs.append(sol.secular)
    period = duration / (n_frames - 1) if n_frames > 1 else 0.0
    wf = Waveform(tuple(dc_basis), frames, period, xs, f"{x_start / UM:.1f}um->{x_end / UM:.1f}um", secs)
    if max_slew is not None and wf.max_step() > max_slew:
        raise InfeasibleError(f"per-frame voltage step {wf.max_step():.3g} V exceeds the slew bound {max_slew:g} V")
    return wf


# micromotion


@dataclass
class MicromotionResult:
    displacement: np.ndarray  # m, lab frame
    amplitude: np.ndarray  # m, excess micromotion amplitude vector, lab frame
    modulation_index: np.ndarray  # per beam

    def to_dict(self) -> dict:
        return {
            "displacement_um": [float(f"{x / UM:.9g}") for x in self.displacement],
            "amplitude_um": [float(f"{x / UM:.9g}") for x in self.amplitude],
            "modulation_index": [float(f"{x:.9g}") for x in self.modulation_index],
        }


def micromotion_amplitude(
    rf_basis,
    drive: DriveConfig,
    species: IonSpecies,
    stray: StrayField,
    secular: SecularResult,
    wavevectors=(),
) -> MicromotionResult:
    """Static displacement from a stray field and the resulting RF micromotion.

    Along each principal axis the displacement is q E_k / (m w_k^2); the
    excess micromotion amplitude is q_k * dr_k / 2. ``wavevectors`` are beam
    k-vectors in 1/m; the modulation index is |k . amplitude|.
    """
    axes = np.asarray(secular.axes, float)
    omega = TWO_PI * np.asarray(secular.frequencies, float)
    e_p = axes.T @ stray.vector
    dr_p = species.q * e_p / (species.mass * omega**2)
    if secular.mathieu_q is None:
        from .pseudo import mathieu_parameters, _single_field

        q, _ = mathieu_parameters(_single_field(rf_basis, "rf"), None, drive, species, secular)
    else:
        q = np.asarray(secular.mathieu_q, float)
    amp_p = q * dr_p / 2.0
    k = np.atleast_2d(np.asarray(wavevectors, float)) if len(wavevectors) else np.zeros((0, 3))
    amp = axes @ amp_p
    return MicromotionResult(axes @ dr_p, amp, np.abs(k @ amp))
