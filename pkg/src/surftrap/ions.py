"""Ion-chain statics and time-dependent single-ion dynamics.

Chains are treated in the harmonic axial approximation and in the
dimensionless length unit l, with l**3 = q**2 / (4 pi eps0 m w_z**2). In
those units the energy is sum(u_i**2 / 2) + sum_{i<j} 1/|u_i - u_j| and mode
frequencies come out in units of w_z, independent of species.

The trajectory integrator solves m r'' = -q grad(Phi_dc) - q V cos(W t)
grad(Phi_rf) with a fixed-step 8th order Runge-Kutta (Dormand-Prince 8(5,3)
tableau, used without its error estimator).
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping

import numba
import numpy as np
from scipy.integrate._ivp import dop853_coefficients as _dop

from .constants import ELEMENTARY_CHARGE, EPSILON_0, TWO_PI, UM
from .fields import AnalyticField, BasisField
from .pseudo import DriveConfig, IonSpecies, TrapPotential

logger = logging.getLogger(__name__)

STEPS_PER_RF_PERIOD = 100
MAX_RF_STEP_FRACTION = 1.0 / 50.0
TRAJECTORY_HEADER = ["t_s", "x_um", "y_um", "z_um", "vx", "vy", "vz"]

_A = np.ascontiguousarray(_dop.A[: _dop.N_STAGES, : _dop.N_STAGES])
_B = np.ascontiguousarray(_dop.B)
_C = np.ascontiguousarray(_dop.C[: _dop.N_STAGES])


class ChainError(RuntimeError):
    pass


class ZigzagInstability(ChainError):
    """Radial confinement too weak for a linear chain.

    Attributes carry the offending ratio ``beta = w_r / w_z``, the smallest
    radial Hessian eigenvalue and the critical ratio below which the linear
    chain buckles.
    """

    def __init__(self, n_ions: int, beta: float, min_eigenvalue: float, critical_beta: float):
        super().__init__(
            f"linear {n_ions}-ion chain unstable: w_r/w_z = {beta:.6g} below critical {critical_beta:.6g} "
            f"(min eigenvalue {min_eigenvalue:.3g})"
        )
        self.n_ions = n_ions
        self.beta = beta
        self.min_eigenvalue = min_eigenvalue
        self.critical_beta = critical_beta


def length_scale(omega_z: float, species: IonSpecies) -> float:
    """l = (q^2 / (4 pi eps0 m w_z^2))^(1/3) in m."""
    return (species.q**2 / (4.0 * math.pi * EPSILON_0 * species.mass * omega_z**2)) ** (1.0 / 3.0)


def _coulomb_terms(u: np.ndarray):
    d = u[:, None] - u[None, :]
    np.fill_diagonal(d, np.inf)
    inv2 = np.sign(d) / d**2
    inv3 = 1.0 / np.abs(d) ** 3
    return inv2, inv3


def _chain_gradient(u: np.ndarray) -> np.ndarray:
    inv2, _ = _coulomb_terms(u)
    return u - inv2.sum(axis=1)


def axial_hessian(u: np.ndarray) -> np.ndarray:
    """Dimensionless axial Hessian, A_ii = 1 + 2 sum 1/d^3, A_ij = -2/d^3."""
    _, inv3 = _coulomb_terms(u)
    A = -2.0 * inv3
    np.fill_diagonal(A, 1.0 + 2.0 * inv3.sum(axis=1))
    return A


def radial_hessian(u: np.ndarray, beta: float) -> np.ndarray:
    """Dimensionless radial Hessian, B_ii = beta^2 - sum 1/d^3, B_ij = 1/d^3."""
    _, inv3 = _coulomb_terms(u)
    B = inv3.copy()
    np.fill_diagonal(B, beta**2 - inv3.sum(axis=1))
    return B


@dataclass(frozen=True)
class IonChain:
    species: IonSpecies
    omega_z: float
    scaled: np.ndarray  # positions in units of l, sorted
    length_unit: float
    residual: float

    @property
    def n_ions(self) -> int:
        return len(self.scaled)

    @property
    def positions(self) -> np.ndarray:
        return self.scaled * self.length_unit

    @property
    def spacings(self) -> np.ndarray:
        return np.diff(self.positions)


def equilibrium_positions(n: int, omega_z: float, species: IonSpecies, tol: float = 1e-14, max_iter: int = 200) -> IonChain:
    """Linear-chain equilibrium by damped Newton from equally spaced seeds."""
    if n < 1:
        raise ValueError("need at least one ion")
    if not omega_z > 0:
        raise ValueError("axial frequency must be positive")
    u = np.linspace(-1.0, 1.0, n) * (0.5 * n ** (2.0 / 3.0) if n > 1 else 0.0)
    g = _chain_gradient(u)
    for _ in range(max_iter):
        if np.max(np.abs(g)) < tol:
            break
        step = np.linalg.solve(axial_hessian(u), -g)
        t = 1.0
        while t > 1e-6:
            trial = u + t * step
            if np.all(np.diff(trial) > 0):
                gt = _chain_gradient(trial)
                if np.linalg.norm(gt) < np.linalg.norm(g) or t < 1e-3:
                    break
            t *= 0.5
        u, g = trial, _chain_gradient(trial)
    res = float(np.max(np.abs(g))) if n > 1 else 0.0
    if res > 1e3 * tol:
        raise ChainError(f"chain equilibrium for n={n} did not converge (residual {res:.3g})")
    u = 0.5 * (u - u[::-1])  # enforce x -> -x symmetry
    return IonChain(species, float(omega_z), u, length_scale(omega_z, species), res)


@dataclass(frozen=True)
class ModeSet:
    frequencies: np.ndarray  # units of w_z, ascending
    vectors: np.ndarray  # columns, orthonormal
    omega_z: float

    @property
    def frequencies_hz(self) -> np.ndarray:
        return self.frequencies * self.omega_z / TWO_PI


def _modes(H: np.ndarray, omega_z: float) -> ModeSet:
    w, V = np.linalg.eigh(H)
    for k in range(V.shape[1]):
        j = np.argmax(np.abs(V[:, k]) > 1e-12)
        if V[j, k] < 0:
            V[:, k] = -V[:, k]
    return ModeSet(np.sqrt(w), V, omega_z)


def normal_modes(chain: IonChain) -> ModeSet:
    H = axial_hessian(chain.scaled) if chain.n_ions > 1 else np.ones((1, 1))
    if np.linalg.eigvalsh(H)[0] <= 0:
        raise ChainError("axial Hessian not positive definite; chain is not at an equilibrium")
    return _modes(H, chain.omega_z)


def _critical_beta(u: np.ndarray) -> float:
    lo, hi = 0.0, 1.0
    while np.linalg.eigvalsh(radial_hessian(u, hi))[0] <= 0:
        hi *= 2.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if np.linalg.eigvalsh(radial_hessian(u, mid))[0] <= 0:
            lo = mid
        else:
            hi = mid
    return hi


def radial_modes(chain: IonChain, radial_frequencies) -> list[ModeSet]:
    """Transverse mode spectra, one per radial trap frequency (in Hz).

    Raises ZigzagInstability when the linear chain is not a minimum.
    """
    out = []
    for f in np.atleast_1d(np.asarray(radial_frequencies, float)):
        beta = TWO_PI * f / chain.omega_z
        B = radial_hessian(chain.scaled, beta) if chain.n_ions > 1 else np.full((1, 1), beta**2)
        lam = np.linalg.eigvalsh(B)[0]
        if lam <= 0:
            crit = _critical_beta(chain.scaled) if chain.n_ions > 1 else 0.0
            raise ZigzagInstability(chain.n_ions, beta, float(lam), crit)
        out.append(_modes(B, chain.omega_z))
    return out


def mode_gaps(chain: IonChain, radial_frequencies) -> np.ndarray:
    """Gap between the lowest radial mode and the highest axial mode, in Hz."""
    top = normal_modes(chain).frequencies_hz[-1]
    return np.array([m.frequencies_hz[0] - top for m in radial_modes(chain, radial_frequencies)])


# ---------------------------------------------------------------- dynamics


@numba.njit(cache=True)
def _rect_gradient(x, y, z, rects, weights, out):
    z2 = z * z
    inv2pi = 1.0 / (2.0 * math.pi)
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
                out[0] += sgn * b * z / (R * a2z)
                out[1] += sgn * a * z / (R * b2z)
                out[2] -= sgn * a * b * (R * R + z2) / (R * a2z * b2z)


@numba.njit(cache=True)
def _deriv(t, s, dc_rects, dc_w, rf_rects, rf_w, amp, omega, qm, out):
    gd = np.zeros(3)
    gr = np.zeros(3)
    _rect_gradient(s[0], s[1], s[2], dc_rects, dc_w, gd)
    _rect_gradient(s[0], s[1], s[2], rf_rects, rf_w, gr)
    c = amp * math.cos(omega * t)
    for i in range(3):
        out[i] = s[3 + i]
        out[3 + i] = -qm * (gd[i] + c * gr[i])


@numba.njit(cache=True)
def _integrate_analytic(s0, t0, dt, n_steps, dc_rects, dc_w, rf_rects, rf_w, amp, omega, qm, lo, hi, A, B, C):
    ns = B.shape[0]
    traj = np.empty((n_steps + 1, 6))
    traj[0] = s0
    K = np.empty((ns, 6))
    tmp = np.empty(6)
    s = s0.copy()
    last = n_steps
    for n in range(n_steps):
        t = t0 + n * dt
        for i in range(ns):
            for m in range(6):
                acc = s[m]
                for j in range(i):
                    acc += dt * A[i, j] * K[j, m]
                tmp[m] = acc
            _deriv(t + C[i] * dt, tmp, dc_rects, dc_w, rf_rects, rf_w, amp, omega, qm, K[i])
        for m in range(6):
            acc = 0.0
            for i in range(ns):
                acc += B[i] * K[i, m]
            s[m] += dt * acc
        traj[n + 1] = s
        out = False
        for m in range(3):
            if s[m] < lo[m] or s[m] > hi[m] or not math.isfinite(s[m]):
                out = True
        if out:
            last = n + 1
            break
    return traj[: last + 1]


def _integrate_generic(deriv, s0, t0, dt, n_steps, lo, hi):
    ns = len(_B)
    traj = np.empty((n_steps + 1, 6))
    traj[0] = s0
    K = np.empty((ns, 6))
    s = np.array(s0, float)
    for n in range(n_steps):
        t = t0 + n * dt
        for i in range(ns):
            K[i] = deriv(t + _C[i] * dt, s + dt * (_A[i, :i] @ K[:i]))
        s = s + dt * (_B @ K)
        traj[n + 1] = s
        if np.any(s[:3] < lo) or np.any(s[:3] > hi) or not np.all(np.isfinite(s)):
            return traj[: n + 2]
    return traj


@dataclass
class Trajectory:
    t: np.ndarray
    position: np.ndarray  # (N, 3) m
    velocity: np.ndarray  # (N, 3) m/s
    step: float
    method: str
    escaped: bool
    rf_period: float
    diagnostics: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.t)

    def to_csv(self, out=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRAJECTORY_HEADER)
        for t, r, v in zip(self.t, self.position, self.velocity):
            w.writerow(["%.8e" % t] + ["%.8e" % (c / UM) for c in r] + ["%.8e" % c for c in v])
        text = buf.getvalue()
        if out is not None:
            with open(out, "w", newline="") as fh:
                fh.write(text)
        return text

    def period_averages(self) -> tuple[np.ndarray, np.ndarray]:
        """Position and velocity averaged over whole RF periods."""
        k = int(round(self.rf_period / self.step))
        m = (len(self.t) - 1) // k
        if m < 1:
            raise ValueError("trajectory shorter than one RF period")
        r = self.position[1 : m * k + 1].reshape(m, k, 3).mean(axis=1)
        v = self.velocity[1 : m * k + 1].reshape(m, k, 3).mean(axis=1)
        return r, v


def _analytic_parts(f: BasisField | None):
    if f is None:
        return np.zeros((0, 4)), np.zeros(0)
    if isinstance(f, AnalyticField):
        return np.ascontiguousarray(f.rects, float), np.ascontiguousarray(f.weights, float)
    return None


def integrate_trajectory(
    rf_basis,
    dc_basis,
    drive: DriveConfig,
    voltages: Mapping[str, float] | None,
    species: IonSpecies,
    r0,
    v0=(0.0, 0.0, 0.0),
    duration: float = 10e-6,
    step: float | None = None,
    box=None,
    t0: float = 0.0,
) -> Trajectory:
    """Integrate the full RF + DC equation of motion for one ion.

    Parameters
    ----------
    r0, v0 : array_like
        Initial position (m) and velocity (m/s).
    step : float, optional
        Fixed time step; defaults to one hundredth of an RF period and may not
        exceed one fiftieth.
    box : (lo, hi), optional
        Bounding box in m; leaving it stops the integration and sets
        ``escaped``. Defaults to 500 um around ``r0`` clipped above z = 0.
    """
    pot = TrapPotential.build(rf_basis, dc_basis, drive, voltages, species)
    period = TWO_PI / drive.omega
    dt = period / STEPS_PER_RF_PERIOD if step is None else float(step)
    if dt > period * MAX_RF_STEP_FRACTION * (1 + 1e-12):
        raise ValueError(f"step {dt:.3g} s exceeds 1/50 of the RF period")
    n_steps = int(round(duration / dt))
    r0 = np.asarray(r0, float)
    if box is None:
        lo = r0 - 500 * UM
        hi = r0 + 500 * UM
        lo[2] = max(lo[2], 1 * UM)
    else:
        lo, hi = (np.asarray(b, float) for b in box)
    s0 = np.concatenate([r0, np.asarray(v0, float)])
    qm = species.q / species.mass
    dc_parts, rf_parts = _analytic_parts(pot.dc), _analytic_parts(pot.rf)
    if dc_parts is not None and rf_parts is not None:
        method = "dop853-fixed/numba"
        traj = _integrate_analytic(
            s0, t0, dt, n_steps, *dc_parts, *rf_parts, drive.rf_amplitude, drive.omega, qm, lo, hi, _A, _B, _C
        )
    else:
        logger.info("non-analytic fields: integrating %d steps in the generic loop", n_steps)
        method = "dop853-fixed"

        def deriv(t, s):
            g = np.asarray(pot.rf.gradient(s[:3])) * (drive.rf_amplitude * math.cos(drive.omega * t))
            if pot.dc is not None:
                g = g + np.asarray(pot.dc.gradient(s[:3]))
            return np.concatenate([s[3:], -qm * g])

        traj = _integrate_generic(deriv, s0, t0, dt, n_steps, lo, hi)
    escaped = len(traj) < n_steps + 1
    if escaped:
        logger.warning("ion left the bounding box after %.3g s", (len(traj) - 1) * dt)
    t = t0 + dt * np.arange(len(traj))
    out = Trajectory(t, traj[:, :3].copy(), traj[:, 3:].copy(), dt, method, escaped, period)
    if not escaped and n_steps >= 2 * STEPS_PER_RF_PERIOD:
        out.diagnostics = secular_energy_drift(out, pot)
    return out


def secular_energy_drift(traj: Trajectory, pot: TrapPotential) -> dict:
    """Drift of the RF-period-averaged energy proxy.

    The proxy is 0.5 m <v>^2 + U_eff(<r>) per RF period, with U_eff the
    pseudopotential plus DC energy. Drift is the least-squares slope over the
    run per 1000 RF periods, relative to the mean proxy energy above U_eff at
    the orbit centre.
    """
    r, v = traj.period_averages()
    m = pot.species.mass
    e = 0.5 * m * np.einsum("ij,ij->i", v, v) / ELEMENTARY_CHARGE + np.asarray(pot.total(r))
    e = e - float(pot.total(r.mean(axis=0)))
    scale = max(abs(float(np.mean(e))), 1e-300)
    slope = np.polyfit(np.arange(len(e)), e, 1)[0] if len(e) > 2 else 0.0
    return {
        "energy_mean_ev": float(np.mean(e)),
        "drift_per_1000_periods": float(slope * 1000.0 / scale),
        "periods": int(len(e)),
    }


def spectrum(signal, dt: float):
    """One-sided Hann-windowed amplitude spectrum of a real series."""
    x = np.asarray(signal, float)
    x = x - x.mean()
    w = np.hanning(len(x))
    amp = np.abs(np.fft.rfft(x * w)) * 2.0 / w.sum()
    f = np.fft.rfftfreq(len(x), dt)
    return f, amp


def _interp_peak(f: np.ndarray, amp: np.ndarray, i: int) -> tuple[float, float]:
    if i <= 0 or i >= len(amp) - 1:
        return float(f[i]), float(amp[i])
    la, lb, lc = np.log(np.maximum(amp[i - 1 : i + 2], 1e-300))
    denom = la - 2 * lb + lc
    p = 0.5 * (la - lc) / denom if denom != 0 else 0.0
    df = f[1] - f[0]
    return float(f[i] + p * df), float(np.exp(lb - 0.25 * (la - lc) * p))


def peak_frequency(signal, dt: float, fmin: float = 0.0, fmax: float = np.inf) -> tuple[float, float]:
    """Strongest spectral line in [fmin, fmax] with sub-bin interpolation.

    Returns (frequency in Hz, amplitude). The peak is refined by a parabola
    through the log-magnitude of the three bins around the maximum.
    """
    f, amp = spectrum(signal, dt)
    sel = np.flatnonzero((f >= fmin) & (f <= fmax))
    if sel.size == 0:
        raise ValueError("no spectral bins in the requested band")
    i = sel[np.argmax(amp[sel])]
    return _interp_peak(f, amp, i)


def mode_frequencies_from_trajectory(traj: Trajectory, axes: np.ndarray, predicted_hz, rel_window: float = 0.3) -> np.ndarray:
    """Spectral peak of the motion projected on each principal axis.

    Searches within +/- ``rel_window`` of each predicted frequency.
    """
    d = (traj.position - traj.position.mean(axis=0)) @ np.asarray(axes)
    out = []
    for k, f0 in enumerate(predicted_hz):
        out.append(peak_frequency(d[:, k], traj.step, f0 * (1 - rel_window), f0 * (1 + rel_window))[0])
    return np.array(out)


def sideband_ratio(traj: Trajectory, axis: np.ndarray, secular_hz: float, rf_hz: float, rel_window: float = 0.05) -> float:
    """(sum of the two RF sideband amplitudes) / carrier amplitude.

    For a Mathieu oscillator at lowest order this ratio equals q/2.
    """
    s = (traj.position - traj.position.mean(axis=0)) @ np.asarray(axis)
    _, carrier = peak_frequency(s, traj.step, secular_hz * (1 - rel_window), secular_hz * (1 + rel_window))
    side = 0.0
    for fc in (rf_hz - secular_hz, rf_hz + secular_hz):
        side += peak_frequency(s, traj.step, fc - rel_window * secular_hz, fc + rel_window * secular_hz)[1]
    return side / carrier
