"""First-kind boundary-element solver with piecewise-constant rectangular panels.

Unknowns are panel charge densities divided by epsilon_0 (units V/m), so the
potential is ``sum_j sigma_j * I_j(r) / (4 pi)`` with ``I_j`` the integral of
``1/|r - r'|`` over panel j. Collocation at panel centroids.

Influence integrals use three tiers by distance ``d`` relative to the panel
edge ``e``: exact closed form (d < 2e), 2x2 Gauss (d < 6e), centroid point
charge beyond. Field evaluation off the panels drops the point-charge tier
(exact below 16e, 3x3 Gauss beyond) so that potentials stay smooth enough for
finite-difference Hessians; with 2x2 Gauss the step at the tier switch shows
up in second differences.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from .constants import EPSILON_0
from .fields import BasisField, as_points
from .geometry import PanelMesh

logger = logging.getLogger(__name__)

NEAR_EDGES = 2.0
MID_EDGES = 6.0
EVAL_NEAR_EDGES = 16.0
DENSE_LIMIT = 20_000
_FOUR_PI = 4.0 * math.pi
_GAUSS2 = np.array([-1.0, 1.0]) / math.sqrt(3.0), np.array([0.5, 0.5])
_GAUSS3 = np.array([-math.sqrt(0.6), 0.0, math.sqrt(0.6)]), np.array([5.0, 8.0, 5.0]) / 18.0


class BemSolveError(RuntimeError):
    def __init__(self, message: str, condition: float | None = None):
        super().__init__(message)
        self.condition = condition


class CoarseMeshError(BemSolveError):
    pass


@numba.njit(cache=True, inline="always")
def _log_t_plus_r(t, R, rho2):
    """log(t + R) with R = sqrt(t^2 + rho2), stable for negative t."""
    if t >= 0.0:
        return math.log(t + R)
    return math.log(rho2 / (R - t))


@numba.njit(cache=True, inline="always")
def _antideriv(u, v, za):
    """F(u, v) with d2F/dudv = 1/sqrt(u^2 + v^2 + z^2)."""
    R = math.sqrt(u * u + v * v + za * za)
    f = 0.0
    if u != 0.0:
        f += u * _log_t_plus_r(v, R, u * u + za * za)
    if v != 0.0:
        f += v * _log_t_plus_r(u, R, v * v + za * za)
    if za > 0.0:
        f -= za * math.atan(u * v / (za * R))
    return f


@numba.njit(cache=True, inline="always")
def _log_span(t1, t2, r2):
    # log(t2 + R2) - log(t1 + R1) for fixed transverse r2
    if r2 == 0.0 and t1 < 0.0 < t2:
        return math.inf
    return _log_t_plus_r(t2, math.sqrt(t2 * t2 + r2), r2) - _log_t_plus_r(t1, math.sqrt(t1 * t1 + r2), r2)


@numba.njit(cache=True)
def _rect_exact(dx1, dx2, dy1, dy2, dz, want_grad):
    za = abs(dz)
    I = _antideriv(dx2, dy2, za) - _antideriv(dx1, dy2, za) - _antideriv(dx2, dy1, za) + _antideriv(dx1, dy1, za)
    if not want_grad:
        return I, 0.0, 0.0, 0.0
    gx = _log_span(dy1, dy2, dx1 * dx1 + za * za) - _log_span(dy1, dy2, dx2 * dx2 + za * za)
    gy = _log_span(dx1, dx2, dy1 * dy1 + za * za) - _log_span(dx1, dx2, dy2 * dy2 + za * za)
    gz = 0.0
    if za > 0.0:
        solid = 0.0
        for i in range(2):
            u = dx1 if i == 0 else dx2
            for j in range(2):
                v = dy1 if j == 0 else dy2
                t = math.atan(u * v / (za * math.sqrt(u * u + v * v + za * za)))
                solid += t if (i + j) % 2 == 0 else -t
        gz = -solid if dz > 0 else solid
    return I, gx, gy, gz


def rect_integral(dx1, dx2, dy1, dy2, dz, gradient=False):
    """Exact integral of 1/r over a rectangle, as seen from a field point.

    ``dx1 = x1 - x`` etc. are the panel edges relative to the field point and
    ``dz = z_point - z_panel``. Returns I, or (I, dI/dx, dI/dy, dI/dz) for the
    derivatives with respect to the field point. Arguments broadcast.
    """
    args = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (dx1, dx2, dy1, dy2, dz)))
    out = _rect_exact_many(*(a.ravel() for a in args), gradient)
    out = [o.reshape(args[0].shape)[()] for o in out]
    return tuple(out) if gradient else out[0]


@numba.njit(cache=True)
def _rect_exact_many(dx1, dx2, dy1, dy2, dz, want_grad):
    n = dx1.shape[0]
    I = np.empty(n)
    gx = np.zeros(n)
    gy = np.zeros(n)
    gz = np.zeros(n)
    for i in range(n):
        I[i], gx[i], gy[i], gz[i] = _rect_exact(dx1[i], dx2[i], dy1[i], dy2[i], dz[i], want_grad)
    return I, gx, gy, gz


@numba.njit(cache=True)
def _panel_influence(px, py, pz, cx, cy, cz, hx, hy, near, mid, want_grad, nodes, wts):
    """I and dI/dr of one panel seen from one point, by distance tier.

    ``nodes``, ``wts`` are the 1D Gauss-Legendre rule on [-1, 1] (weights
    summing to 1) used between the exact and point-charge tiers.
    """
    dx = px - cx
    dy = py - cy
    dz = pz - cz
    r = math.sqrt(dx * dx + dy * dy + dz * dz)
    edge = 2.0 * max(hx, hy)
    if r < near * edge:
        I, gx, gy, gz = _rect_exact(cx - hx - px, cx + hx - px, cy - hy - py, cy + hy - py, dz, want_grad)
        return I, gx, gy, gz
    area = 4.0 * hx * hy
    if r >= mid * edge:
        g = -area / (r * r * r)
        return area / r, g * dx, g * dy, g * dz
    I = 0.0
    gx = 0.0
    gy = 0.0
    gz = 0.0
    for a in range(nodes.shape[0]):
        for b in range(nodes.shape[0]):
            w = area * wts[a] * wts[b]
            ex = dx - nodes[a] * hx
            ey = dy - nodes[b] * hy
            rr = math.sqrt(ex * ex + ey * ey + dz * dz)
            I += w / rr
            if want_grad:
                g = -w / (rr * rr * rr)
                gx += g * ex
                gy += g * ey
                gz += g * dz
    return I, gx, gy, gz


@numba.njit(cache=True)
def _assemble(centers, half, near, mid):
    N = centers.shape[0]
    M = np.empty((N, N))
    for i in range(N):
        for j in range(N):
            I, _, _, _ = _panel_influence(
                centers[i, 0], centers[i, 1], centers[i, 2],
                centers[j, 0], centers[j, 1], centers[j, 2],
                half[j, 0], half[j, 1], near, mid, False, _GAUSS2[0], _GAUSS2[1],
            )
            M[i, j] = I / _FOUR_PI
    return M


@numba.njit(cache=True)
def _assemble_rows(rows, centers, half, near, mid):
    out = np.empty((rows.shape[0], centers.shape[0]))
    for a in range(rows.shape[0]):
        i = rows[a]
        for j in range(centers.shape[0]):
            I, _, _, _ = _panel_influence(
                centers[i, 0], centers[i, 1], centers[i, 2],
                centers[j, 0], centers[j, 1], centers[j, 2],
                half[j, 0], half[j, 1], near, mid, False, _GAUSS2[0], _GAUSS2[1],
            )
            out[a, j] = I / _FOUR_PI
    return out


@numba.njit(cache=True)
def _apply(points, centers, half, Q, near, mid, want_grad):
    n = points.shape[0]
    k = Q.shape[1]
    phi = np.zeros((n, k))
    grad = np.zeros((n, 3, k))
    for p in range(n):
        for j in range(centers.shape[0]):
            I, gx, gy, gz = _panel_influence(
                points[p, 0], points[p, 1], points[p, 2],
                centers[j, 0], centers[j, 1], centers[j, 2],
                half[j, 0], half[j, 1], near, mid, want_grad, _GAUSS3[0], _GAUSS3[1],
            )
            for c in range(k):
                q = Q[j, c] / _FOUR_PI
                phi[p, c] += I * q
                if want_grad:
                    grad[p, 0, c] += gx * q
                    grad[p, 1, c] += gy * q
                    grad[p, 2, c] += gz * q
    return phi, grad


def assemble(mesh: PanelMesh) -> np.ndarray:
    """Dense collocation matrix; row i is the potential at centroid i."""
    return _assemble(mesh.centers, mesh.half_sizes, NEAR_EDGES, MID_EDGES)


def apply_charges(mesh: PanelMesh, charges: np.ndarray, points: np.ndarray, gradient: bool):
    """Potential (and gradient) at ``points`` from panel charge columns."""
    Q = np.ascontiguousarray(charges if charges.ndim == 2 else charges[:, None], dtype=float)
    phi, grad = _apply(np.ascontiguousarray(points, dtype=float), mesh.centers, mesh.half_sizes, Q, EVAL_NEAR_EDGES, math.inf, gradient)
    if charges.ndim == 1:
        phi = phi[:, 0]
        grad = grad[..., 0]
    return (phi, grad) if gradient else phi


@dataclass(frozen=True, eq=False)
class BemSolution:
    mesh: PanelMesh
    charges: np.ndarray  # (N, k) sigma/eps0 for each solved electrode at 1 V
    names: tuple[str, ...]
    rcond: float
    roles: tuple[str, ...]

    def basis(self, name: str) -> "BemField":
        k = self.names.index(name)
        return BemField(name, self, self.charges[:, k].copy(), self.roles[k])

    def bases(self) -> dict[str, "BemField"]:
        return {n: self.basis(n) for n in self.names if not n.startswith("_")}

    def capacitance(self, name: str) -> float:
        """Self capacitance (F) of electrode ``name`` with all others grounded."""
        k = self.names.index(name)
        idx = self.mesh.panels_of(name)
        return float(EPSILON_0 * (self.charges[idx, k] * self.mesh.areas[idx]).sum())

    def total_charge(self, name: str) -> float:
        k = self.names.index(name)
        return float(EPSILON_0 * (self.charges[:, k] * self.mesh.areas).sum())


@dataclass(frozen=True, eq=False)
class BemField(BasisField):
    name: str
    solution: BemSolution
    charges: np.ndarray
    role: str = "dc"
    method: str = "bem"

    def potential(self, points):
        p, single = as_points(points)
        phi = apply_charges(self.solution.mesh, self.charges, p, gradient=False)
        return phi[0] if single else phi

    def gradient(self, points):
        p, single = as_points(points)
        _, g = apply_charges(self.solution.mesh, self.charges, p, gradient=True)
        return g[0] if single else g

    def scaled(self, c: float) -> "BemField":
        return BemField(f"{c:g}*{self.name}", self.solution, self.charges * c, self.role)


def _check_dominance(M: np.ndarray, areas: np.ndarray):
    """Each panel must see itself more strongly than any neighbour.

    Entries are compared after the symmetric area scaling M_ij / sqrt(A_i A_j),
    so graded meshes with mixed panel sizes are judged fairly.
    """
    s = 1.0 / np.sqrt(areas)
    step = max(1, 4_000_000 // len(M))
    bad, worst_ratio = 0, 0.0
    for a in range(0, len(M), step):
        blk = np.abs(M[a : a + step]) * s[a : a + step, None] * s[None, :]
        rows = np.arange(a, min(a + step, len(M)))
        diag = blk[rows - a, rows].copy()
        blk[rows - a, rows] = 0.0
        ratio = blk.max(axis=1) / diag
        bad += int((ratio > 1.0).sum())
        worst_ratio = max(worst_ratio, float(ratio.max()))
    if bad:
        raise CoarseMeshError(
            f"{bad} panels have an off-diagonal influence larger than their self term "
            f"(worst ratio {worst_ratio:.3g}); refine the mesh"
        )


def solve_bem(
    mesh: PanelMesh,
    electrodes: Sequence[str] | None = None,
    dense_limit: int = DENSE_LIMIT,
    rcond_min: float = 1e-13,
) -> BemSolution:
    """Solve for the unit-voltage charge distribution of each listed electrode.

    Every panel not owned by the electrode being solved is held at 0 V.
    Dense LU up to ``dense_limit`` panels, Jacobi-preconditioned GMRES beyond.
    """
    names = tuple(n for n in mesh.electrode_names if not n.startswith("_")) if electrodes is None else tuple(electrodes)
    for n in names:
        if n not in mesh.electrode_names:
            raise KeyError(f"electrode {n!r} not in mesh")
    N = len(mesh)
    B = np.zeros((N, len(names)))
    for k, n in enumerate(names):
        B[mesh.panels_of(n), k] = 1.0
    roles = tuple(mesh.role_of(n) for n in names)

    if N <= dense_limit:
        M = assemble(mesh)
        _check_dominance(M, mesh.areas)
        anorm = np.abs(M).sum(axis=0).max()
        lu, piv = scipy.linalg.lu_factor(M, overwrite_a=True, check_finite=False)
        rcond, _ = scipy.linalg.lapack.dgecon(lu, anorm, norm="1")
        if not rcond > rcond_min:
            raise BemSolveError(f"panel matrix is ill-conditioned (cond ~ {1 / max(rcond, 1e-300):.3g})", 1 / max(rcond, 1e-300))
        X = scipy.linalg.lu_solve((lu, piv), B, check_finite=False)
        logger.info("BEM dense solve: %d panels, cond ~ %.3g", N, 1 / rcond)
    else:
        X = _solve_iterative(mesh, B)
        rcond = float("nan")
    return BemSolution(mesh, X, names, float(rcond), roles)


def _solve_iterative(mesh: PanelMesh, B: np.ndarray) -> np.ndarray:
    N = len(mesh)
    step = max(1, 2_000_000 // N)
    blocks = [np.arange(s, min(s + step, N)) for s in range(0, N, step)]
    diag = np.concatenate([_assemble_rows(r, mesh.centers, mesh.half_sizes, NEAR_EDGES, MID_EDGES)[np.arange(len(r)), r] for r in blocks])

    def matvec(x):
        return np.concatenate([_assemble_rows(r, mesh.centers, mesh.half_sizes, NEAR_EDGES, MID_EDGES) @ x for r in blocks])

    A = scipy.sparse.linalg.LinearOperator((N, N), matvec=matvec)
    P = scipy.sparse.linalg.LinearOperator((N, N), matvec=lambda x: x / diag)
    X = np.empty_like(B)
    for k in range(B.shape[1]):
        x, info = scipy.sparse.linalg.gmres(A, B[:, k], M=P, rtol=1e-10, restart=200, maxiter=50)
        if info != 0:
            raise BemSolveError(f"GMRES did not converge (info={info}) for column {k}")
        X[:, k] = x
    logger.info("BEM iterative solve: %d panels", N)
    return X


def solve_basis_bem(mesh: PanelMesh, electrode: str) -> BemField:
    """Basis field of one electrode (1 V there, 0 V on every other panel)."""
    return solve_bem(mesh, [electrode]).basis(electrode)
