"""Passive transport of the elastic vector potential.

The default scheme follows characteristics backwards over one step (midpoint
rule, bilinear velocity sampling) and samples the old field at the departure
points. Bilinear sampling is a convex combination, so the max norm of each
component can only decrease. A first-order upwind scheme is kept for
cross-checks.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .ops import Grid2D, check_vector

log = logging.getLogger(__name__)


class CFLError(ValueError):
    pass


@dataclass(frozen=True)
class FlowMapStep:
    """Departure points of one backward step and their sampling stencil.

    ``fi``/``fj`` are departure points in cell-index units (cell ``i`` has its
    centre at ``fi == i``); ``i0``, ``j0``, ``tx``, ``ty`` describe the bilinear
    stencil on cell centres.
    """

    grid: Grid2D
    fi: np.ndarray
    fj: np.ndarray
    i0: np.ndarray
    j0: np.ndarray
    tx: np.ndarray
    ty: np.ndarray

    @property
    def x(self) -> np.ndarray:
        return (self.fi + 0.5) * self.grid.dx

    @property
    def y(self) -> np.ndarray:
        return (self.fj + 0.5) * self.grid.dy


def _pad_noslip(c):
    p = np.pad(c, 1)
    p[0, :] = -p[1, :]
    p[-1, :] = -p[-2, :]
    p[:, 0] = -p[:, 1]
    p[:, -1] = -p[:, -2]
    return p


def sample_velocity(u, grid: Grid2D, fi, fj):
    """Bilinear velocity at index-space points, vanishing on the walls."""
    fi = np.clip(fi, -0.5, grid.nx - 0.5) + 1.0
    fj = np.clip(fj, -0.5, grid.ny - 0.5) + 1.0
    i0 = np.minimum(np.floor(fi).astype(int), grid.nx)
    j0 = np.minimum(np.floor(fj).astype(int), grid.ny)
    tx = fi - i0
    ty = fj - j0
    out = []
    for c in u:
        p = _pad_noslip(c)
        out.append((1 - tx) * (1 - ty) * p[i0, j0] + tx * (1 - ty) * p[i0 + 1, j0]
                   + (1 - tx) * ty * p[i0, j0 + 1] + tx * ty * p[i0 + 1, j0 + 1])
    return out[0], out[1]


def _stencil(fi, fj, grid: Grid2D):
    ci = np.clip(fi, 0.0, grid.nx - 1.0)
    cj = np.clip(fj, 0.0, grid.ny - 1.0)
    i0 = np.minimum(np.floor(ci).astype(int), grid.nx - 2)
    j0 = np.minimum(np.floor(cj).astype(int), grid.ny - 2)
    return i0, j0, ci - i0, cj - j0


def backtrack_points(u, grid: Grid2D, dt: float, fi, fj):
    """Midpoint-rule backward integration of dX/ds = u from index points (fi, fj)."""
    sx, sy = 1.0 / grid.dx, 1.0 / grid.dy
    ux, uy = sample_velocity(u, grid, fi, fj)
    mi = np.clip(fi - 0.5 * dt * ux * sx, -0.5, grid.nx - 0.5)
    mj = np.clip(fj - 0.5 * dt * uy * sy, -0.5, grid.ny - 0.5)
    ux, uy = sample_velocity(u, grid, mi, mj)
    di = np.clip(fi - dt * ux * sx, -0.5, grid.nx - 0.5)
    dj = np.clip(fj - dt * uy * sy, -0.5, grid.ny - 0.5)
    return di, dj


def backtrack(u, grid: Grid2D, dt: float) -> FlowMapStep:
    """Departure points X(t_n; t_n+1, x) of all cell centres."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    u = check_vector(u, grid)
    ii, jj = np.meshgrid(np.arange(grid.nx, dtype=float), np.arange(grid.ny, dtype=float), indexing="ij")
    di, dj = backtrack_points(u, grid, dt, ii, jj)
    i0, j0, tx, ty = _stencil(di, dj, grid)
    return FlowMapStep(grid, di, dj, i0, j0, tx, ty)


def interpolate(f, m: FlowMapStep) -> np.ndarray:
    i0, j0, tx, ty = m.i0, m.j0, m.tx, m.ty
    return ((1 - tx) * (1 - ty) * f[i0, j0] + tx * (1 - ty) * f[i0 + 1, j0]
            + (1 - tx) * ty * f[i0, j0 + 1] + tx * ty * f[i0 + 1, j0 + 1])


def advect_psi(psi, m: FlowMapStep) -> np.ndarray:
    """psi^{n+1}(x) = psi^n(X(x)) by bilinear sampling."""
    psi = check_vector(psi, m.grid)
    return np.stack([interpolate(c, m) for c in psi])


def advect_psi_eulerian(psi, u, grid: Grid2D, dt: float, cfl_max: float = 0.5) -> np.ndarray:
    """First-order upwind step of d_t psi + u . grad psi = 0 (zero-gradient ghosts)."""
    psi = check_vector(psi, grid)
    u = check_vector(u, grid)
    cfl = dt * max(np.abs(u[0]).max() / grid.dx, np.abs(u[1]).max() / grid.dy)
    if cfl > cfl_max:
        raise CFLError(f"CFL number {cfl:.3g} exceeds {cfl_max}")
    ux, uy = u
    out = []
    for c in psi:
        p = np.pad(c, 1, mode="edge")
        dxm = (p[1:-1, 1:-1] - p[:-2, 1:-1]) / grid.dx
        dxp = (p[2:, 1:-1] - p[1:-1, 1:-1]) / grid.dx
        dym = (p[1:-1, 1:-1] - p[1:-1, :-2]) / grid.dy
        dyp = (p[1:-1, 2:] - p[1:-1, 1:-1]) / grid.dy
        adv = (np.maximum(ux, 0) * dxm + np.minimum(ux, 0) * dxp
               + np.maximum(uy, 0) * dym + np.minimum(uy, 0) * dyp)
        out.append(c - dt * adv)
    return np.stack(out)


def flow_map_jacobian(m: FlowMapStep) -> np.ndarray:
    """Determinant of the departure-point map (1 for volume-preserving flow)."""
    dxi = np.gradient(m.fi, axis=0)
    dxj = np.gradient(m.fi, axis=1)
    dyi = np.gradient(m.fj, axis=0)
    dyj = np.gradient(m.fj, axis=1)
    return dxi * dyj - dxj * dyi
