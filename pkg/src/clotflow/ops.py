"""Finite-difference operators on a uniform cell-centred rectangular grid.

Scalar fields are arrays of shape ``(nx, ny)`` indexed ``[i, j]`` with ``i``
along x; vector fields have shape ``(2, nx, ny)``. Every operator is a sparse
matrix acting on the C-order flattening, assembled once per grid.

Ghost conventions (one ghost cell per side):

* ``mirror``      f[-1] = f[0]            homogeneous Neumann (phi, mu, pressure)
* ``antimirror``  f[-1] = -f[0]           no-slip velocity (zero at the wall)
* ``extrap``      f[-1] = 2 f[0] - f[1]   boundary-free fields (elastic potential)

With these choices the central gradient (mirror) and central divergence
(antimirror) are exact negative adjoints of each other.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

CG_RTOL = 1e-10


class GridMismatchError(ValueError):
    pass


class LinearSolverError(RuntimeError):
    """Elliptic solve failed to converge or returned an inaccurate solution."""


class IncompatibleRHSError(ValueError):
    pass


@dataclass(frozen=True)
class Grid2D:
    nx: int
    ny: int
    lx: float = 1.0
    ly: float = 1.0

    def __post_init__(self):
        if self.nx < 8 or self.ny < 8:
            raise ValueError("grid needs at least 8 cells per direction")
        if not (self.lx > 0 and self.ly > 0):
            raise ValueError("domain extents must be positive")

    @property
    def dx(self) -> float:
        return self.lx / self.nx

    @property
    def dy(self) -> float:
        return self.ly / self.ny

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    @property
    def hmin(self) -> float:
        return min(self.dx, self.dy)

    @property
    def x(self) -> np.ndarray:
        return (np.arange(self.nx) + 0.5) * self.dx

    @property
    def y(self) -> np.ndarray:
        return (np.arange(self.ny) + 0.5) * self.dy

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.x, self.y, indexing="ij")


def check_scalar(f, grid: Grid2D) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.shape != grid.shape:
        raise GridMismatchError(f"scalar field shape {f.shape} does not match grid {grid.shape}")
    return f


def check_vector(v, grid: Grid2D) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (2,) + grid.shape:
        raise GridMismatchError(f"vector field shape {v.shape} does not match grid (2, {grid.nx}, {grid.ny})")
    return v


def inner(a, b, grid: Grid2D) -> float:
    """Discrete L2 inner product (midpoint rule)."""
    return float(np.sum(a * b) * grid.cell_area)


def l2norm(a, grid: Grid2D) -> float:
    return float(np.sqrt(np.sum(a * a) * grid.cell_area))


# ---------------------------------------------------------------------------
# 1D stencils
# ---------------------------------------------------------------------------

_GHOST = {"mirror": (1.0, 0.0), "antimirror": (-1.0, 0.0), "extrap": (2.0, -1.0)}


def central_1d(n: int, h: float, ghost: str) -> sp.csr_matrix:
    """(f[i+1] - f[i-1]) / 2h with the given ghost rule at both ends."""
    a, b = _GHOST[ghost]
    m = sp.lil_matrix((n, n))
    for i in range(1, n - 1):
        m[i, i + 1] = 1.0
        m[i, i - 1] = -1.0
    # left: f[-1] = a f[0] + b f[1]
    m[0, 1] += 1.0 - b
    m[0, 0] += -a
    # right: f[n] = a f[n-1] + b f[n-2]
    m[n - 1, n - 1] += a
    m[n - 1, n - 2] += b - 1.0
    return (m / (2.0 * h)).tocsr()


def laplace_1d(n: int, h: float, ghost: str) -> sp.csr_matrix:
    a, _ = _GHOST[ghost]
    main = np.full(n, -2.0)
    main[0] += a
    main[-1] += a
    off = np.ones(n - 1)
    return (sp.diags([off, main, off], [-1, 0, 1]) / (h * h)).tocsr()


def face_diff_neumann_1d(n: int, h: float) -> sp.csr_matrix:
    """Differences on the n-1 interior faces; wall fluxes vanish."""
    return (sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n)) / h).tocsr()


def face_diff_noslip_1d(n: int, h: float) -> tuple[sp.csr_matrix, np.ndarray]:
    """Differences on all n+1 faces with antimirror ghosts; wall faces carry weight 1/2."""
    m = sp.lil_matrix((n + 1, n))
    m[0, 0] = 2.0
    for k in range(1, n):
        m[k, k - 1] = -1.0
        m[k, k] = 1.0
    m[n, n - 1] = -2.0
    w = np.ones(n + 1)
    w[0] = w[-1] = 0.5
    return (m / h).tocsr(), w


def face_avg_noslip_1d(n: int) -> sp.csr_matrix:
    """Face averages with antimirror ghosts (wall values are exactly zero)."""
    m = sp.lil_matrix((n + 1, n))
    for k in range(1, n):
        m[k, k - 1] = 0.5
        m[k, k] = 0.5
    return m.tocsr()


def face_avg_mirror_1d(n: int) -> sp.csr_matrix:
    m = sp.lil_matrix((n + 1, n))
    m[0, 0] = 1.0
    for k in range(1, n):
        m[k, k - 1] = 0.5
        m[k, k] = 0.5
    m[n, n - 1] = 1.0
    return m.tocsr()


# ---------------------------------------------------------------------------
# 2D operator bundle
# ---------------------------------------------------------------------------

class Operators:
    """Sparse operators for one grid; obtain through :func:`operators`."""

    def __init__(self, grid: Grid2D):
        self.grid = grid
        nx, ny, dx, dy = grid.nx, grid.ny, grid.dx, grid.dy
        self._ix = sp.identity(nx, format="csr")
        self._iy = sp.identity(ny, format="csr")
        X = lambda m: sp.kron(m, self._iy, format="csr")  # noqa: E731
        Y = lambda m: sp.kron(self._ix, m, format="csr")  # noqa: E731
        self.X, self.Y = X, Y

        self.gx_n = X(central_1d(nx, dx, "mirror"))
        self.gy_n = Y(central_1d(ny, dy, "mirror"))
        self.gx_d = X(central_1d(nx, dx, "antimirror"))
        self.gy_d = Y(central_1d(ny, dy, "antimirror"))
        self.gx_e = X(central_1d(nx, dx, "extrap"))
        self.gy_e = Y(central_1d(ny, dy, "extrap"))
        self.lap_n = (X(laplace_1d(nx, dx, "mirror")) + Y(laplace_1d(ny, dy, "mirror"))).tocsr()
        self.lap_d = (X(laplace_1d(nx, dx, "antimirror")) + Y(laplace_1d(ny, dy, "antimirror"))).tocsr()
        self.fx_n = X(face_diff_neumann_1d(nx, dx))
        self.fy_n = Y(face_diff_neumann_1d(ny, dy))
        # wide-stencil pressure Laplacian div(grad .), symmetric negative semidefinite
        self.poisson = (self.gx_d @ self.gx_n + self.gy_d @ self.gy_n).tocsr()
        self.identity = sp.identity(grid.size, format="csr")
        self._factors: dict = {}

    # -- strain-rate machinery (faces for normal strain, corners for shear) --
    @cached_property
    def strain(self):
        g = self.grid
        dxm, wx = face_diff_noslip_1d(g.nx, g.dx)
        dym, wy = face_diff_noslip_1d(g.ny, g.dy)
        ax = face_avg_noslip_1d(g.nx)
        ay = face_avg_noslip_1d(g.ny)
        sxx = sp.kron(dxm, self._iy, format="csr")          # d u_x / dx on x-faces
        syy = sp.kron(self._ix, dym, format="csr")          # d u_y / dy on y-faces
        dyux = sp.kron(ax, dym, format="csr")               # d u_x / dy at corners
        dxuy = sp.kron(dxm, ay, format="csr")               # d u_y / dx at corners
        w_xf = np.kron(wx, np.ones(g.ny))
        w_yf = np.kron(np.ones(g.nx), wy)
        w_c = np.kron(wx, wy)
        # cell -> face/corner averages of a scalar coefficient (mirror ghosts)
        mx = face_avg_mirror_1d(g.nx)
        my = face_avg_mirror_1d(g.ny)
        avg_xf = sp.kron(mx, self._iy, format="csr")
        avg_yf = sp.kron(self._ix, my, format="csr")
        avg_c = sp.kron(mx, my, format="csr")
        return dict(sxx=sxx, syy=syy, dyux=dyux, dxuy=dxuy, w_xf=w_xf, w_yf=w_yf, w_c=w_c,
                    avg_xf=avg_xf, avg_yf=avg_yf, avg_c=avg_c)

    def strain_components(self, v):
        """(S_xx on x-faces, S_yy on y-faces, S_xy on corners) of a velocity field."""
        s = self.strain
        ux, uy = v[0].ravel(), v[1].ravel()
        return s["sxx"] @ ux, s["syy"] @ uy, 0.5 * (s["dyux"] @ ux + s["dxuy"] @ uy)

    def viscous_matrix(self, nu_cells) -> sp.csr_matrix:
        """Sparse matrix of -div(nu D u) acting on the stacked velocity [u_x; u_y].

        Assembled as S^T W nu S, hence symmetric positive semidefinite.
        """
        s = self.strain
        nu = np.asarray(nu_cells, dtype=float).ravel()
        n_xf = s["w_xf"] * (s["avg_xf"] @ nu)
        n_yf = s["w_yf"] * (s["avg_yf"] @ nu)
        n_c = 2.0 * s["w_c"] * (s["avg_c"] @ nu)
        N = self.grid.size
        zx = sp.csr_matrix((s["sxx"].shape[0], N))
        zy = sp.csr_matrix((s["syy"].shape[0], N))
        Sxx = sp.hstack([s["sxx"], zx])
        Syy = sp.hstack([zy, s["syy"]])
        Sxy = 0.5 * sp.hstack([s["dyux"], s["dxuy"]])
        out = (Sxx.T @ sp.diags(n_xf) @ Sxx + Syy.T @ sp.diags(n_yf) @ Syy
               + Sxy.T @ sp.diags(n_c) @ Sxy)
        return out.tocsr()

    def viscous_dissipation(self, v, nu_cells) -> float:
        """int nu |Du|^2 consistent with :meth:`viscous_matrix`."""
        s = self.strain
        nu = np.asarray(nu_cells, dtype=float).ravel()
        sxx, syy, sxy = self.strain_components(v)
        tot = (np.sum(s["w_xf"] * (s["avg_xf"] @ nu) * sxx ** 2)
               + np.sum(s["w_yf"] * (s["avg_yf"] @ nu) * syy ** 2)
               + 2.0 * np.sum(s["w_c"] * (s["avg_c"] @ nu) * sxy ** 2))
        return float(tot * self.grid.cell_area)

    def convection_matrix(self, a) -> sp.csr_matrix:
        """Skew-symmetric part of (a . grad) acting on the stacked velocity."""
        adv = sp.diags(a[0].ravel()) @ self.gx_d + sp.diags(a[1].ravel()) @ self.gy_d
        skew = 0.5 * (adv - adv.T)
        return sp.block_diag([skew, skew], format="csr")

    def factorized(self, key, build):
        """Cached sparse LU solve for a constant matrix."""
        f = self._factors.get(key)
        if f is None:
            f = spla.factorized(build().tocsc())
            self._factors[key] = f
        return f


@lru_cache(maxsize=32)
def operators(grid: Grid2D) -> Operators:
    return Operators(grid)


# ---------------------------------------------------------------------------
# Field-level operators
# ---------------------------------------------------------------------------

def _sc(m, f, grid):
    return (m @ f.ravel()).reshape(grid.shape)


def grad(f, grid: Grid2D) -> np.ndarray:
    """Central gradient with Neumann (mirror) ghosts."""
    f = check_scalar(f, grid)
    op = operators(grid)
    return np.stack([_sc(op.gx_n, f, grid), _sc(op.gy_n, f, grid)])


def div(v, grid: Grid2D) -> np.ndarray:
    """Central divergence with no-slip (antimirror) ghosts."""
    v = check_vector(v, grid)
    op = operators(grid)
    return _sc(op.gx_d, v[0], grid) + _sc(op.gy_d, v[1], grid)


def grad_free(f, grid: Grid2D) -> np.ndarray:
    """Central gradient with linear extrapolation (one-sided at walls)."""
    f = check_scalar(f, grid)
    op = operators(grid)
    return np.stack([_sc(op.gx_e, f, grid), _sc(op.gy_e, f, grid)])


def div_free(v, grid: Grid2D) -> np.ndarray:
    v = check_vector(v, grid)
    op = operators(grid)
    return _sc(op.gx_e, v[0], grid) + _sc(op.gy_e, v[1], grid)


def laplace_neumann(f, grid: Grid2D) -> np.ndarray:
    """Compact 5-point Laplacian, homogeneous Neumann."""
    f = check_scalar(f, grid)
    return _sc(operators(grid).lap_n, f, grid)


def laplace_noslip(v, grid: Grid2D) -> np.ndarray:
    """Componentwise compact Laplacian, homogeneous Dirichlet via antimirror ghosts."""
    v = check_vector(v, grid)
    lap = operators(grid).lap_d
    return np.stack([_sc(lap, v[0], grid), _sc(lap, v[1], grid)])


def gradient_energy(f, grid: Grid2D) -> float:
    """sum over interior faces of |face difference|^2 times cell area.

    Equals -<f, laplace_neumann f> exactly.
    """
    op = operators(grid)
    fr = np.asarray(f, dtype=float).ravel()
    return float((np.sum((op.fx_n @ fr) ** 2) + np.sum((op.fy_n @ fr) ** 2)) * grid.cell_area)


# ---------------------------------------------------------------------------
# Linear solves
# ---------------------------------------------------------------------------

def _cg(A, b, rtol, maxiter):
    try:
        x, info = spla.cg(A, b, rtol=rtol, atol=0.0, maxiter=maxiter)
    except TypeError:  # scipy < 1.12
        x, info = spla.cg(A, b, tol=rtol, atol=0.0, maxiter=maxiter)
    return x, info


def solve_spd(A, b, *, singular: bool = False, method: str = "cg", key=None,
              ops: Operators | None = None, rtol: float = CG_RTOL,
              check_compat: bool = True) -> np.ndarray:
    """Solve A x = b for symmetric positive (semi)definite A.

    ``singular`` marks a pure-Neumann operator whose kernel is the constants;
    the right-hand side must then have zero sum and the returned solution has
    zero mean. The relative residual is re-checked after the solve.
    """
    b = np.asarray(b, dtype=float)
    n = b.size
    bnorm = np.linalg.norm(b)
    if singular:
        if check_compat and abs(b.sum()) > 1e-10 * max(np.abs(b).sum(), 1e-300):
            raise IncompatibleRHSError("right-hand side of a pure Neumann problem must have zero mean")
        b = b - b.mean()
    if bnorm == 0.0:
        return np.zeros(n)
    if method == "cg":
        x, info = _cg(A, b, 0.1 * rtol, 10 * n)
        if info != 0:
            raise LinearSolverError(f"conjugate gradients did not converge (info={info})")
    elif method == "direct":
        if ops is None or key is None:
            raise ValueError("direct solves need an operator bundle and a cache key")

        def build():
            if not singular:
                return A
            m = A.tolil()
            m[0, :] = 0.0
            m[0, 0] = 1.0
            return m.tocsr()

        rhs = b.copy()
        if singular:
            rhs[0] = 0.0
        x = ops.factorized(key, build)(rhs)
    else:
        raise ValueError(f"unknown linear solver method {method!r}")
    if singular:
        x = x - x.mean()
    res = np.linalg.norm(A @ x - b)
    if not res <= rtol * np.linalg.norm(b):
        raise LinearSolverError(f"relative residual {res / np.linalg.norm(b):.3e} exceeds {rtol:.1e}")
    return x


def solve_helmholtz_neumann(rhs, grid: Grid2D, a: float, b: float, method: str = "cg") -> np.ndarray:
    """Solve -a Lap(phi) + b phi = rhs with homogeneous Neumann conditions."""
    rhs = check_scalar(rhs, grid)
    if a < 0 or b < 0:
        raise ValueError("need a >= 0 and b >= 0")
    if a == 0:
        if b == 0:
            raise ValueError("a = b = 0 is not a valid operator")
        return rhs / b
    op = operators(grid)
    A = (-a * op.lap_n + b * op.identity).tocsr()
    x = solve_spd(A, rhs.ravel(), singular=(b == 0), method=method,
                  key=("helmholtz", a, b), ops=op)
    return x.reshape(grid.shape)


def filter_scalar(f, grid: Grid2D, alpha: float, method: str = "cg") -> np.ndarray:
    """Helmholtz filter (I + alpha(-Lap + I))^-1 f with Neumann conditions."""
    if alpha < 0:
        raise ValueError("filter width alpha must be non-negative")
    f = check_scalar(f, grid)
    if alpha == 0:
        return f.copy()
    return solve_helmholtz_neumann(f, grid, alpha, 1.0 + alpha, method=method)


def project(v, grid: Grid2D, dt: float = 1.0, method: str = "cg"):
    """Discrete Leray projection.

    Solves div grad pi = div(v)/dt (Neumann, zero mean) and returns
    ``(v - dt grad pi, pi)``; the result is discretely divergence-free.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    v = check_vector(v, grid)
    op = operators(grid)
    d = (op.gx_d @ v[0].ravel() + op.gy_d @ v[1].ravel()) / dt
    # -poisson is SPD on mean-zero functions
    pi = -solve_spd(-op.poisson, d, singular=True, method=method, key="poisson",
                    ops=op, check_compat=False)
    pi = pi.reshape(grid.shape)
    u = v - dt * grad(pi, grid)
    return u, pi


def filter_velocity(v, grid: Grid2D, alpha: float, passes: int = 1, method: str = "cg") -> np.ndarray:
    """Apply (I - alpha Lap_noslip)^-1 componentwise and re-project, ``passes`` times."""
    if alpha < 0:
        raise ValueError("filter width alpha must be non-negative")
    if passes not in (1, 2):
        raise ValueError("passes must be 1 or 2")
    v = check_vector(v, grid)
    if alpha == 0:
        return v.copy()
    op = operators(grid)
    A = (op.identity - alpha * op.lap_d).tocsr()
    out = v
    for _ in range(passes):
        comps = [solve_spd(A, out[k].ravel(), method=method, key=("vfilter", alpha), ops=op)
                 for k in range(2)]
        out, _ = project(np.stack(comps).reshape(v.shape), grid, 1.0, method=method)
    return out
