"""Coupled first-order time step for (psi, phi, mu, u, pi).

Sub-step order per step:

1. psi is carried along backward characteristics of the old velocity.
2. (phi, mu) solve the Cahn-Hilliard pair with the convex part of the
   potential implicit and the concave part explicit, by damped Newton.
3. u solves a linear implicit momentum equation and is projected.

Advection in step 2 uses the velocity ``u^n + dt f_mu`` where ``f_mu`` is the
capillary force of the new chemical potential. The extra term is O(dt) and
makes the kinetic/cohesive exchange telescope in the discrete energy.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import model
from .model import ElasticCoefficient, ModelParams
from .ops import (Grid2D, check_scalar, check_vector, filter_scalar, filter_velocity,
                  operators, project)
from .transport import advect_psi, backtrack

log = logging.getLogger(__name__)

PHASE_CAP = 1.0 - 1e-12
SCHEMES = ("semi_implicit", "explicit_reference")
FORCING_FORMS = ("potential", "conservative", "divergence")


class NewtonError(RuntimeError):
    def __init__(self, msg, residual=np.nan, iterations=0):
        super().__init__(msg)
        self.residual = residual
        self.iterations = iterations


class CFLWarning(UserWarning):
    pass


@dataclass
class State:
    grid: Grid2D
    t: float
    u: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    mu: np.ndarray
    pi: np.ndarray
    step: int = 0

    def __post_init__(self):
        g = self.grid
        self.u = check_vector(self.u, g)
        self.phi = check_scalar(self.phi, g)
        self.psi = check_vector(self.psi, g)
        self.mu = check_scalar(self.mu, g)
        self.pi = check_scalar(self.pi, g)

    def copy(self) -> "State":
        return State(self.grid, self.t, self.u.copy(), self.phi.copy(), self.psi.copy(),
                     self.mu.copy(), self.pi.copy(), self.step)

    def fields(self) -> dict:
        return {"u_x": self.u[0], "u_y": self.u[1], "phi": self.phi, "psi_x": self.psi[0],
                "psi_y": self.psi[1], "mu": self.mu, "pi": self.pi}


@dataclass(frozen=True)
class SolverConfig:
    dt: float
    newton_tol: float = 1e-10
    newton_max: int = 50
    scheme: str = "semi_implicit"
    use_potential_form_forcing: bool = True
    alpha_filter: float = 0.0
    linear_solver: str = "direct"
    freeze_velocity: bool = False
    stabilize: bool = True

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.newton_tol <= 0 or self.newton_max < 1:
            raise ValueError("invalid Newton controls")
        if self.alpha_filter < 0:
            raise ValueError("alpha_filter must be non-negative")
        if self.linear_solver not in ("cg", "direct"):
            raise ValueError("linear_solver must be 'cg' or 'direct'")


def make_state(grid: Grid2D, phi, psi=None, u=None, params: ModelParams | None = None,
               t: float = 0.0) -> State:
    """State with mu computed from (phi, psi) and zero pressure."""
    params = params or ModelParams()
    z = np.zeros(grid.shape)
    psi = np.zeros((2,) + grid.shape) if psi is None else psi
    u = np.zeros((2,) + grid.shape) if u is None else u
    mu = chemical_potential(phi, psi, params, grid)
    return State(grid, t, u, phi, psi, mu, z.copy())


# ---------------------------------------------------------------------------
# constitutive evaluations on fields
# ---------------------------------------------------------------------------

def _op_field(m, f, grid):
    return (m @ f.ravel()).reshape(grid.shape)


def psi_gradient_sq(psi, grid: Grid2D) -> np.ndarray:
    """|grad psi|^2 summed over both components (one-sided at walls)."""
    op = operators(grid)
    out = np.zeros(grid.shape)
    for c in psi:
        out += _op_field(op.gx_e, c, grid) ** 2 + _op_field(op.gy_e, c, grid) ** 2
    return out


def chemical_potential(phi, psi, params: ModelParams, grid: Grid2D,
                       lam: ElasticCoefficient | None = None) -> np.ndarray:
    """mu = -sigma Lap phi + Psi_xi'(phi) + lambda'(phi)/2 |grad psi|^2."""
    phi = check_scalar(phi, grid)
    psi = check_vector(psi, grid)
    lam = lam or params.lam
    op = operators(grid)
    mu = (-params.coeffs.sigma * _op_field(op.lap_n, phi, grid)
          + model.psi_xi(phi, params.potential, 1)
          + 0.5 * lam.prime(phi) * psi_gradient_sq(psi, grid))
    return np.asarray(mu)


def _elastic_force(phi, psi, lam: ElasticCoefficient, grid: Grid2D) -> np.ndarray:
    """-sum_k grad psi_k div(lambda grad psi_k)."""
    op = operators(grid)
    lv = np.asarray(lam(phi)) * np.ones(grid.shape)
    f = np.zeros((2,) + grid.shape)
    for c in psi:
        gx = _op_field(op.gx_e, c, grid)
        gy = _op_field(op.gy_e, c, grid)
        d = _op_field(op.gx_e, lv * gx, grid) + _op_field(op.gy_e, lv * gy, grid)
        f[0] -= gx * d
        f[1] -= gy * d
    return f


def _div_tensor(txx, txy, tyx, tyy, grid, parity=True):
    """Row-wise divergence (sum_i d_i T_ij) of a cell-centred tensor.

    With ``parity`` the ghost rule follows the reflection parity of each entry
    (diagonal entries even, off-diagonal odd across the walls); otherwise all
    entries are extrapolated.
    """
    op = operators(grid)
    if parity:
        fx = _op_field(op.gx_n, txx, grid) + _op_field(op.gy_d, tyx, grid)
        fy = _op_field(op.gx_d, txy, grid) + _op_field(op.gy_n, tyy, grid)
    else:
        fx = _op_field(op.gx_e, txx, grid) + _op_field(op.gy_e, tyx, grid)
        fy = _op_field(op.gx_e, txy, grid) + _op_field(op.gy_e, tyy, grid)
    return np.stack([fx, fy])


def momentum_forcing(phi, mu, psi, params: ModelParams, grid: Grid2D, form: str = "potential",
                     lam: ElasticCoefficient | None = None) -> np.ndarray:
    """Capillary plus elastic body force.

    ``potential``     mu grad phi - grad psi^T div(lambda grad psi)
    ``conservative``  -phi grad mu - grad psi^T div(lambda grad psi)  (used by the stepper)
    ``divergence``    -div(lambda grad psi^T grad psi) - div(grad phi (x) grad phi)
    The three differ by discrete gradients (up to truncation error).
    """
    phi = check_scalar(phi, grid)
    mu = check_scalar(mu, grid)
    psi = check_vector(psi, grid)
    lam = lam or params.lam
    op = operators(grid)
    if form == "potential":
        gphi = np.stack([_op_field(op.gx_n, phi, grid), _op_field(op.gy_n, phi, grid)])
        return mu * gphi + _elastic_force(phi, psi, lam, grid)
    if form == "conservative":
        gmu = np.stack([_op_field(op.gx_n, mu, grid), _op_field(op.gy_n, mu, grid)])
        return -phi * gmu + _elastic_force(phi, psi, lam, grid)
    if form == "divergence":
        sigma = params.coeffs.sigma
        px = _op_field(op.gx_n, phi, grid)
        py = _op_field(op.gy_n, phi, grid)
        f = -sigma * _div_tensor(px * px, px * py, py * px, py * py, grid)
        lv = np.asarray(lam(phi)) * np.ones(grid.shape)
        txx = np.zeros(grid.shape)
        txy = np.zeros(grid.shape)
        tyy = np.zeros(grid.shape)
        for c in psi:
            gx = _op_field(op.gx_e, c, grid)
            gy = _op_field(op.gy_e, c, grid)
            txx += lv * gx * gx
            txy += lv * gx * gy
            tyy += lv * gy * gy
        return f - _div_tensor(txx, txy, txy, tyy, grid, parity=False)
    raise ValueError(f"unknown forcing form {form!r}; expected one of {FORCING_FORMS}")


# ---------------------------------------------------------------------------
# Cahn-Hilliard solve
# ---------------------------------------------------------------------------

def _advection_matrix(phi, grid):
    """A(phi) w = div(phi w) with no-flux walls, acting on stacked [w_x; w_y]."""
    op = operators(grid)
    d = sp.diags(phi.ravel())
    return sp.hstack([op.gx_d @ d, op.gy_d @ d]).tocsr()


def solve_cahn_hilliard(phi_old, u_adv, psi_new, params: ModelParams, grid: Grid2D, dt: float, *,
                        lam: ElasticCoefficient | None = None, stabilize: bool = True,
                        source=None, tol: float = 1e-10, max_iter: int = 50):
    """Return (phi, mu, iterations) of one convex-splitting step.

    Residuals, with K = dt^2 A A^T - dt Lap (A A^T only when ``stabilize``):
        R1 = phi - phi_old + dt A u_adv + K mu - dt source
        R2 = mu + sigma Lap phi - F_xi'(phi) + theta0 phi_old - lambda'(phi_old)/2 |grad psi|^2
    """
    lam = lam or params.lam
    pot = params.potential
    sigma = params.coeffs.sigma
    op = operators(grid)
    N = grid.size
    po = phi_old.ravel()
    A = _advection_matrix(phi_old, grid)
    K = -dt * op.lap_n
    if stabilize:
        K = K + dt * dt * (A @ A.T)
    K = K.tocsr()
    c1 = dt * (A @ u_adv.reshape(-1))
    if source is not None:
        c1 = c1 - dt * np.asarray(source, dtype=float).ravel()
    c2 = pot.theta0 * po - 0.5 * np.asarray(lam.prime(phi_old)).ravel() * psi_gradient_sq(psi_new, grid).ravel()
    L = (sigma * op.lap_n).tocsr()

    def residual(p, m):
        r1 = p - po + c1 + K @ m
        r2 = m + L @ p - model.f_xi(p, pot, 1) + c2
        return np.concatenate([r1, r2])

    p = po.copy()
    m = -(L @ p) + model.f_xi(p, pot, 1) - c2
    r = residual(p, m)
    rn = np.abs(r).max()
    I = op.identity
    it = 0
    lu = None
    # chord iterations on a Schur-complement factorization; the Jacobian is
    # refreshed whenever contraction stalls
    while rn > tol:
        if it >= max_iter:
            raise NewtonError(f"Newton did not converge in {max_iter} iterations (residual {rn:.3e})",
                              rn, it)
        it += 1
        if lu is None:
            B = (L - sp.diags(model.f_xi(p, pot, 2))).tocsr()
            lu = spla.splu((I - B @ K).tocsc(), permc_spec="MMD_AT_PLUS_A")
        r1, r2 = r[:N], r[N:]
        dm = lu.solve(B @ r1 - r2)
        dp = -r1 - K @ dm
        step = 1.0
        while True:
            pn = p + step * dp
            if np.abs(pn).max() <= PHASE_CAP:
                mn = m + step * dm
                rnew = residual(pn, mn)
                rnn = np.abs(rnew).max()
                if rnn < rn or rnn <= tol:
                    break
            step *= 0.5
            if step < 1e-10:
                raise NewtonError(f"line search failed at Newton iteration {it} (residual {rn:.3e})",
                                  rn, it)
        if step < 1.0 or rnn > 0.1 * rn:
            lu = None
        p, m, r, rn = pn, mn, rnew, rnn
    return p.reshape(grid.shape), m.reshape(grid.shape), it


# ---------------------------------------------------------------------------
# Momentum solve
# ---------------------------------------------------------------------------

def _solve_nonsymmetric(M, b, rtol=1e-12):
    """Jacobi-preconditioned BiCGSTAB (the matrix is dominated by I/dt), LU fallback."""
    dinv = 1.0 / M.diagonal()
    P = spla.LinearOperator(M.shape, matvec=lambda v: dinv * v)
    try:
        x, info = spla.bicgstab(M, b, M=P, rtol=rtol, atol=0.0, maxiter=2000)
    except TypeError:  # scipy < 1.12
        x, info = spla.bicgstab(M, b, M=P, tol=rtol, atol=0.0, maxiter=2000)
    bn = np.linalg.norm(b)
    if info != 0 or np.linalg.norm(M @ x - b) > 100 * rtol * bn:
        log.info("BiCGSTAB failed (info=%d); falling back to sparse LU", info)
        x = spla.splu(M.tocsc(), permc_spec="MMD_AT_PLUS_A").solve(b)
    return x


def solve_momentum(u_old, grid: Grid2D, dt: float, nu_cells, forcing, *, darcy=None,
                   advecting=None, method: str = "cg"):
    """Implicit step (u - u_old)/dt + B(a) u - div(nu D u) + g u = f, then projection.

    B(a) is the skew-symmetric convection operator of the advecting field ``a``
    (omitted when ``advecting`` is None). Returns (u_new, pi).
    """
    op = operators(grid)
    N = grid.size
    M = sp.identity(2 * N, format="csr") / dt + op.viscous_matrix(nu_cells)
    if advecting is not None:
        M = M + op.convection_matrix(advecting)
    if darcy is not None:
        g = np.asarray(darcy, dtype=float).ravel()
        M = M + sp.diags(np.concatenate([g, g]))
    rhs = u_old.reshape(-1) / dt + np.asarray(forcing, dtype=float).reshape(-1)
    ut = _solve_nonsymmetric(M.tocsr(), rhs).reshape((2,) + grid.shape)
    return project(ut, grid, dt, method=method)


# ---------------------------------------------------------------------------
# Time steps
# ---------------------------------------------------------------------------

def _cfl_check(u, grid, dt):
    c = dt * max(np.abs(u[0]).max() / grid.dx, np.abs(u[1]).max() / grid.dy)
    if c > 1.0:
        warnings.warn(f"advective Courant number {c:.2f} exceeds 1", CFLWarning, stacklevel=3)
    return c


def _advance(state: State, cfg: SolverConfig, params: ModelParams, alpha: float) -> State:
    g = state.grid
    dt = cfg.dt
    method = cfg.linear_solver
    lam = params.lam if alpha == 0 else model.mollify_lambda(params.lam, alpha)
    # advecting velocity (Leray filtered when alpha > 0)
    v = filter_velocity(state.u, g, alpha, passes=2, method=method)
    _cfl_check(v, g, dt)

    psi = advect_psi(state.psi, backtrack(v, g, dt))

    stab = cfg.stabilize and not cfg.freeze_velocity
    phi, mu, nit = solve_cahn_hilliard(state.phi, v, psi, params, g, dt, lam=lam, stabilize=stab,
                                       tol=cfg.newton_tol, max_iter=cfg.newton_max)
    log.debug("step %d: Newton converged in %d iterations", state.step + 1, nit)

    if cfg.freeze_velocity:
        u, pi = state.u.copy(), state.pi.copy()
    else:
        form = "conservative" if cfg.use_potential_form_forcing else "divergence"
        f = momentum_forcing(state.phi, mu, psi, params, g, form=form, lam=lam)
        phi_c = filter_scalar(phi, g, alpha, method=method)
        nu = model.nu_of(phi_c, params.coeffs)
        darcy = model.darcy_coefficient(np.clip(phi, -1.0, 1.0), params.coeffs)
        u, pi = solve_momentum(state.u, g, dt, nu, f, darcy=darcy, advecting=v, method=method)
    return State(g, state.t + dt, u, phi, psi, mu, pi, state.step + 1)


def step(state: State, config: SolverConfig, params: ModelParams) -> State:
    """Advance one time step (filter width taken from ``config.alpha_filter``)."""
    if config.scheme == "explicit_reference":
        from .verification import explicit_reference_step
        return explicit_reference_step(state, config.dt, params)
    return _advance(state, config, params, config.alpha_filter)


def step_regularized(state: State, config: SolverConfig, params: ModelParams,
                     alpha: float, xi: float) -> State:
    """Step of the filtered system: Leray-filtered advecting velocity, filtered
    viscosity argument, mollified lambda and potential regularization ``xi``."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if not xi > 0:
        raise ValueError("xi must be positive")
    if xi != params.potential.xi:
        params = params.with_xi(xi)
    return _advance(state, replace(config, alpha_filter=alpha), params, alpha)


def run(state: State, config: SolverConfig, params: ModelParams, nsteps: int, callback=None) -> State:
    for _ in range(nsteps):
        state = step(state, config, params)
        if callback is not None:
            callback(state)
    return state
