"""Independent oracles: explicit reference stepper, manufactured solutions,
linear-stability rate and the regularization cascade.

The explicit stepper re-implements the spatial stencils of the coupled
system with array slicing (no sparse operators), and projects with a
cosine-transform diagonalization of the pressure Laplacian. It therefore
integrates the same semi-discrete system as :mod:`clotflow.dynamics` with
different code and a different time integrator.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dctn, idctn

from . import model
from .dynamics import SolverConfig, State, chemical_potential, make_state, solve_cahn_hilliard, \
    solve_momentum, step, step_regularized
from .model import ModelParams
from .ops import Grid2D, solve_helmholtz_neumann

log = logging.getLogger(__name__)


class StabilityError(ValueError):
    pass


# ---------------------------------------------------------------------------
# slicing-based stencils
# ---------------------------------------------------------------------------

def _pad(f, kind):
    if kind == "mirror":
        return np.pad(f, 1, mode="symmetric")
    p = np.pad(f, 1)
    if kind == "anti":
        p[0, 1:-1], p[-1, 1:-1] = -f[0], -f[-1]
        p[1:-1, 0], p[1:-1, -1] = -f[:, 0], -f[:, -1]
    elif kind == "extrap":
        p[0, 1:-1], p[-1, 1:-1] = 2 * f[0] - f[1], 2 * f[-1] - f[-2]
        p[1:-1, 0], p[1:-1, -1] = 2 * f[:, 0] - f[:, 1], 2 * f[:, -1] - f[:, -2]
    return p


def _dx(f, h, kind):
    p = _pad(f, kind)
    return (p[2:, 1:-1] - p[:-2, 1:-1]) / (2 * h)


def _dy(f, h, kind):
    p = _pad(f, kind)
    return (p[1:-1, 2:] - p[1:-1, :-2]) / (2 * h)


def _lap(f, dx, dy):
    p = _pad(f, "mirror")
    c = p[1:-1, 1:-1]
    return (p[2:, 1:-1] - 2 * c + p[:-2, 1:-1]) / dx ** 2 + (p[1:-1, 2:] - 2 * c + p[1:-1, :-2]) / dy ** 2


def _fdiff(u, h, axis):
    """No-slip differences on all faces along ``axis`` (wall faces use the ghost -u)."""
    u = np.moveaxis(u, axis, 0)
    q = np.empty((u.shape[0] + 1,) + u.shape[1:])
    q[1:-1] = u[1:] - u[:-1]
    q[0] = 2 * u[0]
    q[-1] = -2 * u[-1]
    return np.moveaxis(q / h, 0, axis)


def _fdiff_t(q, h, axis):
    q = np.moveaxis(q, axis, 0)
    n = q.shape[0] - 1
    out = q[:n] - q[1:]
    out[0] += q[0]
    out[-1] -= q[n]
    return np.moveaxis(out / h, 0, axis)


def _favg0(u, axis):
    """Face averages that vanish on the walls."""
    u = np.moveaxis(u, axis, 0)
    q = np.zeros((u.shape[0] + 1,) + u.shape[1:])
    q[1:-1] = 0.5 * (u[1:] + u[:-1])
    return np.moveaxis(q, 0, axis)


def _favg0_t(q, axis):
    q = np.moveaxis(q, axis, 0).copy()
    q[0] = 0.0
    q[-1] = 0.0
    return np.moveaxis(0.5 * (q[:-1] + q[1:]), 0, axis)


def _favg_mirror(f, axis):
    f = np.moveaxis(f, axis, 0)
    q = np.empty((f.shape[0] + 1,) + f.shape[1:])
    q[1:-1] = 0.5 * (f[1:] + f[:-1])
    q[0], q[-1] = f[0], f[-1]
    return np.moveaxis(q, 0, axis)


def _wall_half(n):
    w = np.ones(n + 1)
    w[0] = w[-1] = 0.5
    return w


def _viscous(u, nu, dx, dy):
    """-div(nu D u) from face/corner strain rates."""
    ux, uy = u
    nx, ny = nu.shape
    wx, wy = _wall_half(nx)[:, None], _wall_half(ny)[None, :]
    sxx = _fdiff(ux, dx, 0)
    syy = _fdiff(uy, dy, 1)
    sxy = 0.5 * (_favg0(_fdiff(ux, dy, 1), 0) + _favg0(_fdiff(uy, dx, 0), 1))
    qxx = wx * _favg_mirror(nu, 0) * sxx
    qyy = wy * _favg_mirror(nu, 1) * syy
    qxy = wx * wy * _favg_mirror(_favg_mirror(nu, 0), 1) * sxy
    fx = _fdiff_t(qxx, dx, 0) + _fdiff_t(_favg0_t(qxy, 0), dy, 1)
    fy = _fdiff_t(qyy, dy, 1) + _fdiff_t(_favg0_t(qxy, 1), dx, 0)
    return np.stack([fx, fy])


def _skew_convection(a, w, dx, dy):
    """1/2 [(a . grad) w + div(a w)] per component."""
    out = []
    for c in w:
        out.append(0.5 * (a[0] * _dx(c, dx, "anti") + a[1] * _dy(c, dy, "anti")
                          + _dx(a[0] * c, dx, "mirror") + _dy(a[1] * c, dy, "mirror")))
    return np.stack(out)


def _divergence_forcing(phi, psi, params, dx, dy):
    lam = params.lam
    sigma = params.coeffs.sigma
    px, py = _dx(phi, dx, "mirror"), _dy(phi, dy, "mirror")
    fx = -sigma * (_dx(px * px, dx, "mirror") + _dy(py * px, dy, "anti"))
    fy = -sigma * (_dx(px * py, dx, "anti") + _dy(py * py, dy, "mirror"))
    lv = lam(phi) * np.ones_like(phi)
    txx = np.zeros_like(phi)
    txy = np.zeros_like(phi)
    tyy = np.zeros_like(phi)
    for c in psi:
        gx, gy = _dx(c, dx, "extrap"), _dy(c, dy, "extrap")
        txx += lv * gx * gx
        txy += lv * gx * gy
        tyy += lv * gy * gy
    fx -= _dx(txx, dx, "extrap") + _dy(txy, dy, "extrap")
    fy -= _dx(txy, dx, "extrap") + _dy(tyy, dy, "extrap")
    return np.stack([fx, fy])


def _upwind(psi, u, dx, dy, dt):
    out = []
    for c in psi:
        p = np.pad(c, 1, mode="edge")
        bx = (p[1:-1, 1:-1] - p[:-2, 1:-1]) / dx
        fx = (p[2:, 1:-1] - p[1:-1, 1:-1]) / dx
        by = (p[1:-1, 1:-1] - p[1:-1, :-2]) / dy
        fy = (p[1:-1, 2:] - p[1:-1, 1:-1]) / dy
        adv = np.where(u[0] > 0, u[0] * bx, u[0] * fx) + np.where(u[1] > 0, u[1] * by, u[1] * fy)
        out.append(c - dt * adv)
    return np.stack(out)


def dct_project(v, dx, dy, dt):
    """Projection by diagonalizing div grad in the cosine basis. Returns (u, pi)."""
    nx, ny = v.shape[1:]
    d = (_dx(v[0], dx, "anti") + _dy(v[1], dy, "anti")) / dt
    kx = (np.sin(np.pi * np.arange(nx) / nx) / dx) ** 2
    ky = (np.sin(np.pi * np.arange(ny) / ny) / dy) ** 2
    lam = -(kx[:, None] + ky[None, :])
    lam[0, 0] = 1.0
    ph = dctn(d, type=2, norm="ortho") / lam
    ph[0, 0] = 0.0
    pi = idctn(ph, type=2, norm="ortho")
    u = v - dt * np.stack([_dx(pi, dx, "mirror"), _dy(pi, dy, "mirror")])
    return u, pi


def explicit_stability_limit(grid: Grid2D, params: ModelParams, c: float = 0.05) -> float:
    return c * grid.hmin ** 4 / params.coeffs.sigma


def explicit_reference_step(state: State, dt: float, params: ModelParams) -> State:
    """Forward-Euler step of every term (divergence-form forcing) plus projection."""
    g = state.grid
    lim = explicit_stability_limit(g, params)
    if dt > lim:
        raise StabilityError(f"dt = {dt:.3e} exceeds the explicit limit {lim:.3e}")
    dx, dy = g.dx, g.dy
    pot, co = params.potential, params.coeffs
    phi, u, psi = state.phi, state.u, state.psi

    gpsi = sum(_dx(c, dx, "extrap") ** 2 + _dy(c, dy, "extrap") ** 2 for c in psi)
    mu = -co.sigma * _lap(phi, dx, dy) + model.psi_xi(phi, pot, 1) + 0.5 * params.lam.prime(phi) * gpsi
    flux = _dx(phi * u[0], dx, "anti") + _dy(phi * u[1], dy, "anti")
    phi_new = phi + dt * (_lap(mu, dx, dy) - flux)

    nu = model.nu_of(phi, co)
    gd = model.darcy_coefficient(np.clip(phi, -1, 1), co)
    rhs = (-_skew_convection(u, u, dx, dy) - _viscous(u, nu, dx, dy) - gd * u
           + _divergence_forcing(phi, psi, params, dx, dy))
    u_new, pi = dct_project(u + dt * rhs, dx, dy, dt)
    psi_new = _upwind(psi, u, dx, dy, dt)
    mu_new = chemical_potential(phi_new, psi_new, params, g)
    return State(g, state.t + dt, u_new, phi_new, psi_new, mu_new, pi, state.step + 1)


# ---------------------------------------------------------------------------
# convergence tables
# ---------------------------------------------------------------------------

def fit_order(h, err) -> float:
    """Least-squares slope of log(err) against log(h)."""
    h = np.asarray(h, dtype=float)
    err = np.asarray(err, dtype=float)
    return float(np.polyfit(np.log(h), np.log(err), 1)[0])


@dataclass
class ConvergenceTable:
    study: str
    parameter: str
    values: list
    errors: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.values) < 3:
            raise ValueError("a convergence table needs at least 3 levels")

    @property
    def orders(self) -> dict:
        return {k: fit_order(self.values, v) for k, v in self.errors.items()}

    def order(self, key: str) -> float:
        return self.orders[key]

    def rows(self):
        keys = list(self.errors)
        yield [self.parameter] + keys
        for i, v in enumerate(self.values):
            yield [v] + [self.errors[k][i] for k in keys]

    def format(self) -> str:
        lines = [f"# {self.study}"]
        for r in self.rows():
            lines.append("  ".join(f"{x:>14}" if isinstance(x, str) else f"{x:14.6e}" for x in r))
        lines.append("  ".join([f"{'order':>14}"] + [f"{o:14.4f}" for o in self.orders.values()]))
        return "\n".join(lines)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            for r in self.rows():
                w.writerow(r)
            w.writerow(["order"] + [repr(o) for o in self.orders.values()])


def _norms(diff, grid):
    return np.sqrt(np.sum(diff ** 2) * grid.cell_area / (grid.lx * grid.ly)), np.abs(diff).max()


# ---------------------------------------------------------------------------
# manufactured solutions
# ---------------------------------------------------------------------------

def _heat_exact(grid, t):
    X, _ = grid.mesh()
    return np.exp(-t) * np.cos(np.pi * X / grid.lx)


def _heat_run(grid, dt, T):
    k2 = (np.pi / grid.lx) ** 2
    phi = _heat_exact(grid, 0.0)
    n = int(round(T / dt))
    for i in range(1, n + 1):
        src = (k2 - 1.0) * _heat_exact(grid, i * dt)
        phi = solve_helmholtz_neumann(phi + dt * src, grid, dt, 1.0, method="direct")
    return phi


_CH_AMP = 0.5


def _ch_exact(grid, t):
    X, _ = grid.mesh()
    return _CH_AMP * np.exp(-t) * np.cos(np.pi * X / grid.lx)


def ch_source(grid, t, params: ModelParams):
    """S = phi_t - Lap mu for phi = 0.5 e^{-t} cos(k x), mu = -sigma Lap phi + Psi'(phi).

    With c = cos(kx), s = sin(kx), phi = a c:
      Lap mu = -sigma k^4 phi + Psi''(phi) phi_xx + Psi'''(phi) phi_x^2,
      phi_xx = -k^2 phi, phi_x = -a k s, Psi''' = 2 theta phi / (1 - phi^2)^2.
    """
    X, _ = grid.mesh()
    k = np.pi / grid.lx
    a = _CH_AMP * np.exp(-t)
    phi = a * np.cos(k * X)
    px = -a * k * np.sin(k * X)
    th = params.potential.theta
    p2 = model.psi_second(phi, params.potential)
    p3 = 2 * th * phi / (1 - phi ** 2) ** 2
    lap_mu = -params.coeffs.sigma * k ** 4 * phi + p2 * (-k * k * phi) + p3 * px ** 2
    return -phi - lap_mu


def _ch_run(grid, dt, T, params):
    phi = _ch_exact(grid, 0.0)
    psi = np.zeros((2,) + grid.shape)
    u = np.zeros((2,) + grid.shape)
    n = int(round(T / dt))
    for i in range(1, n + 1):
        phi, _, _ = solve_cahn_hilliard(phi, u, psi, params, grid, dt, stabilize=False,
                                        source=ch_source(grid, i * dt, params))
    return phi


def _stokes_fields(grid, t, params):
    """Exact u = e^{-t} curl(sin^2(pi x) sin^2(pi y)) on the unit square, zero pressure,
    viscosity nu(phi_s) with phi_s = 0.5 cos(pi x) cos(pi y); returns (u, f, nu)."""
    X, Y = grid.mesh()
    pi = np.pi
    S = lambda z: np.sin(pi * z) ** 2  # noqa: E731
    S1 = lambda z: pi * np.sin(2 * pi * z)  # noqa: E731
    S2 = lambda z: 2 * pi ** 2 * np.cos(2 * pi * z)  # noqa: E731
    S3 = lambda z: -4 * pi ** 3 * np.sin(2 * pi * z)  # noqa: E731
    e = np.exp(-t)
    ux, uy = e * S(X) * S1(Y), -e * S1(X) * S(Y)
    dxux, dyux = e * S1(X) * S1(Y), e * S(X) * S2(Y)
    dxuy, dyuy = -e * S2(X) * S(Y), -e * S1(X) * S1(Y)
    lapx = e * (S2(X) * S1(Y) + S(X) * S3(Y))
    lapy = -e * (S3(X) * S(Y) + S1(X) * S2(Y))
    c = params.coeffs
    a = 0.5
    phis = a * np.cos(pi * X) * np.cos(pi * Y)
    nu = model.nu_of(phis, c)
    dnu = 0.5 * (c.nu1 - c.nu2)
    nux = dnu * (-a * pi * np.sin(pi * X) * np.cos(pi * Y))
    nuy = dnu * (-a * pi * np.cos(pi * X) * np.sin(pi * Y))
    dxy = 0.5 * (dyux + dxuy)
    # f = u_t - div(nu D u) = -u - (grad nu) . D u - nu/2 Lap u  (div u = 0)
    fx = -ux - (nux * dxux + nuy * dxy) - 0.5 * nu * lapx
    fy = -uy - (nux * dxy + nuy * dyuy) - 0.5 * nu * lapy
    return np.stack([ux, uy]), np.stack([fx, fy]), nu


def _stokes_run(grid, dt, T, params):
    u, _, nu = _stokes_fields(grid, 0.0, params)
    n = int(round(T / dt))
    for i in range(1, n + 1):
        _, f, _ = _stokes_fields(grid, i * dt, params)
        u, _ = solve_momentum(u, grid, dt, nu, f, method="direct")
    return u


def manufactured_solution_study(subproblem: str, levels=(16, 32, 64), kind: str = "space",
                                params: ModelParams | None = None, T: float | None = None,
                                dt_scale: float = 1.0) -> ConvergenceTable:
    """Convergence of a single-physics subproblem against an exact solution.

    ``kind="space"`` refines the grid with dt = dt_scale * dx^2; ``kind="time"``
    fixes the grid (``levels[-1]`` cells) and halves dt from ``T/8``, measuring
    the error against a run with a 16x smaller step than the finest level.
    """
    if len(levels) < 3:
        raise ValueError("need at least 3 refinement levels")
    params = params or ModelParams()
    if subproblem not in ("heat", "cahn_hilliard", "stokes"):
        raise ValueError(f"unknown subproblem {subproblem!r}")
    T = T if T is not None else {"heat": 0.1, "cahn_hilliard": 0.05, "stokes": 0.05}[subproblem]
    field_name = "u" if subproblem == "stokes" else "phi"

    def grid_for(n):
        if subproblem == "stokes":
            return Grid2D(n, n, 1.0, 1.0)
        return Grid2D(n, 8, 1.0, 8.0 / n)

    def simulate(grid, dt):
        if subproblem == "heat":
            return _heat_run(grid, dt, T)
        if subproblem == "cahn_hilliard":
            return _ch_run(grid, dt, T, params)
        return _stokes_run(grid, dt, T, params)

    def exact(grid):
        if subproblem == "heat":
            return _heat_exact(grid, T)
        if subproblem == "cahn_hilliard":
            return _ch_exact(grid, T)
        return _stokes_fields(grid, T, params)[0]

    l2, linf, values = [], [], []
    if kind == "space":
        for n in levels:
            g = grid_for(n)
            dt = T / int(np.ceil(T / (dt_scale * g.dx ** 2)))
            e2, ei = _norms(simulate(g, dt) - exact(g), g)
            values.append(g.dx)
            l2.append(e2)
            linf.append(ei)
        param = "h"
    elif kind == "time":
        g = grid_for(levels[-1])
        dts = [T / (8 * 2 ** i) for i in range(len(levels))]
        ref = simulate(g, dts[-1] / 16)
        for dt in dts:
            e2, ei = _norms(simulate(g, dt) - ref, g)
            values.append(dt)
            l2.append(e2)
            linf.append(ei)
        param = "dt"
    else:
        raise ValueError("kind must be 'space' or 'time'")
    return ConvergenceTable(f"{subproblem} ({kind})", param, values,
                            {f"{field_name}_l2": l2, f"{field_name}_linf": linf})


# ---------------------------------------------------------------------------
# linear stability
# ---------------------------------------------------------------------------

def spinodal_growth_oracle(kappa, params: ModelParams):
    """Linearized growth rate r = -kappa^2 (Psi''(0) + sigma kappa^2) about phi = 0."""
    p0 = model.psi_second(0.0, params.potential)
    k2 = np.asarray(kappa, dtype=float) ** 2
    out = -k2 * (p0 + params.coeffs.sigma * k2)
    return float(out) if np.ndim(out) == 0 else out


def measure_spinodal_rate(params: ModelParams | None = None, lx: float = 10.0, nx: int = 64,
                          k: int = 2, amplitude: float = 1e-3, dt: float = 0.01, nsteps: int = 100):
    """Fit the exponential rate of the seeded mode cos(k pi x / lx) under the full step.

    Returns (measured_rate, kappa, max_amplitude).
    """
    params = params or ModelParams()
    ny = 8
    g = Grid2D(nx, ny, lx, lx * ny / nx)
    X, _ = g.mesh()
    mode = np.cos(k * np.pi * X / lx)
    psi = np.ones((2,) + g.shape)
    s = make_state(g, amplitude * mode, psi=psi, params=params)
    cfg = SolverConfig(dt=dt)
    amps = [np.sum(s.phi * mode) / np.sum(mode * mode)]
    times = [0.0]
    for _ in range(nsteps):
        s = step(s, cfg, params)
        amps.append(np.sum(s.phi * mode) / np.sum(mode * mode))
        times.append(s.t)
    rate = np.polyfit(times, np.log(np.abs(amps)), 1)[0]
    return float(rate), k * np.pi / lx, float(np.abs(amps).max())


# ---------------------------------------------------------------------------
# oracle equivalence and cascade
# ---------------------------------------------------------------------------

def smooth_random_state(grid: Grid2D, params: ModelParams, seed: int = 0, phi_amp: float = 0.4,
                        u_amp: float = 0.5) -> State:
    """Low-mode random data compatible with the boundary conditions."""
    from .ops import project
    rng = np.random.default_rng(seed)
    X, Y = grid.mesh()
    ax, ay = np.pi / grid.lx, np.pi / grid.ly
    phi = np.zeros(grid.shape)
    for kx in range(3):
        for ky in range(3):
            phi += rng.uniform(-1, 1) * np.cos(kx * ax * X) * np.cos(ky * ay * Y)
    phi *= phi_amp / np.abs(phi).max()
    s = np.zeros(grid.shape)
    for kx in range(1, 3):
        for ky in range(1, 3):
            s += rng.uniform(-1, 1) * np.sin(kx * ax * X) ** 2 * np.sin(ky * ay * Y) ** 2
    u = np.stack([_dy(s, grid.dy, "anti"), -_dx(s, grid.dx, "anti")])
    u = project(u, grid)[0]
    u *= u_amp / max(np.abs(u).max(), 1e-300)
    psi = np.stack([Y - 0.5 * grid.ly, -(X - 0.5 * grid.lx)])
    psi += 0.1 * np.stack([np.sin(ax * X) * np.cos(ay * Y), np.cos(ax * X) * np.sin(ay * Y)])
    return make_state(grid, phi, psi=psi, u=u, params=params)


def trajectory_distance(a: State, b: State) -> float:
    """Grid-normalized L2 distance over (u, phi, psi)."""
    g = a.grid
    d = np.sum((a.u - b.u) ** 2) + np.sum((a.phi - b.phi) ** 2) + np.sum((a.psi - b.psi) ** 2)
    return float(np.sqrt(d * g.cell_area / (g.lx * g.ly)))


def oracle_equivalence(dts=(1e-5, 5e-6, 2.5e-6), T: float = 1e-4, n: int = 16,
                       params: ModelParams | None = None, seed: int = 0) -> ConvergenceTable:
    """Semi-implicit (divergence-form forcing) vs explicit reference at a fixed final time."""
    params = params or ModelParams()
    g = Grid2D(n, n, 2 * np.pi, 2 * np.pi)
    s0 = smooth_random_state(g, params, seed)
    d, dphi, du = [], [], []
    for dt in dts:
        nst = int(round(T / dt))
        cfg = SolverConfig(dt=dt, use_potential_form_forcing=False)
        a = s0.copy()
        b = s0.copy()
        for _ in range(nst):
            a = step(a, cfg, params)
            b = explicit_reference_step(b, dt, params)
        d.append(max(np.abs(a.u - b.u).max(), np.abs(a.phi - b.phi).max(), np.abs(a.psi - b.psi).max()))
        dphi.append(np.abs(a.phi - b.phi).max())
        du.append(np.abs(a.u - b.u).max())
    return ConvergenceTable("semi-implicit vs explicit reference", "dt", list(dts),
                            {"max": d, "phi_max": dphi, "u_max": du})


def cascade_study(initial: State, config: SolverConfig, params: ModelParams, t_end: float,
                  alphas=(0.1, 0.05, 0.025), xis=(1e-2, 1e-3, 1e-4)) -> dict:
    """Trajectory distances at ``t_end`` of regularized runs.

    Returns ``{"alpha": ConvergenceTable | list, "xi": list}``: distances of each
    alpha run to the alpha = 0 run (at the first xi), and of each xi run (alpha = 0)
    to the run with the smallest xi.
    """
    nst = int(round(t_end / config.dt))

    def run(alpha, xi):
        s = initial.copy()
        for _ in range(nst):
            s = step_regularized(s, config, params, alpha, xi)
        return s

    xi0 = params.potential.xi
    ref = run(0.0, xi0)
    adist = [trajectory_distance(run(a, xi0), ref) for a in alphas]
    xruns = [run(0.0, x) for x in xis]
    xdist = [trajectory_distance(r, xruns[-1]) for r in xruns]
    out = {"alpha": list(zip(alphas, adist)), "xi": list(zip(xis, xdist))}
    if len(alphas) >= 3 and all(d > 0 for d in adist):
        out["alpha_table"] = ConvergenceTable("cascade in alpha", "alpha", list(alphas),
                                              {"distance": adist})
    return out
