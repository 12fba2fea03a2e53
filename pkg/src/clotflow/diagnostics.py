"""Discrete energy, dissipation, mass and bound monitors; state validation."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import model
from .dynamics import State, psi_gradient_sq
from .model import ModelParams
from .ops import div, gradient_energy, operators


@dataclass(frozen=True)
class EnergyReport:
    t: float
    e_kin: float
    e_coh: float
    e_ela: float
    e_total: float
    dissipation: float
    mass: float
    max_abs_phi: float
    separation_margin: float
    div_residual: float
    energy_residual: float = float("nan")

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def row(self) -> list[float]:
        return list(asdict(self).values())


def cohesive_energy(phi, params: ModelParams, grid) -> float:
    pot = params.potential
    bulk = np.sum(model.psi_xi(phi, pot, 0)) * grid.cell_area
    return float(0.5 * params.coeffs.sigma * gradient_energy(phi, grid) + bulk)


def elastic_energy(phi, psi, params: ModelParams, grid, lam=None) -> float:
    lam = lam or params.lam
    return float(0.5 * np.sum(lam(phi) * psi_gradient_sq(psi, grid)) * grid.cell_area)


def dissipation(state: State, params: ModelParams) -> float:
    g = state.grid
    c = params.coeffs
    phi = np.clip(state.phi, -1.0, 1.0)
    visc = operators(g).viscous_dissipation(state.u, model.nu_of(phi, c))
    fric = np.sum(model.darcy_coefficient(phi, c) * (state.u ** 2).sum(axis=0)) * g.cell_area
    return float(visc + fric + gradient_energy(state.mu, g))


def div_residual(u, grid) -> float:
    """||div u||_2 * h_min / ||u||_2 (0 for the zero field)."""
    un = np.sqrt(np.sum(u * u))
    if un == 0:
        return 0.0
    return float(np.sqrt(np.sum(div(u, grid) ** 2)) * grid.hmin / un)


def energy(state: State, params: ModelParams, previous: EnergyReport | None = None) -> EnergyReport:
    g = state.grid
    e_kin = float(0.5 * np.sum(state.u ** 2) * g.cell_area)
    e_coh = cohesive_energy(state.phi, params, g)
    e_ela = elastic_energy(state.phi, state.psi, params, g)
    e_tot = e_kin + e_coh + e_ela
    d = dissipation(state, params)
    mphi = float(np.abs(state.phi).max())
    res = float("nan")
    if previous is not None and state.t > previous.t:
        res = (e_tot - previous.e_total) / (state.t - previous.t) + d
    return EnergyReport(state.t, e_kin, e_coh, e_ela, e_tot, d, float(state.phi.mean()), mphi,
                        1.0 - mphi, div_residual(state.u, g), res)


@dataclass(frozen=True)
class Tolerances:
    div: float = 1e-8
    mass: float = 1e-12
    energy: float = 1e-8
    pi_mean: float = 1e-10


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str
    location: tuple | None = None
    value: float = float("nan")

    def __str__(self):
        loc = "" if self.location is None else f" at {self.location}"
        return f"{self.kind}: {self.message}{loc}"


def validate(state: State, params: ModelParams, tolerances: Tolerances | None = None, *,
             previous: EnergyReport | None = None, reference: EnergyReport | None = None) -> list:
    """Check the state invariants; never raises.

    ``previous`` enables the energy-monotonicity check, ``reference`` (the
    initial report) the mass check and the energy tolerance scale.
    """
    tol = tolerances or Tolerances()
    out = []
    for name, f in state.fields().items():
        bad = ~np.isfinite(f)
        if bad.any():
            loc = tuple(int(k) for k in np.argwhere(bad)[0])
            out.append(Violation("finite", f"{name} has {int(bad.sum())} non-finite values", loc))
    if out:
        return out

    a = np.abs(state.phi)
    if a.max() > 1.0:
        loc = tuple(int(k) for k in np.unravel_index(np.argmax(a), a.shape))
        out.append(Violation("phase_bound", f"max|phi| = {a.max():.6g} exceeds 1", loc, float(a.max())))
    r = div_residual(state.u, state.grid)
    if r > tol.div:
        out.append(Violation("divergence", f"relative divergence {r:.3e} exceeds {tol.div:.1e}", value=r))
    pm = abs(float(state.pi.mean()))
    if pm > tol.pi_mean * max(1.0, float(np.abs(state.pi).max())):
        out.append(Violation("pressure_mean", f"pressure mean {pm:.3e} is not zero", value=pm))

    rep = None
    if reference is not None or previous is not None:
        rep = energy(state, params)
    if reference is not None:
        dm = abs(rep.mass - reference.mass)
        if dm > tol.mass:
            out.append(Violation("mass", f"mean(phi) drifted by {dm:.3e}", value=dm))
    if previous is not None:
        scale = abs(reference.e_total) if reference is not None else abs(previous.e_total)
        inc = rep.e_total - previous.e_total
        if inc > tol.energy * scale:
            out.append(Violation("energy", f"energy increased by {inc:.3e}", value=inc))
    return out
