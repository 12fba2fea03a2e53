import numpy as np
import pytest

from clotflow import model
from clotflow.diagnostics import cohesive_energy, elastic_energy, energy
from clotflow.dynamics import (CFLWarning, NewtonError, SolverConfig, State, chemical_potential,
                               make_state, momentum_forcing, run, solve_cahn_hilliard, step,
                               step_regularized)
from clotflow.io import stream_velocity
from clotflow.model import ModelParams
from clotflow.ops import Grid2D, filter_velocity, inner, l2norm, project
from clotflow.verification import smooth_random_state

P = ModelParams()
G = Grid2D(16, 16, 2.0, 2.0)


def identity_psi(grid):
    X, Y = grid.mesh()
    return np.stack([X, Y])


def bumpy_state(grid=G, seed=0, u_amp=0.5):
    return smooth_random_state(grid, P, seed=seed, phi_amp=0.4, u_amp=u_amp)


def reflect_x(s: State) -> State:
    g = s.grid
    u = np.stack([-s.u[0][::-1], s.u[1][::-1]])
    psi = np.stack([g.lx - s.psi[0][::-1], s.psi[1][::-1]])
    return State(g, s.t, u, s.phi[::-1], psi, s.mu[::-1], s.pi[::-1], s.step)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(dt=0), dict(dt=1e-3, scheme="rk4"),
                                    dict(dt=1e-3, newton_max=0), dict(dt=1e-3, alpha_filter=-1),
                                    dict(dt=1e-3, linear_solver="gmres")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SolverConfig(**kw)

    def test_state_shape_check(self):
        with pytest.raises(Exception):
            State(G, 0.0, np.zeros((2, 8, 8)), np.zeros(G.shape), np.zeros((2,) + G.shape),
                  np.zeros(G.shape), np.zeros(G.shape))


class TestChemicalPotential:
    def test_zero(self):
        mu = chemical_potential(np.zeros(G.shape), np.zeros((2,) + G.shape), P, G)
        assert np.abs(mu).max() == 0

    def test_cosine_mode(self):
        X, _ = G.mesh()
        a = 0.3
        phi = a * np.cos(np.pi * X / G.lx)
        mu = chemical_potential(phi, np.zeros((2,) + G.shape), P, G)
        lam_h = -(2 / G.dx * np.sin(np.pi * G.dx / (2 * G.lx))) ** 2
        expected = -P.coeffs.sigma * lam_h * phi + model.psi_prime(phi, P.potential)
        np.testing.assert_allclose(mu, expected, atol=1e-11)

    def test_identity_psi_adds_slope(self):
        # |grad psi|^2 = 2 for the identity map, so the elastic part is lambda'(phi)
        mu0 = chemical_potential(np.zeros(G.shape), np.zeros((2,) + G.shape), P, G)
        mu1 = chemical_potential(np.zeros(G.shape), identity_psi(G), P, G)
        np.testing.assert_allclose(mu1 - mu0, P.coeffs.lambda_slope, atol=1e-12)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_variational_derivative(self, seed):
        s = bumpy_state(seed=seed)
        rng = np.random.default_rng(seed + 10)
        eta = rng.standard_normal(G.shape)

        def E(eps):
            phi = s.phi + eps * eta
            return cohesive_energy(phi, P, G) + elastic_energy(phi, s.psi, P, G)

        h = 1e-6
        fd = (E(h) - E(-h)) / (2 * h)
        mu = chemical_potential(s.phi, s.psi, P, G)
        assert fd == pytest.approx(inner(mu, eta, G), rel=1e-7)


class TestForcing:
    def test_equilibrium_zero(self):
        phi = np.full(G.shape, 0.2)
        psi = identity_psi(G)
        mu = chemical_potential(phi, psi, P, G)
        for form in ("potential", "conservative", "divergence"):
            assert np.abs(momentum_forcing(phi, mu, psi, P, G, form)).max() < 1e-12

    def test_unknown_form(self):
        z = np.zeros(G.shape)
        with pytest.raises(ValueError):
            momentum_forcing(z, z, np.zeros((2,) + G.shape), P, G, "weird")

    def test_forms_agree_after_projection(self):
        gaps = []
        for n in (16, 32, 64):
            g = Grid2D(n, n, 1.0, 1.0)
            X, Y = g.mesh()
            phi = 0.5 * np.cos(np.pi * X) * np.cos(np.pi * Y)
            psi = np.stack([X + 0.05 * np.cos(np.pi * X) * np.cos(2 * np.pi * Y),
                            Y + 0.05 * np.cos(np.pi * Y) * np.cos(np.pi * X)])
            mu = chemical_potential(phi, psi, P, g)
            proj = {f: project(momentum_forcing(phi, mu, psi, P, g, f), g, 1.0)[0]
                    for f in ("potential", "conservative", "divergence")}
            scale = l2norm(proj["potential"], g)
            gaps.append(max(l2norm(proj[a] - proj["potential"], g) / scale
                            for a in ("conservative", "divergence")))
        assert gaps[-1] < 0.05
        assert gaps[2] < 0.5 * gaps[1] < 0.25 * gaps[0]


class TestCahnHilliard:
    def test_newton_converges(self):
        s = bumpy_state()
        phi, mu, it = solve_cahn_hilliard(s.phi, s.u, s.psi, P, G, 1e-3)
        assert 1 <= it <= 10
        assert np.abs(phi).max() < 1

    def test_newton_error(self):
        s = bumpy_state()
        with pytest.raises(NewtonError) as ei:
            solve_cahn_hilliard(s.phi, s.u, s.psi, P, G, 1e-2, tol=1e-30, max_iter=2)
        assert ei.value.iterations == 2 and ei.value.residual > 0

    def test_stationary_equilibrium(self):
        from clotflow.model import equilibrium_phase
        for val in (0.0, equilibrium_phase(P.potential), -equilibrium_phase(P.potential)):
            phi = np.full(G.shape, val)
            out, mu, _ = solve_cahn_hilliard(phi, np.zeros((2,) + G.shape),
                                             np.zeros((2,) + G.shape), P, G, 1e-2)
            np.testing.assert_allclose(out, phi, atol=1e-13)


class TestStep:
    def test_stationary_state(self):
        s = make_state(G, np.zeros(G.shape), identity_psi(G), params=P)
        out = run(s, SolverConfig(dt=1e-2), P, 3)
        assert np.abs(out.phi).max() < 1e-13
        assert np.abs(out.u).max() < 1e-12
        np.testing.assert_allclose(out.psi, s.psi, atol=1e-12)
        assert out.step == 3 and out.t == pytest.approx(0.03)

    def test_mass_conserved(self):
        s = bumpy_state()
        m0 = s.phi.mean()
        out = run(s, SolverConfig(dt=1e-3), P, 5)
        assert abs(out.phi.mean() - m0) < 1e-13

    def test_divergence_free(self):
        out = step(bumpy_state(), SolverConfig(dt=1e-3), P)
        from clotflow.diagnostics import div_residual
        assert div_residual(out.u, G) < 1e-8
        assert abs(out.pi.mean()) < 1e-10

    def test_energy_decreases(self):
        s = bumpy_state(seed=3)
        cfg = SolverConfig(dt=5e-4)
        prev = energy(s, P)
        for _ in range(5):
            s = step(s, cfg, P)
            rep = energy(s, P, prev)
            assert rep.e_total <= prev.e_total + 1e-8 * abs(prev.e_total)
            prev = rep

    def test_reflection_equivariant(self):
        s = bumpy_state(seed=4)
        cfg = SolverConfig(dt=1e-3)
        a = reflect_x(step(s, cfg, P))
        b = step(reflect_x(s), cfg, P)
        for k in ("u", "phi", "psi", "mu"):
            np.testing.assert_allclose(getattr(a, k), getattr(b, k), atol=1e-9)

    def test_input_untouched(self):
        s = bumpy_state()
        c = s.copy()
        step(s, SolverConfig(dt=1e-3), P)
        for k, v in c.fields().items():
            assert np.array_equal(v, s.fields()[k])

    def test_deterministic(self):
        s = bumpy_state()
        a = step(s, SolverConfig(dt=1e-3), P)
        b = step(s, SolverConfig(dt=1e-3), P)
        assert all(np.array_equal(a.fields()[k], b.fields()[k]) for k in a.fields())

    def test_freeze_velocity(self):
        s = bumpy_state()
        out = step(s, SolverConfig(dt=1e-3, freeze_velocity=True), P)
        assert np.array_equal(out.u, s.u)

    def test_cg_matches_direct(self):
        s = bumpy_state()
        a = step(s, SolverConfig(dt=1e-3, linear_solver="cg"), P)
        b = step(s, SolverConfig(dt=1e-3, linear_solver="direct"), P)
        np.testing.assert_allclose(a.u, b.u, atol=1e-8)
        np.testing.assert_allclose(a.phi, b.phi, atol=1e-10)

    def test_cfl_warning(self):
        s = bumpy_state()
        s.u = 50 * stream_velocity(G, "vortex", 1.0)
        with pytest.warns(CFLWarning):
            step(s, SolverConfig(dt=0.05, newton_max=200), P)

    def test_explicit_dispatch(self):
        s = bumpy_state()
        out = step(s, SolverConfig(dt=1e-6, scheme="explicit_reference"), P)
        assert out.step == 1 and out.t == pytest.approx(1e-6)


class TestRegularized:
    def test_alpha_zero_matches_step(self):
        s = bumpy_state()
        cfg = SolverConfig(dt=1e-3)
        a = step(s, cfg, P)
        b = step_regularized(s, cfg, P, 0.0, P.potential.xi)
        assert all(np.array_equal(a.fields()[k], b.fields()[k]) for k in a.fields())

    def test_filtered_velocity_not_larger(self):
        u = bumpy_state().u
        for alpha in (0.01, 0.1, 1.0):
            assert l2norm(filter_velocity(u, G, alpha, passes=2), G) <= l2norm(u, G) * (1 + 1e-12)

    def test_mass_with_filter(self):
        s = bumpy_state()
        out = step_regularized(s, SolverConfig(dt=1e-3), P, 0.1, 1e-3)
        assert abs(out.phi.mean() - s.phi.mean()) < 1e-13

    @pytest.mark.parametrize("alpha,xi", [(-0.1, 1e-3), (0.1, 0.0)])
    def test_invalid(self, alpha, xi):
        with pytest.raises(ValueError):
            step_regularized(bumpy_state(), SolverConfig(dt=1e-3), P, alpha, xi)
