"""End-to-end acceptance checks, one test per criterion.

Each test prints a one-line verdict (also collected into the terminal summary)
before asserting.
"""
import time
from dataclasses import dataclass, field

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES

from clotflow import model
from clotflow.cli import cli_main
from clotflow.diagnostics import energy
from clotflow.dynamics import step
from clotflow.io import initial_state, parse_config
from clotflow.model import ModelParams, PotentialParams
from clotflow.ops import Grid2D, filter_scalar, filter_velocity, l2norm
from clotflow.transport import advect_psi, backtrack
from clotflow.verification import (cascade_study, manufactured_solution_study,
                                   measure_spinodal_rate, oracle_equivalence,
                                   spinodal_growth_oracle)

pytestmark = pytest.mark.slow


def verdict(n, name, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {name} ({detail})"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


SPINODAL = """
[grid]
nx = 64
ny = 64
[solver]
dt = 1e-4
[run]
t_end = 0.02
seed = 1
[initial.phi]
preset = "random_spinodal"
amplitude = 0.05
"""

BLOB = """
[grid]
nx = 64
ny = 64
[solver]
dt = 1e-4
[run]
t_end = 0.05
[initial.phi]
preset = "thrombus_blob"
amplitude = 0.9
"""

SHEAR = SPINODAL + """
[initial.u]
preset = "shear"
amplitude = 1.0
"""


@dataclass
class Trace:
    nsteps: int = 0
    mass_drift: list = field(default_factory=list)
    max_phi: list = field(default_factory=list)
    energy_jump: list = field(default_factory=list)
    div: list = field(default_factory=list)
    e0: float = 0.0
    seconds: float = 0.0


def run_scenario(text):
    cfg = parse_config(text)
    s = initial_state(cfg)
    params = cfg.params
    prev = energy(s, params)
    tr = Trace(e0=prev.e_total)
    m0 = s.phi.mean()
    tic = time.perf_counter()
    for _ in range(cfg.nsteps):
        s = step(s, cfg.solver, params)
        rep = energy(s, params, prev)
        tr.mass_drift.append(abs(s.phi.mean() - m0))
        tr.max_phi.append(rep.max_abs_phi)
        tr.energy_jump.append(rep.e_total - prev.e_total)
        tr.div.append(rep.div_residual)
        prev = rep
        tr.nsteps += 1
    tr.seconds = time.perf_counter() - tic
    return tr


@pytest.fixture(scope="module")
def spinodal():
    return run_scenario(SPINODAL)


@pytest.fixture(scope="module")
def blob():
    return run_scenario(BLOB)


@pytest.fixture(scope="module")
def shear():
    return run_scenario(SHEAR)


def test_1_mass(spinodal):
    worst = max(spinodal.mass_drift)
    verdict(1, "mass conservation", spinodal.nsteps == 200 and worst <= 1e-12,
            f"{spinodal.nsteps} steps, max |mean drift| = {worst:.2e}")


def test_2_phase_bound(spinodal):
    # a Newton failure would have raised inside the fixture
    worst = max(spinodal.max_phi)
    verdict(2, "phase bound", worst < 1, f"max |phi| = {worst:.6f}")


def test_3_separation(blob):
    margin = min(1 - m for m in blob.max_phi)
    verdict(3, "strict separation", margin >= 1e-3, f"min(1 - max|phi|) = {margin:.4e}")


def test_4_energy(spinodal, blob, shear):
    parts = []
    ok = True
    for name, tr in (("spinodal", spinodal), ("blob", blob), ("shear", shear)):
        worst = max(tr.energy_jump) / abs(tr.e0)
        ok &= worst <= 1e-8
        parts.append(f"{name} {worst:.1e}")
    # degenerate run: no flow, Cahn-Hilliard only
    cfg = parse_config(SPINODAL.replace("dt = 1e-4", "dt = 1e-4\nfreeze_velocity = true"))
    s = initial_state(cfg)
    prev = energy(s, cfg.params)
    e0 = abs(prev.e_total)
    worst_ch = -np.inf
    for _ in range(50):
        s = step(s, cfg.solver, cfg.params)
        rep = energy(s, cfg.params, prev)
        worst_ch = max(worst_ch, rep.energy_residual / e0)
        prev = rep
    ok &= worst_ch <= 1e-8
    parts.append(f"pure CH residual {worst_ch:.1e}")
    verdict(4, "energy dissipation", ok, "max increase / E0: " + ", ".join(parts))


def test_5_transport_max_principle():
    g = Grid2D(32, 32, 1.0, 1.0)
    rng = np.random.default_rng(2024)
    worst = -np.inf
    for _ in range(50):
        u = rng.uniform(-5, 5, (2,) + g.shape)
        psi = rng.standard_normal((2,) + g.shape) * rng.uniform(0.1, 10)
        dt = rng.uniform(1e-3, 0.2)
        out = advect_psi(psi, backtrack(u, g, dt))
        worst = max(worst, np.abs(out).max() - np.abs(psi).max())
    verdict(5, "transport maximum principle", worst <= 0, f"max(|psi1| - |psi0|) = {worst:.2e}")


def test_6_divergence(spinodal, blob, shear):
    worst = max(max(t.div) for t in (spinodal, blob, shear))
    verdict(6, "divergence-free", worst <= 1e-8, f"max relative ||div u|| = {worst:.2e}")


def test_7_filters():
    g = Grid2D(32, 32, 1.0, 1.0)
    rng = np.random.default_rng(7)
    worst2 = worstinf = worstv = -np.inf
    for alpha in (0.01, 0.1, 1.0):
        for _ in range(100):
            f = rng.standard_normal(g.shape) * rng.uniform(0.1, 10)
            h = filter_scalar(f, g, alpha)
            worst2 = max(worst2, l2norm(h, g) / l2norm(f, g))
            worstinf = max(worstinf, np.abs(h).max() / np.abs(f).max())
        for _ in range(10):
            v = rng.standard_normal((2,) + g.shape)
            worstv = max(worstv, l2norm(filter_velocity(v, g, alpha), g) / l2norm(v, g))
    ok = worst2 <= 1 and worstinf <= 1 and worstv <= 1
    verdict(7, "filter non-expansivity", ok,
            f"max ratios L2 {worst2:.4f}, Linf {worstinf:.4f}, velocity L2 {worstv:.4f}")


def test_8_spinodal_rate():
    params = ModelParams()
    rate, kappa, amp = measure_spinodal_rate(params)
    r = spinodal_growth_oracle(kappa, params)
    rel = abs(rate - r) / abs(r)
    verdict(8, "spinodal growth rate", rel <= 0.05 and amp < 1e-2,
            f"measured {rate:.5f}, predicted {r:.5f}, rel err {rel:.2%}, max amplitude {amp:.2e}")


def test_9_oracle_equivalence():
    tab = oracle_equivalence()
    slope = tab.order("max")
    verdict(9, "oracle equivalence", 0.8 <= slope <= 1.2,
            f"discrepancies {', '.join(f'{e:.2e}' for e in tab.errors['max'])}, slope {slope:.3f}")


def test_10_manufactured_orders():
    res = {}
    for sub in ("heat", "cahn_hilliard"):
        res[f"{sub} space"] = manufactured_solution_study(sub, kind="space").order("phi_l2")
        res[f"{sub} time"] = manufactured_solution_study(sub, kind="time").order("phi_l2")
    res["stokes space"] = manufactured_solution_study("stokes", kind="space").order("u_l2")
    ok = all(1.9 <= res[f"{s} space"] <= 2.1 and 0.9 <= res[f"{s} time"] <= 1.1
             for s in ("heat", "cahn_hilliard")) and res["stokes space"] >= 1.5
    verdict(10, "manufactured-solution orders", ok,
            ", ".join(f"{k} {v:.3f}" for k, v in res.items()))


CASCADE = """
[grid]
nx = 32
ny = 32
[solver]
dt = 1e-3
[run]
t_end = 0.1
[initial.phi]
preset = "thrombus_blob"
amplitude = 0.9
[initial.u]
preset = "shear"
amplitude = 1.0
"""


def test_11_cascade():
    cfg = parse_config(CASCADE)
    res = cascade_study(initial_state(cfg), cfg.solver, cfg.params, cfg.t_end)
    da = [d for _, d in res["alpha"]]
    dx = [d for _, d in res["xi"]]
    ok = all(b < a for a, b in zip(da, da[1:])) and max(dx) <= 1e-12
    verdict(11, "regularization cascade", ok,
            f"alpha distances {', '.join(f'{d:.3e}' for d in da)}; xi distances max {max(dx):.1e}")


def test_12_potential_family():
    rng = np.random.default_rng(12)
    ok = True
    worst = {}
    for xi in (1e-2, 1e-4):
        p = PotentialParams(xi=xi)
        inner = rng.uniform(-1 + xi, 1 - xi, 1000)
        closed = rng.uniform(-1, 1, 1000)
        wide = rng.uniform(-3, 3, 1000)
        eq = np.abs(model.f_xi(inner, p) - model.f_value(inner, p)).max()
        below = (model.f_xi(closed, p) - model.f_value(closed, p)).max()
        conv = (model.f_xi(wide, p, 2)).min() - p.theta
        pos = model.f_xi(wide, p).min()
        worst[xi] = (eq, below, conv, pos)
        ok &= eq == 0 and below <= 0 and conv >= 0 and pos >= 0
    detail = "; ".join(f"xi={xi:g}: |F_xi-F| {w[0]:.1e}, max F_xi-F {w[1]:.1e}, "
                       f"min F_xi''-theta {w[2]:.2e}, min F_xi {w[3]:.2e}" for xi, w in worst.items())
    verdict(12, "potential family", ok, detail)


DETERMINISM = """
[grid]
nx = 32
ny = 32
[solver]
dt = 1e-4
[run]
t_end = 0.002
snapshot_every = 10
seed = 3
[initial.phi]
preset = "random_spinodal"
amplitude = 0.05
[initial.u]
preset = "vortex"
amplitude = 0.5
"""


def test_13_determinism_and_resume(tmp_path):
    cfgp = tmp_path / "run.toml"
    cfgp.write_text(DETERMINISM)
    codes = [cli_main(["run", str(cfgp), "--output", str(tmp_path / d)]) for d in ("a", "b")]
    same = all((tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
               for n in ("final.tfld", "diagnostics.csv", "snap_000010.tfld"))
    part = tmp_path / "part"
    codes.append(cli_main(["run", str(cfgp), "--output", str(part), "--steps", "10"]))
    codes.append(cli_main(["run", str(cfgp), "--output", str(part), "--resume",
                           str(part / "snap_000010.tfld")]))
    resumed = all((tmp_path / "a" / n).read_bytes() == (part / n).read_bytes()
                  for n in ("final.tfld", "diagnostics.csv"))
    verdict(13, "determinism and resume", codes == [0] * 4 and same and resumed,
            f"exit codes {codes}, rerun identical {same}, resume identical {resumed}")
