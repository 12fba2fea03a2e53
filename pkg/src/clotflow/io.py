"""Run configuration (TOML), initial-condition presets, binary snapshots and CSV output.

Config schema (all sections and keys optional unless noted)::

    [grid]    nx, ny (int >= 8), lx, ly (> 0)
    [model]   theta, theta0, xi, gamma, nu1, nu2, lambda_star, lambda_slope,
              k_star, k_slope, sigma, lambda_poly (array, increasing degree)
    [solver]  dt, newton_tol, newton_max, scheme, use_potential_form_forcing,
              alpha_filter, linear_solver, freeze_velocity, stabilize
    [run]     t_end (required), cadence, snapshot_every, output_dir, seed
    [initial.phi]  preset = constant | cosine_mode | tanh_interface | random_spinodal | thrombus_blob
    [initial.psi]  preset = constant | identity
    [initial.u]    preset = zero | shear | vortex
"""
from __future__ import annotations

import csv
import re
import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import SolverConfig, State, chemical_potential
from .model import CoefficientParams, ModelParams, PotentialParams
from .ops import Grid2D, project

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

MAGIC = b"TFLD1"
VERSION = 1
_HEADER = struct.Struct("<5sIIIQddd")
FIELD_ORDER = ("u_x", "u_y", "phi", "psi_x", "psi_y", "mu", "pi")


class ConfigError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        self.message = message
        super().__init__(f"line {line}: {message}" if line else message)


class SnapshotError(OSError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

_SCHEMA = {
    "grid": {"nx": int, "ny": int, "lx": float, "ly": float},
    "model": {"theta": float, "theta0": float, "xi": float, "gamma": float, "nu1": float,
              "nu2": float, "lambda_star": float, "lambda_slope": float, "k_star": float,
              "k_slope": float, "sigma": float, "lambda_poly": list},
    "solver": {"dt": float, "newton_tol": float, "newton_max": int, "scheme": str,
               "use_potential_form_forcing": bool, "alpha_filter": float, "linear_solver": str,
               "freeze_velocity": bool, "stabilize": bool},
    "run": {"t_end": float, "cadence": int, "snapshot_every": int, "output_dir": str, "seed": int},
}

_PRESETS = {
    "phi": {
        "constant": {"value": float},
        "cosine_mode": {"k": int, "amplitude": float, "mean": float, "direction": str},
        "tanh_interface": {"width": float, "orientation": str, "position": float},
        "random_spinodal": {"amplitude": float, "mean": float, "seed": int},
        "thrombus_blob": {"radius": float, "center": list, "width": float, "amplitude": float},
    },
    "psi": {"constant": {"value": list}, "identity": {}},
    "u": {"zero": {}, "shear": {"amplitude": float}, "vortex": {"amplitude": float}},
}

_DEFAULT_INITIAL = {"phi": {"preset": "random_spinodal", "amplitude": 0.05},
                    "psi": {"preset": "identity"}, "u": {"preset": "zero"}}


def _line_of(text: str, section: str | None, key: str | None) -> int | None:
    """1-based line of ``key`` inside ``[section]`` (or of the header)."""
    lines = text.splitlines()
    cur = None
    for n, ln in enumerate(lines, 1):
        s = ln.strip()
        m = re.match(r"^\[\s*([^\]]+?)\s*\]", s)
        if m:
            cur = m.group(1).replace(" ", "")
            if key is None and cur == section:
                return n
            continue
        if key is not None and cur == section and re.match(rf"^{re.escape(key)}\s*=", s):
            return n
    return None


def _typed(value, typ, where, text, section, key):
    ok = {int: lambda v: isinstance(v, int) and not isinstance(v, bool),
          float: lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
          bool: lambda v: isinstance(v, bool),
          str: lambda v: isinstance(v, str),
          list: lambda v: isinstance(v, list)}[typ]
    if not ok(value):
        raise ConfigError(f"{where}: expected {typ.__name__}, got {type(value).__name__}",
                          _line_of(text, section, key))
    return float(value) if typ is float else value


@dataclass
class RunConfig:
    grid: Grid2D
    params: ModelParams
    solver: SolverConfig
    t_end: float
    cadence: int = 1
    snapshot_every: int = 0
    output_dir: str = "out"
    seed: int = 0
    initial: dict = field(default_factory=lambda: {k: dict(v) for k, v in _DEFAULT_INITIAL.items()})

    @property
    def nsteps(self) -> int:
        return int(round(self.t_end / self.solver.dt))


def parse_config(text: str) -> RunConfig:
    """Parse and validate a TOML run configuration; errors carry a line number."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        m = re.search(r"line (\d+)", str(e))
        raise ConfigError(f"syntax error: {e}", int(m.group(1)) if m else None) from None

    vals: dict = {}
    for sec, body in raw.items():
        if sec == "initial":
            continue
        if sec not in _SCHEMA:
            raise ConfigError(f"unknown section [{sec}]", _line_of(text, sec, None))
        if not isinstance(body, dict):
            raise ConfigError(f"{sec} must be a section", _line_of(text, None, sec))
        for k, v in body.items():
            if k not in _SCHEMA[sec]:
                raise ConfigError(f"unknown key {sec}.{k}", _line_of(text, sec, k))
            vals[(sec, k)] = _typed(v, _SCHEMA[sec][k], f"{sec}.{k}", text, sec, k)

    def get(sec, key, default):
        return vals.get((sec, key), default)

    def guarded(sec, keys, build):
        try:
            return build()
        except (ValueError, TypeError) as e:
            line = None
            for k in keys:
                if (sec, k) in vals:
                    line = _line_of(text, sec, k)
                    break
            raise ConfigError(str(e), line) from None

    grid = guarded("grid", ["nx", "ny", "lx", "ly"], lambda: Grid2D(
        get("grid", "nx", 64), get("grid", "ny", 64), get("grid", "lx", 10.0), get("grid", "ly", 10.0)))
    pot = guarded("model", ["theta0", "theta", "xi", "gamma"], lambda: PotentialParams(
        **{k: get("model", k, d) for k, d in
           (("theta", 1.0), ("theta0", 2.0), ("xi", 1e-4), ("gamma", 0.5))}))
    co = guarded("model", ["nu1", "nu2", "lambda_star", "lambda_slope", "k_star", "k_slope", "sigma"],
                 lambda: CoefficientParams(
                     **{k: get("model", k, d) for k, d in
                        (("nu1", 1.0), ("nu2", 1.5), ("lambda_star", 1.0), ("lambda_slope", 0.5),
                         ("k_star", 0.5), ("k_slope", 0.5), ("sigma", 1.0))},
                     alpha_filter=get("solver", "alpha_filter", 0.0)))
    lp = get("model", "lambda_poly", None)
    if lp is not None:
        if not lp or not all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in lp):
            raise ConfigError("model.lambda_poly must be a non-empty list of numbers",
                              _line_of(text, "model", "lambda_poly"))
        lp = tuple(float(c) for c in lp)
    params = ModelParams(pot, co, lp)
    if lp is not None:
        s = np.linspace(-1, 1, 201)
        if np.any(params.lam(s) <= 0) or np.any(params.lam.second(s) < -1e-12):
            raise ConfigError("lambda_poly must be positive and convex on [-1, 1]",
                              _line_of(text, "model", "lambda_poly"))
    skeys = [k for k in _SCHEMA["solver"]]
    solver = guarded("solver", skeys, lambda: SolverConfig(
        dt=get("solver", "dt", 1e-4),
        **{k: vals[("solver", k)] for k in skeys if k != "dt" and ("solver", k) in vals}))

    if ("run", "t_end") not in vals:
        raise ConfigError("run.t_end is required", _line_of(text, "run", None))
    t_end = vals[("run", "t_end")]
    if not t_end > 0:
        raise ConfigError("run.t_end must be positive", _line_of(text, "run", "t_end"))
    cadence = get("run", "cadence", 1)
    if cadence < 1:
        raise ConfigError("run.cadence must be >= 1", _line_of(text, "run", "cadence"))
    snap = get("run", "snapshot_every", 0)
    if snap < 0:
        raise ConfigError("run.snapshot_every must be >= 0", _line_of(text, "run", "snapshot_every"))

    initial = {k: dict(v) for k, v in _DEFAULT_INITIAL.items()}
    raw_init = raw.get("initial", {})
    if not isinstance(raw_init, dict):
        raise ConfigError("initial must be a section", _line_of(text, None, "initial"))
    for name, spec in raw_init.items():
        sec = f"initial.{name}"
        if name not in _PRESETS or not isinstance(spec, dict):
            raise ConfigError(f"unknown initial-condition field {name!r}", _line_of(text, sec, None))
        preset = spec.get("preset")
        if preset not in _PRESETS[name]:
            raise ConfigError(f"{sec}.preset must be one of {sorted(_PRESETS[name])}",
                              _line_of(text, sec, "preset") or _line_of(text, sec, None))
        out = {"preset": preset}
        for k, v in spec.items():
            if k == "preset":
                continue
            if k not in _PRESETS[name][preset]:
                raise ConfigError(f"unknown key {sec}.{k} for preset {preset}", _line_of(text, sec, k))
            out[k] = _typed(v, _PRESETS[name][preset][k], f"{sec}.{k}", text, sec, k)
        initial[name] = out

    cfg = RunConfig(grid, params, solver, t_end, cadence, snap,
                    get("run", "output_dir", "out"), get("run", "seed", 0), initial)
    try:
        phi = initial_phi(cfg)
    except ValueError as e:
        raise ConfigError(str(e), _line_of(text, "initial.phi", None)) from None
    check_initial_phi(phi, params, text)
    for name, fn in (("psi", initial_psi), ("u", initial_velocity)):
        try:
            fn(cfg)
        except ValueError as e:
            raise ConfigError(str(e), _line_of(text, f"initial.{name}", None)) from None
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise SnapshotError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text)


def check_initial_phi(phi, params: ModelParams, text: str = ""):
    bound = 1.0 - params.potential.xi
    m = float(np.abs(phi).max())
    if not m <= bound:
        raise ConfigError(f"initial phi violates max|phi0| <= 1 - xi ({m:.6g} > {bound:.6g})",
                          _line_of(text, "initial.phi", None))
    if not abs(phi.mean()) < 1:
        raise ConfigError("initial phi must have |mean| < 1", _line_of(text, "initial.phi", None))


# ---------------------------------------------------------------------------
# initial conditions
# ---------------------------------------------------------------------------

def initial_phi(cfg: RunConfig) -> np.ndarray:
    spec = dict(cfg.initial["phi"])
    g = cfg.grid
    X, Y = g.mesh()
    kind = spec.pop("preset")
    if kind == "constant":
        return np.full(g.shape, spec.get("value", 0.0))
    if kind == "cosine_mode":
        k = spec.get("k", 2)
        if spec.get("direction", "x") == "x":
            mode = np.cos(k * np.pi * X / g.lx)
        elif spec["direction"] == "y":
            mode = np.cos(k * np.pi * Y / g.ly)
        else:
            raise ValueError("cosine_mode direction must be 'x' or 'y'")
        return spec.get("mean", 0.0) + spec.get("amplitude", 1e-3) * mode
    if kind == "tanh_interface":
        w = spec.get("width", 0.5)
        if not w > 0:
            raise ValueError("tanh_interface width must be positive")
        pos = spec.get("position", 0.5)
        o = spec.get("orientation", "x")
        if o not in ("x", "y"):
            raise ValueError("tanh_interface orientation must be 'x' or 'y'")
        d = X - pos * g.lx if o == "x" else Y - pos * g.ly
        return 0.9 * np.tanh(d / (np.sqrt(2.0) * w))
    if kind == "random_spinodal":
        rng = np.random.default_rng(spec.get("seed", cfg.seed))
        return spec.get("mean", 0.0) + spec.get("amplitude", 0.05) * rng.uniform(-1.0, 1.0, g.shape)
    if kind == "thrombus_blob":
        r0 = spec.get("radius", 0.25 * min(g.lx, g.ly))
        c = spec.get("center", [0.5 * g.lx, 0.5 * g.ly])
        w = spec.get("width", 0.5)
        a = spec.get("amplitude", 0.9)
        if not (r0 > 0 and w > 0) or len(c) != 2:
            raise ValueError("thrombus_blob needs positive radius/width and a 2-element center")
        r = np.hypot(X - c[0], Y - c[1])
        # phi ~ -a inside the clot, +a in the surrounding blood
        return a * np.tanh((r - r0) / (np.sqrt(2.0) * w))
    raise ValueError(f"unknown phi preset {kind!r}")


def initial_psi(cfg: RunConfig) -> np.ndarray:
    spec = cfg.initial["psi"]
    g = cfg.grid
    if spec["preset"] == "constant":
        v = spec.get("value", [0.0, 0.0])
        if len(v) != 2:
            raise ValueError("psi constant value needs two components")
        return np.stack([np.full(g.shape, float(v[0])), np.full(g.shape, float(v[1]))])
    X, Y = g.mesh()
    # curl of (y, -x) is the identity deformation gradient
    return np.stack([Y - 0.5 * g.ly, -(X - 0.5 * g.lx)])


def stream_velocity(grid: Grid2D, kind: str, amplitude: float) -> np.ndarray:
    """Projected velocity from a wall-compatible stream function, scaled to max|u| = amplitude."""
    X, Y = grid.mesh()
    ax, ay = np.pi / grid.lx, np.pi / grid.ly
    my = 1 if kind == "vortex" else 2
    sx, cx = np.sin(ax * X), np.cos(ax * X)
    sy, cy = np.sin(my * ay * Y), np.cos(my * ay * Y)
    # s = sin^2(ax x) sin^2(my ay y);  u = (ds/dy, -ds/dx)
    u = np.stack([sx ** 2 * 2 * my * ay * sy * cy, -2 * ax * sx * cx * sy ** 2])
    u *= amplitude / np.abs(u).max()
    return project(u, grid)[0]


def initial_velocity(cfg: RunConfig) -> np.ndarray:
    spec = cfg.initial["u"]
    g = cfg.grid
    if spec["preset"] == "zero":
        return np.zeros((2,) + g.shape)
    return stream_velocity(g, spec["preset"], spec.get("amplitude", 1.0))


def initial_state(cfg: RunConfig) -> State:
    g = cfg.grid
    phi = initial_phi(cfg)
    psi = initial_psi(cfg)
    u = initial_velocity(cfg)
    mu = chemical_potential(phi, psi, cfg.params, g)
    return State(g, 0.0, u, phi, psi, mu, np.zeros(g.shape))


# ---------------------------------------------------------------------------
# snapshots and CSV
# ---------------------------------------------------------------------------

def snapshot_size(nx: int, ny: int) -> int:
    return _HEADER.size + 7 * 8 * nx * ny


def write_snapshot(state: State, path) -> None:
    g = state.grid
    head = _HEADER.pack(MAGIC, VERSION, g.nx, g.ny, state.step, g.lx, g.ly, state.t)
    body = b"".join(np.ascontiguousarray(f, dtype="<f8").tobytes() for f in state.fields().values())
    try:
        Path(path).write_bytes(head + body)
    except OSError as e:
        raise SnapshotError(f"cannot write snapshot {path}: {e.strerror}") from None


def read_snapshot(path) -> State:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise SnapshotError(f"cannot read snapshot {path}: {e.strerror}") from None
    if len(data) < _HEADER.size:
        raise SnapshotError(f"truncated snapshot: expected at least {_HEADER.size} bytes, got {len(data)}")
    magic, version, nx, ny, step, lx, ly, t = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise SnapshotError(f"bad magic {magic!r}: not a snapshot file")
    if version != VERSION:
        raise SnapshotError(f"unsupported snapshot version {version} (expected {VERSION})")
    want = snapshot_size(nx, ny)
    if len(data) != want:
        raise SnapshotError(f"truncated snapshot: expected {want} bytes, got {len(data)}")
    try:
        g = Grid2D(nx, ny, lx, ly)
    except ValueError as e:
        raise SnapshotError(f"invalid snapshot header: {e}") from None
    arr = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).astype(float).reshape(7, nx, ny)
    f = dict(zip(FIELD_ORDER, arr))
    return State(g, t, np.stack([f["u_x"], f["u_y"]]), f["phi"].copy(),
                 np.stack([f["psi_x"], f["psi_y"]]), f["mu"].copy(), f["pi"].copy(), int(step))


class CSVWriter:
    """Diagnostics time series, one row per report, exact float repr."""

    def __init__(self, path, columns, append=False):
        self.path = Path(path)
        exists = append and self.path.exists()
        try:
            self._fh = open(self.path, "a" if exists else "w", newline="")
        except OSError as e:
            raise SnapshotError(f"cannot open {path}: {e.strerror}") from None
        self._w = csv.writer(self._fh)
        if not exists:
            self._w.writerow(columns)

    def write(self, row):
        self._w.writerow([repr(float(v)) for v in row])

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]])
