"""Command-line entry point.

Exit codes: 0 ok, 2 usage, 3 config, 4 solver (or invariant violations for
``check``), 5 io. Failures print one line ``error: <kind>: <message>`` on stderr.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import diagnostics, io
from .dynamics import NewtonError, step
from .model import ModelParams
from .ops import LinearSolverError

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4, 5

log = logging.getLogger("clotflow")


class CLIError(Exception):
    def __init__(self, kind, message, code):
        super().__init__(message)
        self.kind = kind
        self.code = code


def _fail(kind, msg, code):
    print(f"error: {kind}: {msg}", file=sys.stderr)
    return code


def cmd_run(args) -> int:
    cfg = io.load_config(args.config)
    out = Path(args.output or cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise io.SnapshotError(f"cannot create output directory {out}: {e.strerror}") from None
    params = cfg.params
    log.info("viscosity contrast |nu1 - nu2| / (nu1 + nu2) = %.4g", params.coeffs.viscosity_contrast)
    if args.resume:
        state = io.read_snapshot(args.resume)
        if state.grid != cfg.grid:
            raise CLIError("config", "snapshot grid does not match the configuration", EXIT_CONFIG)
    else:
        state = io.initial_state(cfg)
    nsteps = cfg.nsteps - state.step
    if args.steps is not None:
        nsteps = min(nsteps, args.steps)
    ref = diagnostics.energy(state, params)
    prev = ref
    nviol = 0
    with io.CSVWriter(out / "diagnostics.csv", diagnostics.EnergyReport.columns(),
                      append=bool(args.resume)) as w:
        if not args.resume:
            w.write(ref.row())
            io.write_snapshot(state, out / f"snap_{state.step:06d}.tfld")
        for _ in range(nsteps):
            try:
                state = step(state, cfg.solver, params)
            except (NewtonError, LinearSolverError) as e:
                raise CLIError("solver", f"step {state.step + 1}: {e}", EXIT_SOLVER) from None
            rep = diagnostics.energy(state, params, prev)
            v = diagnostics.validate(state, params, previous=prev, reference=ref)
            for item in v:
                log.warning("step %d: %s", state.step, item)
            nviol += len(v)
            prev = rep
            if state.step % cfg.cadence == 0:
                w.write(rep.row())
            if cfg.snapshot_every and state.step % cfg.snapshot_every == 0:
                io.write_snapshot(state, out / f"snap_{state.step:06d}.tfld")
    io.write_snapshot(state, out / "final.tfld")
    print(f"ok steps={state.step} t={state.t!r} e_total={prev.e_total!r} violations={nviol}")
    return EXIT_OK


def cmd_check(args) -> int:
    state = io.read_snapshot(args.snapshot)
    params = io.load_config(args.config).params if args.config else ModelParams()
    viol = diagnostics.validate(state, params)
    for v in viol:
        print(v)
    if viol:
        return _fail("check", f"{len(viol)} invariant violation(s) in {args.snapshot}", EXIT_SOLVER)
    print("ok")
    return EXIT_OK


def cmd_convergence(args) -> int:
    from .verification import manufactured_solution_study
    kinds = ["space", "time"] if args.kind == "both" else [args.kind]
    if args.subproblem == "stokes":
        kinds = ["space"]
    for kind in kinds:
        tab = manufactured_solution_study(args.subproblem, levels=tuple(args.levels), kind=kind)
        print(tab.format())
        if args.csv:
            tab.write_csv(Path(args.csv).with_suffix(f".{kind}.csv"))
    return EXIT_OK


def cmd_cascade(args) -> int:
    from .verification import cascade_study
    cfg = io.load_config(args.config)
    t_end = args.t_end or cfg.t_end
    res = cascade_study(io.initial_state(cfg), cfg.solver, cfg.params, t_end,
                        alphas=tuple(args.alphas), xis=tuple(args.xis))
    rows = [("alpha", a, d) for a, d in res["alpha"]] + [("xi", x, d) for x, d in res["xi"]]
    for kind, val, d in rows:
        print(f"{kind:>6} {val:12.4e} {d:14.6e}")
    if args.csv:
        import csv
        with open(args.csv, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["parameter", "value", "distance"])
            wr.writerows([[k, repr(v), repr(d)] for k, v, d in rows])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clotflow", description="thrombus phase-field flow solver")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a simulation from a TOML config")
    r.add_argument("config")
    r.add_argument("--resume", metavar="SNAPSHOT")
    r.add_argument("--output", metavar="DIR", help="override run.output_dir")
    r.add_argument("--steps", type=int, help="stop after at most this many steps")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("check", help="validate a snapshot against the state invariants")
    c.add_argument("snapshot")
    c.add_argument("--config")
    c.set_defaults(func=cmd_check)

    v = sub.add_parser("convergence", help="manufactured-solution convergence study")
    v.add_argument("subproblem", choices=["heat", "cahn_hilliard", "stokes"])
    v.add_argument("--kind", choices=["space", "time", "both"], default="both")
    v.add_argument("--levels", type=int, nargs="+", default=[16, 32, 64])
    v.add_argument("--csv")
    v.set_defaults(func=cmd_convergence)

    k = sub.add_parser("cascade", help="regularization cascade in alpha and xi")
    k.add_argument("config")
    k.add_argument("--alphas", type=float, nargs="+", default=[0.1, 0.05, 0.025])
    k.add_argument("--xis", type=float, nargs="+", default=[1e-2, 1e-3, 1e-4])
    k.add_argument("--t-end", type=float)
    k.add_argument("--csv")
    k.set_defaults(func=cmd_cascade)
    return p


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except io.ConfigError as e:
        return _fail("config", str(e), EXIT_CONFIG)
    except io.SnapshotError as e:
        return _fail("io", str(e), EXIT_IO)
    except CLIError as e:
        return _fail(e.kind, str(e), e.code)
    except (NewtonError, LinearSolverError) as e:
        return _fail("solver", str(e), EXIT_SOLVER)
    except ValueError as e:
        if args.command == "convergence" or args.command == "cascade":
            return _fail("usage", str(e), EXIT_USAGE)
        raise


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
