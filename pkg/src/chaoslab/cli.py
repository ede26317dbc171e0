"""Command-line front end.

Subcommands: validate, simulate, solve, entropy, study, liouville, rate.
Exit codes: 0 success, 1 validation failure, 2 runtime failure, 64 usage
error (unknown flag, preset, or config key).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .fields import DensityField
from .harness import (ConfigError, StudyConfig, fit_rate, liouville_study,
                      make_initial_field, run_study)
from .model import (CoefficientSet, InitialDensity, KernelSpec,
                    UnknownPresetError, builtin, probe_plan, validate)
from .sde import TimeGrid, export_binary, export_csv, make_bundle, \
    simulate_particles
from .spde import picard_solve

EX_USAGE = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EX_USAGE)


def _build_parser() -> _Parser:
    p = _Parser(prog="chaoslab")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="run structural coefficient checks")
    v.add_argument("--preset", required=True)
    v.add_argument("--tol", type=float, default=1e-6)

    for name in ("simulate", "solve", "study", "liouville"):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True)
        s.add_argument("--out", default=None)

    r = sub.add_parser("rate", help="fit a log-log slope to (N, value) points")
    r.add_argument("--input", required=True)
    return p


def _load_points(path):
    pts = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line[0].isalpha():
                continue
            a, b = line.split(",")[:2]
            pts.append((float(a), float(b)))
    return pts


def _cmd_validate(args) -> int:
    obj = builtin(args.preset)
    if isinstance(obj, CoefficientSet):
        report = validate(obj, None, probe_plan(obj.d), tol=args.tol)
        for c in report.checks:
            print(f"{c.name}: {'pass' if c.passed else 'FAIL'} "
                  f"(worst {c.worst:.3e})")
        return 0 if report.passed else 1
    if isinstance(obj, KernelSpec):
        probes = np.random.default_rng(0).uniform(-5, 5, (1000, obj.dim))
        worst = float(np.abs(obj(probes)).max())
        ok = worst <= obj.sup_norm * (1 + 1e-9) + 1e-12
        print(f"sup-norm bound: {'pass' if ok else 'FAIL'} "
              f"(observed {worst:.6g}, declared {obj.sup_norm:.6g})")
        return 0 if ok else 1
    if isinstance(obj, InitialDensity):
        x = np.linspace(-40, 40, 20001)
        mass = float(np.trapezoid(obj.pdf(x), x))
        ok = abs(mass - 1.0) <= args.tol
        print(f"mass: {'pass' if ok else 'FAIL'} ({mass:.12g})")
        return 0 if ok else 1
    print(f"preset {args.preset!r} is not a validatable object")
    return 1


def _cmd_simulate(args) -> int:
    cfg = StudyConfig.from_toml(args.config)
    kernel, coeffs, init = cfg.resolve()
    grid = TimeGrid(cfg.T, cfg.steps)
    N = cfg.n_list[0]
    bundle = make_bundle(grid, N, (coeffs.dims[1], coeffs.dims[2]),
                         cfg.master_seed)
    traj = simulate_particles(kernel, coeffs, init, bundle, grid)
    out = Path(args.out or "simulate_out")
    out.mkdir(parents=True, exist_ok=True)
    export_binary(traj, out / "trajectory.bin")
    export_csv(traj, out / "trajectory.csv")
    print(f"simulated N={N} for {cfg.steps} steps -> {out}")
    return 0


def _cmd_solve(args) -> int:
    cfg = StudyConfig.from_toml(args.config)
    kernel, coeffs, init = cfg.resolve()
    grid = TimeGrid(cfg.T, cfg.steps)
    bundle = make_bundle(grid, 1, (coeffs.dims[1], coeffs.dims[2]),
                         cfg.master_seed)
    rho0 = make_initial_field(init, cfg.box, cfg.cells)
    sol = picard_solve(kernel, coeffs, rho0, bundle.W, grid,
                       tol=cfg.picard_tol, max_iter=cfg.picard_max_iter,
                       err_rate=cfg.err_rate)
    out = Path(args.out or "solve_out")
    out.mkdir(parents=True, exist_ok=True)
    sol.diagnostics_csv(out / "diagnostics.csv", grid.dt)
    final = sol.fields[-1]
    with open(out / "final_density.csv", "w") as fh:
        fh.write("x,value\n")
        for x, v in zip(final.centers(0), final.values):
            fh.write(f"{x:.17g},{v:.17g}\n")
    print(f"picard converged (iterations={sol.iterations}, "
          f"last increment {sol.increments[-1]:.3e}) -> {out}")
    return 0


def _load_density_csv(path) -> DensityField:
    xs, vs = [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line[0].isalpha():
                continue
            a, b = line.split(",")[:2]
            xs.append(float(a))
            vs.append(float(b))
    x = np.asarray(xs)
    h = x[1] - x[0]
    return DensityField((float(x[0] - h / 2),), (float(x[-1] + h / 2),),
                        np.asarray(vs))


def _cmd_entropy(args) -> int:
    from . import entropy as ent
    cfg = StudyConfig.from_toml(args.config)
    _, _, init = cfg.resolve()
    f = make_initial_field(init, cfg.box, cfg.cells)
    g = make_initial_field(builtin("gauss_init(0, 1)"), cfg.box, cfg.cells)
    rep = ent.ckp_check(f, g)
    print(f"H={rep.entropy:.6g} l1={rep.l1:.6g} ckp_margin={rep.margin:.6g}")
    return 0


def _cmd_study(args) -> int:
    cfg = StudyConfig.from_toml(args.config)
    result = run_study(cfg, out_dir=args.out or "study_out")
    if not result.valid:
        print(f"study invalid: {result.failed_fraction:.0%} rows failed")
        return 2
    print(f"slope={result.fit.slope:.4f} "
          f"band=({result.fit.band[0]:.4f}, {result.fit.band[1]:.4f})")
    return 0


def _cmd_liouville(args) -> int:
    cfg = StudyConfig.from_toml(args.config)
    res = liouville_study(cfg)
    out = Path(args.out or "liouville_out")
    out.mkdir(parents=True, exist_ok=True)
    res.to_csv(out / "entropy_series.csv")
    print(f"sup_t H = {res.H.max():.6g} (bound {res.bound:.6g})")
    return 0


def _cmd_rate(args) -> int:
    fit = fit_rate(_load_points(args.input))
    print(f"slope={fit.slope:.4f} intercept={fit.intercept:.4f} "
          f"band=({fit.band[0]:.4f}, {fit.band[1]:.4f})")
    return 0


_COMMANDS = {"validate": _cmd_validate, "simulate": _cmd_simulate,
             "solve": _cmd_solve, "entropy": _cmd_entropy,
             "study": _cmd_study, "liouville": _cmd_liouville,
             "rate": _cmd_rate}


def cli(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EX_USAGE
    try:
        return _COMMANDS[args.command](args)
    except (UnknownPresetError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EX_USAGE
    except ValueError as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main():  # console-script entry point
    raise SystemExit(cli())
