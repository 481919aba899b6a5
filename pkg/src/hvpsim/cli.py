"""Command-line entry point: scenario dispatch and artifact emission.

Exit codes: 0 success, 2 monitor-triggered abort (the iterate left the
admissible region or the flow map lost invertibility), 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import cross_check, mms_study, symbol_sweep
from .config import parse_config
from .errors import BlowupSignal, ConfigError, HvpError, InvertibilityLost
from .eulerian_ref import run_eulerian
from .fields import save_snapshot
from .lagrangian import invertibility_check
from .nonlinear import dependence_experiment, picard_solve
from .norms import NormSuite
from .operators import select_omega
from .scenarios import build_scenario, perturbation_profile

log = logging.getLogger(__name__)


def write_manifest(path, entries):
    with open(path, "w") as fh:
        for k in sorted(entries):
            fh.write(f"{k}={entries[k]}\n")


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow(row)


def export_trajectory(out, grid, times, states, stride, norms):
    """Snapshots at the configured stride plus the norms time series."""
    snapdir = out / "snapshots"
    snapdir.mkdir(exist_ok=True)
    rows = []
    e1_partial = 0.0
    dt = float(times[1] - times[0]) if len(times) > 1 else 0.0
    for n, (t, u) in enumerate(zip(times, states)):
        if n % stride == 0 or n == len(times) - 1:
            save_snapshot(snapdir / f"state_{n:06d}.hvpf", grid, u)
        x0n = norms.x0(u)
        x1n = norms.x1(u)
        if n < len(states) - 1:
            du = (states[n + 1] - u) * (1.0 / dt)
            e1_partial += dt * (norms.x0(du) ** norms.p + x1n**norms.p)
        rows.append([t, x0n, x1n, e1_partial ** (1.0 / norms.p)])
    write_csv(out / "norms.csv", ["t", "x0_norm", "x1_norm", "e1_partial"], rows)


def _base_manifest(cfg, args):
    return {
        "package_version": __version__,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "scenario": cfg.scenario,
        "grid_n": cfg.grid_n,
        "subcommand": args.subcommand,
    }


def _picard_run(cfg, rng=None, T=None, omega=None):
    grid = cfg.grid()
    u0 = build_scenario(cfg.scenario, grid, cfg.scenario_options)
    forcing = cfg.forcing(grid)
    norms = NormSuite(grid, p=cfg.solver.p, q=cfg.solver.q)
    if omega is None:
        omega = cfg.solver.omega if cfg.solver.omega_policy == "fixed" else None
    return (
        picard_solve(
            u0,
            cfg.params,
            grid,
            forcing,
            T if T is not None else cfg.solver.T,
            cfg.solver.dt,
            tol=cfg.solver.tol,
            kmax=cfg.solver.kmax,
            omega=omega,
            max_halvings=cfg.solver.max_halvings,
            det_floor=cfg.solver.det_floor,
            scheme=cfg.solver.scheme,
            norms=norms,
        ),
        grid,
        u0,
        forcing,
        norms,
    )


def cmd_run(cfg, args, out):
    result, grid, u0, forcing, norms = _picard_run(cfg)
    write_csv(
        out / "iterations.csv",
        ["k", "delta", "ratio", "sup_gradx_dev", "min_det", "margin_h", "margin_a"],
        result.state.iteration_rows(),
    )
    write_csv(
        out / "flow_health.csv",
        ["t", "sup_gradx_dev", "min_det", "sup_grady_dev"],
        [invertibility_check(m).csv_row() for m in result.flows],
    )
    states = result.trajectory.states()
    export_trajectory(out, grid, result.trajectory.times, states, cfg.output.snapshot_stride, norms)
    manifest = _base_manifest(cfg, args)
    manifest.update(
        {
            "omega": result.omega,
            "final_T": result.T,
            "halvings": result.halvings,
            "iterations": result.iterations,
            "termination": result.termination,
        }
    )
    write_manifest(out / "manifest.txt", manifest)
    print(f"converged in {result.iterations} iterations at T = {result.T:g}")
    return 0


def cmd_eulerian(cfg, args, out):
    grid = cfg.grid()
    u0 = build_scenario(cfg.scenario, grid, cfg.scenario_options)
    forcing = cfg.forcing(grid)
    norms = NormSuite(grid, p=cfg.solver.p, q=cfg.solver.q)
    traj = run_eulerian(u0, cfg.params, grid, forcing, cfg.solver.T, cfg.solver.dt)
    export_trajectory(out, grid, traj.times, traj.states, cfg.output.snapshot_stride, norms)
    write_csv(
        out / "margins.csv",
        ["t", "margin_h", "margin_a"],
        [[traj.times[n + 1], m[0], m[1]] for n, m in enumerate(traj.margins)],
    )
    manifest = _base_manifest(cfg, args)
    manifest["max_cfl"] = max(traj.cfl_history)
    write_manifest(out / "manifest.txt", manifest)
    print(f"eulerian run complete: {len(traj.times) - 1} steps, max CFL {max(traj.cfl_history):.3g}")
    return 0


def cmd_mms(cfg, args, out):
    table = mms_study(cfg.params)
    rows = []
    for study, data in table.items():
        key = "sizes" if "sizes" in data else "steps"
        for i, n in enumerate(data[key]):
            order = data["orders"][i - 1] if i >= 1 else ""
            rows.append([study, n, data["errors"][i], order])
    write_csv(out / "mms.csv", ["study", "resolution", "error", "observed_order"], rows)
    targets = {
        "spatial": (2.0, 0.4),
        "temporal_backward_euler": (1.0, 0.3),
        "temporal_trapezoidal": (2.0, 0.4),
    }
    lines = []
    all_ok = True
    manifest = _base_manifest(cfg, args)
    for study, data in table.items():
        order = data["orders"][-1]
        want, tol = targets[study]
        ok = abs(order - want) <= tol
        all_ok = all_ok and ok
        lines.append(
            f"{'PASS' if ok else 'FAIL'} {study}: observed order {order:.2f} "
            f"(target {want} +- {tol})"
        )
        manifest[f"{study}_final_order"] = order
    (out / "mms_summary.txt").write_text("\n".join(lines) + "\n")
    write_manifest(out / "manifest.txt", manifest)
    for line in lines:
        print(line)
    return 0 if all_ok else 1


def cmd_cross_check(cfg, args, out):
    resolutions = args.resolutions or [16, 32, 64]

    def scenario(grid):
        return build_scenario(cfg.scenario, grid, cfg.scenario_options), cfg.forcing(grid)

    rows = cross_check(scenario, cfg.params, cfg.solver.T, cfg.solver.dt, resolutions)
    write_csv(
        out / "cross_check.csv",
        ["n", "diff_v", "diff_h", "diff_a", "iterations"],
        [[r["n"], r["diff_v"], r["diff_h"], r["diff_a"], r["iterations"]] for r in rows],
    )
    dv = [r["diff_v"] for r in rows]
    monotone = all(dv[i + 1] < dv[i] for i in range(len(dv) - 1))
    small = dv[-1] < 0.05
    lines = [
        f"{'PASS' if monotone else 'FAIL'} velocity differences decrease along the ladder: "
        + ", ".join(f"{x:.4g}" for x in dv),
        f"{'PASS' if small else 'FAIL'} finest-level velocity difference {dv[-1]:.3%} < 5%",
    ]
    (out / "cross_check_summary.txt").write_text("\n".join(lines) + "\n")
    manifest = _base_manifest(cfg, args)
    manifest["finest_diff_v"] = dv[-1]
    write_manifest(out / "manifest.txt", manifest)
    for r in rows:
        print(
            f"n={r['n']}: rel diff v={r['diff_v']:.4g} h={r['diff_h']:.4g} a={r['diff_a']:.4g}"
        )
    for line in lines:
        print(line)
    return 0 if monotone and small else 1


def cmd_probe_symbol(cfg, args, out):
    sweep = symbol_sweep(cfg.params, n_samples=args.samples, seed=cfg.seed)
    write_csv(
        out / "symbol_sweep.csv",
        ["sample", "P", "max_eig", "min_eig"],
        [
            [i, sweep["P"][i], sweep["max_eig"][i], sweep["min_eig"][i]]
            for i in range(len(sweep["max_eig"]))
        ],
    )
    worst = float(sweep["max_eig"].max())
    manifest = _base_manifest(cfg, args)
    manifest.update({"samples": args.samples, "worst_max_eig": worst})
    write_manifest(out / "manifest.txt", manifest)
    print(f"symbol sweep: {args.samples} samples, worst symmetric-part eigenvalue {worst:.4g}")
    return 0 if worst < 0 else 1


def cmd_spectrum(cfg, args, out):
    grid = cfg.grid()
    u0 = build_scenario(cfg.scenario, grid, cfg.scenario_options)
    omega, report = select_omega(u0, cfg.params, grid)
    write_csv(
        out / "spectrum.csv",
        ["omega", "min_real", "max_abs_arg", "passed"],
        [[e.omega, e.min_real, e.max_abs_arg, e.passed] for e in report.entries],
    )
    manifest = _base_manifest(cfg, args)
    manifest["chosen_omega"] = omega
    write_manifest(out / "manifest.txt", manifest)
    print(report)
    return 0


def cmd_contraction(cfg, args, out):
    horizons = [cfg.solver.T / 2**i for i in range(args.ladder)]
    rows = []
    summary = []
    omega = None
    for T in horizons:
        result, grid, u0, forcing, norms = _picard_run(cfg, T=T, omega=omega)
        omega = result.omega
        for row in result.state.iteration_rows():
            rows.append([T] + row)
        max_ratio = max(result.ratios) if result.ratios else np.nan
        summary.append([T, result.iterations, max_ratio])
        print(f"T={T:g}: {result.iterations} iterations, max ratio {max_ratio:.4g}")
    write_csv(
        out / "contraction.csv",
        ["T", "k", "delta", "ratio", "sup_gradx_dev", "min_det", "margin_h", "margin_a"],
        rows,
    )
    write_csv(out / "contraction_summary.csv", ["T", "iterations", "max_ratio"], summary)
    manifest = _base_manifest(cfg, args)
    manifest["omega"] = omega
    write_manifest(out / "manifest.txt", manifest)
    return 0


def cmd_depend(cfg, args, out):
    grid = cfg.grid()
    u0 = build_scenario(cfg.scenario, grid, cfg.scenario_options)
    forcing = cfg.forcing(grid)
    norms = NormSuite(grid, p=cfg.solver.p, q=cfg.solver.q)
    rows = dependence_experiment(
        u0,
        args.sizes,
        perturbation_profile(grid),
        cfg.params,
        grid,
        forcing,
        cfg.solver.T,
        cfg.solver.dt,
        tol=cfg.solver.tol,
        kmax=cfg.solver.kmax,
        norms=norms,
        threads=args.threads,
    )
    write_csv(
        out / "dependence.csv",
        ["s", "diff_e1", "size_gamma", "rho"],
        [[r["s"], r["diff_e1"], r["size_gamma"], r["rho"]] for r in rows],
    )
    manifest = _base_manifest(cfg, args)
    write_manifest(out / "manifest.txt", manifest)
    for r in rows:
        print(f"s={r['s']:g}: rho = {r['rho']:.6g}")
    return 0


COMMANDS = {
    "run": cmd_run,
    "eulerian": cmd_eulerian,
    "mms": cmd_mms,
    "cross-check": cmd_cross_check,
    "probe-symbol": cmd_probe_symbol,
    "spectrum": cmd_spectrum,
    "contraction": cmd_contraction,
    "depend": cmd_depend,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hvpsim",
        description="Viscous-plastic sea-ice solver and verification harness",
    )
    parser.add_argument("--config", required=True, help="TOML configuration file")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--seed", type=int, help="override the configured seed")
    parser.add_argument("--threads", type=int, default=1, help="worker threads for sweeps")
    parser.add_argument("--T", type=float, help="override the horizon")
    parser.add_argument("--dt", type=float, help="override the time step")
    parser.add_argument("--grid", type=int, help="override the grid node count")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        if name == "probe-symbol":
            sp.add_argument("--samples", type=int, default=10_000)
        if name == "cross-check":
            sp.add_argument("--resolutions", type=int, nargs="+")
        if name == "contraction":
            sp.add_argument("--ladder", type=int, default=3, help="number of halved horizons")
        if name == "depend":
            sp.add_argument(
                "--sizes", type=float, nargs="+", default=[1e-2, 5e-3, 2.5e-3]
            )
    return parser


def main(argv=None):
    logging.basicConfig(level=os.environ.get("HVP_LOG", "WARNING").upper())
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config)
    except ConfigError as exc:
        for v in exc.violations:
            print(f"config error: {v}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return 1
    if args.seed is not None:
        cfg.seed = args.seed
    if args.T is not None:
        cfg.solver.T = args.T
    if args.dt is not None:
        cfg.solver.dt = args.dt
    if args.grid is not None:
        cfg.grid_n = args.grid
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        return COMMANDS[args.subcommand](cfg, args, out)
    except (BlowupSignal, InvertibilityLost) as exc:
        print(f"aborted by runtime monitor: {exc}", file=sys.stderr)
        return 2
    except HvpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
