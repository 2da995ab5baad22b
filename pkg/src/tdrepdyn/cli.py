"""Command-line harness: generate MDPs, integrate trajectories, run experiments.

Exit codes: 0 success, 1 usage error, 2 I/O error, 3 generation failure,
4 numerical failure (integration breakdown or failed invariant checks).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import dynamics as dyn
from . import experiments as exp
from . import mdp as mdp_mod
from . import metrics as met

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_GENERATION = 3
EXIT_NUMERIC = 4

EXPERIMENTS = ("fig1", "fig2", "fig3", "invariants")

# Horizons calibrated so each figure's curves are converged at the endpoint.
EXPERIMENT_T_END = {"fig1": 30.0, "fig2": 100.0, "fig3": 100.0, "invariants": 300.0}
EXPERIMENT_LOG_POINTS = {"fig1": 121, "fig2": 101, "fig3": 101, "invariants": 151}
EXPERIMENT_RTOL = {"fig1": 1e-8, "fig2": 1e-8, "fig3": 1e-8, "invariants": 1e-10}
EXPERIMENT_ATOL = {"fig1": 1e-10, "fig2": 1e-10, "fig3": 1e-10, "invariants": 1e-12}


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; the documented taxonomy wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _formatter(prog: str) -> argparse.HelpFormatter:
    # fixed width keeps --help output stable for the golden-file tests
    return argparse.HelpFormatter(prog, max_help_position=28, width=96)


def default_out_root() -> Path:
    return Path(os.environ.get("TDREPDYN_OUT", "."))


def build_parser() -> _Parser:
    parser = _Parser(
        prog="tdrepdyn",
        description="Continuous-time TD representation dynamics: generators, "
        "trajectory simulation, and figure experiments.",
        formatter_class=_formatter,
        allow_abbrev=False,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    parser.subcommands = {}

    gen = sub.add_parser(
        "gen-mdp",
        help="sample a Markov reward process and write it as JSON",
        formatter_class=_formatter,
        allow_abbrev=False,
    )
    gen.add_argument("--n", type=int, default=30, help="number of states (default: 30)")
    gen.add_argument("--h", type=int, default=1, help="number of reward columns (default: 1)")
    gen.add_argument("--gamma", type=float, default=0.9, help="discount factor in [0, 1) (default: 0.9)")
    gen.add_argument("--alpha", type=float, default=0.95,
                     help="permutation mixing weight in [0, 1] (default: 0.95)")
    gen.add_argument("--seed", type=int, default=0, help="generator seed (default: 0)")
    gen.add_argument("--symmetric", action="store_true",
                     help="use the symmetric generator instead of the mixed one")
    gen.add_argument("-o", "--out", type=Path, default=None,
                     help="output path (default: <TDREPDYN_OUT>/mdp.json)")
    gen.add_argument("-v", "--verbose", action="count", default=0, help="increase log level")
    gen.set_defaults(func=cmd_gen_mdp)
    parser.subcommands["gen-mdp"] = gen

    sim = sub.add_parser(
        "simulate",
        help="integrate one trajectory and write the metric log as CSV",
        formatter_class=_formatter,
        allow_abbrev=False,
    )
    sim.add_argument("--mdp", type=Path, default=None,
                     help="load the MDP from this JSON file instead of generating one")
    sim.add_argument("--n", type=int, default=30, help="number of states if generating (default: 30)")
    sim.add_argument("--k", type=int, default=2, help="representation width (default: 2)")
    sim.add_argument("--h", type=int, default=1, help="number of reward columns (default: 1)")
    sim.add_argument("--gamma", type=float, default=0.9, help="discount factor in [0, 1) (default: 0.9)")
    sim.add_argument("--alpha", type=float, default=0.95, help="permutation mixing weight (default: 0.95)")
    sim.add_argument("--seed", type=int, default=0, help="seed for the MDP and the init (default: 0)")
    sim.add_argument("--symmetric", action="store_true", help="symmetric generator")
    sim.add_argument("--dynamics", default="two-time-scale",
                     choices=["linear-td", "end-to-end", "two-time-scale"],
                     help="which drift field to integrate (default: two-time-scale)")
    sim.add_argument("--eta-w", type=float, default=1.0, help="weight learning rate (default: 1)")
    sim.add_argument("--eta-phi", type=float, default=None,
                     help="representation learning rate (default: 1, or 0 for linear-td)")
    sim.add_argument("--t-end", type=float, default=100.0, help="integration horizon (default: 100)")
    sim.add_argument("--rtol", type=float, default=1e-8, help="solver relative tolerance (default: 1e-8)")
    sim.add_argument("--atol", type=float, default=1e-10, help="solver absolute tolerance (default: 1e-10)")
    sim.add_argument("--log-points", type=int, default=201, help="metric samples on [0, t_end] (default: 201)")
    sim.add_argument("--store-states", action="store_true",
                     help="also write (phi, w) snapshots next to the CSV")
    sim.add_argument("-c", "--config", type=Path, default=None,
                     help="JSON config supplying defaults (flags win)")
    sim.add_argument("-o", "--out", type=Path, default=None,
                     help="output CSV path (default: <TDREPDYN_OUT>/trajectory.csv)")
    sim.add_argument("-v", "--verbose", action="count", default=0, help="increase log level")
    sim.set_defaults(func=cmd_simulate)
    parser.subcommands["simulate"] = sim

    run = sub.add_parser(
        "experiment",
        help="run a figure reproduction or the invariant suite",
        formatter_class=_formatter,
        allow_abbrev=False,
    )
    run.add_argument("name", choices=EXPERIMENTS, help="experiment to run")
    run.add_argument("--n", type=int, default=30, help="number of states (default: 30)")
    run.add_argument("--k", type=int, default=2, help="representation width (default: 2)")
    run.add_argument("--h", type=int, nargs="+", default=None, metavar="H",
                     help="reward-count sweep for fig3 (default: 1 2 4 8)")
    run.add_argument("--gamma", type=float, default=0.9, help="discount factor (default: 0.9)")
    run.add_argument("--alpha", type=float, default=0.95, help="permutation mixing weight (default: 0.95)")
    run.add_argument("--seed", type=int, default=0, help="master seed, trial i uses seed+i (default: 0)")
    run.add_argument("--trials", type=int, default=100, help="number of sampled MDPs (default: 100)")
    run.add_argument("--eta-phi", type=float, default=None,
                     help="two-time-scale rate for fig2/fig3 (default 1)")
    run.add_argument("--t-end", type=float, default=None,
                     help="integration horizon (default: per experiment)")
    run.add_argument("--rtol", type=float, default=None,
                     help="solver relative tolerance (default: per experiment)")
    run.add_argument("--atol", type=float, default=None,
                     help="solver absolute tolerance (default: per experiment)")
    run.add_argument("--log-points", type=int, default=None,
                     help="metric samples (default: per experiment)")
    run.add_argument("--jobs", type=int, default=1, help="concurrent trial workers (default: 1)")
    run.add_argument("-c", "--config", type=Path, default=None,
                     help="JSON config supplying defaults (flags win)")
    run.add_argument("-o", "--out", type=Path, default=None,
                     help="output directory root (default: TDREPDYN_OUT or .)")
    run.add_argument("-v", "--verbose", action="count", default=0, help="increase log level")
    run.set_defaults(func=cmd_experiment)
    parser.subcommands["experiment"] = run

    return parser


def _given_flags(subparser: argparse.ArgumentParser, argv: list[str]) -> set[str]:
    """Dests of options that literally appear in argv (abbreviations are off)."""
    opt_to_dest = {}
    for action in subparser._actions:
        for opt in action.option_strings:
            opt_to_dest[opt] = action.dest
    seen = set()
    for token in argv:
        name = token.split("=", 1)[0]
        if name in opt_to_dest:
            seen.add(opt_to_dest[name])
    return seen


def _setup_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity == 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _check_bounds(parser: argparse.ArgumentParser, args: argparse.Namespace) -> None:
    if getattr(args, "alpha", None) is not None and not 0 <= args.alpha <= 1:
        parser.error(f"--alpha must be in [0, 1], got {args.alpha}")
    if getattr(args, "gamma", None) is not None and not 0 <= args.gamma < 1:
        parser.error(f"--gamma must be in [0, 1), got {args.gamma}")
    if getattr(args, "n", None) is not None and args.n < 1:
        parser.error(f"--n must be >= 1, got {args.n}")
    if getattr(args, "t_end", None) is not None and not args.t_end > 0:
        parser.error(f"--t-end must be > 0, got {args.t_end}")
    for name in ("rtol", "atol"):
        value = getattr(args, name, None)
        if value is not None and not value > 0:
            parser.error(f"--{name} must be > 0, got {value}")


def _generate_mdp(args: argparse.Namespace) -> mdp_mod.MarkovRewardProcess:
    if args.symmetric:
        return mdp_mod.make_symmetric_mdp(n=args.n, h=args.h, gamma=args.gamma, seed=args.seed)
    return mdp_mod.make_random_mdp(
        n=args.n, h=args.h, gamma=args.gamma, alpha=args.alpha, seed=args.seed
    )


def cmd_gen_mdp(parser: _Parser, args: argparse.Namespace, given: set[str]) -> int:
    _check_bounds(parser.subcommands["gen-mdp"], args)
    out = args.out if args.out is not None else default_out_root() / "mdp.json"
    try:
        mrp = _generate_mdp(args)
    except mdp_mod.ConvergenceError as exc:
        print(f"generation failed: {exc}", file=sys.stderr)
        return EXIT_GENERATION
    generator = "symmetric" if args.symmetric else "mixed"
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        mdp_mod.save_mdp(mrp, out, seed=args.seed, generator=generator)
    except OSError as exc:
        print(f"cannot write {out}: {exc}", file=sys.stderr)
        return EXIT_IO
    A = mdp_mod.key_matrix(mrp)
    lam_min = float(np.linalg.eigvalsh(0.5 * (A + A.T))[0])
    print(f"wrote {out}")
    print(f"reversibility residual: {mdp_mod.reversibility_residual(mrp):.6e}")
    print(f"key matrix min eigenvalue: {lam_min:.6e}")
    return EXIT_OK


def _load_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise _CliIOError(f"cannot read {path}: {exc}") from exc


class _CliIOError(RuntimeError):
    pass


def _simulate_defaults(args: argparse.Namespace, given: set[str]) -> argparse.Namespace:
    """Overlay config-file values under any flags the user did not type."""
    if args.config is None:
        return args
    doc = _load_json(args.config)
    known = {
        "n_states": "n", "k": "k", "gamma": "gamma", "alpha": "alpha", "seed": "seed",
    }
    unknown = set(doc) - set(known) - {"integrator", "h_values"}
    if unknown:
        raise _CliIOError(f"unknown config keys in {args.config}: {sorted(unknown)}")
    for key, dest in known.items():
        if key in doc and dest not in given:
            setattr(args, dest, doc[key])
    if "h_values" in doc and "h" not in given:
        args.h = int(doc["h_values"][0])
    for key, dest in (("t_end", "t_end"), ("rtol", "rtol"), ("atol", "atol"),
                      ("log_points", "log_points")):
        if key in doc.get("integrator", {}) and dest not in given:
            setattr(args, dest, doc["integrator"][key])
    return args


def cmd_simulate(parser: _Parser, args: argparse.Namespace, given: set[str]) -> int:
    sub = parser.subcommands["simulate"]
    try:
        args = _simulate_defaults(args, given)
    except _CliIOError as exc:
        print(exc, file=sys.stderr)
        return EXIT_IO
    _check_bounds(sub, args)
    kind = args.dynamics.replace("-", "_")
    eta_phi = args.eta_phi
    if eta_phi is None:
        eta_phi = 0.0 if kind == dyn.LINEAR_TD else 1.0
    try:
        spec = dyn.DynamicsSpec(kind, eta_w=args.eta_w, eta_phi=eta_phi)
    except ValueError as exc:
        sub.error(str(exc))

    if args.mdp is not None:
        try:
            mrp = mdp_mod.load_mdp(args.mdp)
        except (OSError, json.JSONDecodeError, ValueError) as exc:
            print(f"cannot load MDP from {args.mdp}: {exc}", file=sys.stderr)
            return EXIT_IO
    else:
        try:
            mrp = _generate_mdp(args)
        except mdp_mod.ConvergenceError as exc:
            print(f"generation failed: {exc}", file=sys.stderr)
            return EXIT_GENERATION

    if not 1 <= args.k <= mrp.n:
        sub.error(f"--k must be in [1, {mrp.n}], got {args.k}")
    phi0 = exp.initial_representation(args.seed, mrp.n, args.k)
    config = dyn.IntegratorConfig(
        t_end=args.t_end, rtol=args.rtol, atol=args.atol, log_points=args.log_points
    )
    try:
        log = dyn.integrate(mrp, spec, phi0, config=config, store_states=args.store_states)
    except (dyn.IntegrationError, met.IllConditionedError) as exc:
        print(f"integration failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC

    out = args.out if args.out is not None else default_out_root() / "trajectory.csv"
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        log.to_csv(out)
        if args.store_states:
            log.states_to_json(out.with_suffix(".states.json"))
    except OSError as exc:
        print(f"cannot write {out}: {exc}", file=sys.stderr)
        return EXIT_IO
    E, fn = log.metrics["E"], log.metrics["f_norm"]
    print(f"wrote {out}")
    print(f"E: {E[0]:.6g} -> {E[-1]:.6g}")
    print(f"f_norm: {fn[0]:.6g} -> {fn[-1]:.6g}")
    print(f"cov_drift final: {log.metrics['cov_drift'][-1]:.6g}")
    return EXIT_OK


def _experiment_config(args: argparse.Namespace, given: set[str]) -> exp.ExperimentConfig:
    doc = _load_json(args.config) if args.config is not None else {}
    flag_map = {
        "n": "n_states", "k": "k", "gamma": "gamma", "alpha": "alpha",
        "seed": "seed", "trials": "n_trials", "jobs": "jobs",
    }
    for dest, key in flag_map.items():
        if dest in given:
            doc[key] = getattr(args, dest)
    if "h" in given:
        doc["h_values"] = [int(h) for h in args.h]
    if "out" in given:
        doc["outdir"] = str(args.out)
    else:
        doc.setdefault("outdir", str(default_out_root()))
    if "eta_phi" in given:
        doc["dynamics"] = [{"kind": dyn.TWO_TIME_SCALE, "eta_w": 0.0, "eta_phi": args.eta_phi}]
    integ = dict(doc.get("integrator", {}))
    per_exp = {
        "t_end": EXPERIMENT_T_END[args.name],
        "rtol": EXPERIMENT_RTOL[args.name],
        "atol": EXPERIMENT_ATOL[args.name],
        "log_points": EXPERIMENT_LOG_POINTS[args.name],
    }
    for dest in ("t_end", "rtol", "atol", "log_points"):
        if dest in given and getattr(args, dest) is not None:
            integ[dest] = getattr(args, dest)
        else:
            integ.setdefault(dest, per_exp[dest])
    doc["integrator"] = integ
    return exp.config_from_json(doc)


def cmd_experiment(parser: _Parser, args: argparse.Namespace, given: set[str]) -> int:
    sub = parser.subcommands["experiment"]
    _check_bounds(sub, args)
    if args.eta_phi is not None and args.name not in ("fig2", "fig3"):
        sub.error("--eta-phi only applies to fig2 and fig3")
    try:
        config = _experiment_config(args, given)
    except _CliIOError as exc:
        print(exc, file=sys.stderr)
        return EXIT_IO
    except (ValueError, TypeError) as exc:
        sub.error(str(exc))

    if args.name == "invariants":
        reports = exp.run_invariant_suite(config)
        print(met.reports_to_csv(reports), end="")
        failed = [r for r in reports if not r.passed]
        if failed:
            print(f"{len(failed)} of {len(reports)} invariant checks failed", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"all {len(reports)} invariant checks passed")
        return EXIT_OK

    runner = {"fig1": exp.run_fig1, "fig2": exp.run_fig2, "fig3": exp.run_fig3}[args.name]
    try:
        series = runner(config)
    except RuntimeError as exc:
        print(f"experiment failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"cannot write outputs: {exc}", file=sys.stderr)
        return EXIT_IO
    outdir = Path(config.outdir) / args.name
    print(f"wrote {outdir}")
    for name in sorted(series):
        agg = series[name]
        note = f" ({len(agg.failures)} failed trials)" if agg.failures else ""
        print(f"{name}: median {agg.median[0]:.6g} -> {agg.median[-1]:.6g}{note}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    given = _given_flags(parser.subcommands[args.command], argv)
    return args.func(parser, args, given)


if __name__ == "__main__":
    sys.exit(main())
