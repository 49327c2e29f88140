"""Command line: ``run``, ``verify`` and ``plotdata``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import format_gates, gates_ok, load_config, load_fixture, run_gates, FIXTURES
from .errors import ConfigError, StdmpcError, TraceError, VerificationError
from .sim import run
from .tightening import admissible_eta, lemma1_eta_bound, WeightedBall, check_inclusion
from .trace import plotdata, trace_verbosity, write_trace

log = logging.getLogger("stdmpc")

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_CONFIG = 2


def _load(args):
    if args.config and args.fixture:
        raise ConfigError("give either --config or --fixture, not both")
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = load_fixture(args.fixture or "sec5")
    changes = {}
    for name in ("steps", "seed", "eta"):
        v = getattr(args, name, None)
        if v is not None:
            changes[name] = v
    if getattr(args, "strict", False):
        changes["strict"] = True
    if getattr(args, "out_dir", None):
        changes["out_dir"] = args.out_dir
    if changes.get("steps", 0) < 0 or changes.get("eta", 0) < 0:
        raise ConfigError("--steps and --eta must be nonnegative")
    return cfg.copy(**changes) if changes else cfg


def cmd_run(args):
    cfg = _load(args)
    verbosity = trace_verbosity()
    try:
        report = run(cfg, enforce_gates=True, verbosity=verbosity)
    except VerificationError as exc:
        print(f"strict verification failed: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    paths = write_trace(report, cfg.out_dir, verbosity=verbosity)
    print(f"run {cfg.name}: {cfg.steps} steps, {len(cfg.agents)} agents, {report.elapsed:.2f} s")
    for aid, c in sorted(report.agents.items()):
        print(f"  agent {aid}: solves {c['solves']}/{c['steps']} steps, terminal steps {c['terminal_steps']}, "
              f"solver failures {c['solver_failures']}")
    for check, t in sorted(report.tallies.items()):
        print(f"  check {check}: pass {t['pass']} fail {t['fail']} skip {t['skip']}")
    print(f"trace written to {Path(cfg.out_dir)} ({len(paths)} files)")
    return EXIT_OK


def cmd_verify(args):
    cfg = _load(args)
    gates, prepared = run_gates(cfg)
    for pa in prepared:
        if pa is None:
            continue
        ing = pa.ing
        ball = WeightedBall(ing.P, ing.eps_r)
        print(f"agent {pa.cfg.id}: admissible_eta = {admissible_eta(ing, cfg.N):.6e}  "
              f"(all-phase containment bound {lemma1_eta_bound(ing, cfg.N):.6e}, configured {pa.eta:.6e}); "
              f"inclusion {'ok' if check_inclusion(ball, pa.boxes[-1]) else 'FAILED'}")
    print(format_gates(gates))
    ok = gates_ok(gates)
    print("all gates pass" if ok else "gate failure")
    return EXIT_OK if ok else EXIT_VIOLATION


def cmd_plotdata(args):
    written = plotdata(args.trace, args.out_dir)
    for p in written:
        print(p)
    return EXIT_OK


def _add_config_args(p, run_flags=True):
    p.add_argument("--config", help="experiment YAML file")
    p.add_argument("--fixture", choices=sorted(FIXTURES), help="bundled experiment (default sec5)")
    p.add_argument("--eta", type=float, help="override every agent's disturbance bound")
    p.add_argument("--steps", type=int, help="number of simulation steps")
    if run_flags:
        p.add_argument("--seed", type=int, help="disturbance seed")
        p.add_argument("--strict", action="store_true", help="abort on the first failed verification check")
        p.add_argument("--out-dir", help="trace output directory")


def build_parser():
    parser = argparse.ArgumentParser(prog="stdmpc", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="simulate and write trace files")
    _add_config_args(p)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("verify", help="offline gates: eta bounds, terminal region, inclusion")
    _add_config_args(p, run_flags=False)
    p.set_defaults(func=cmd_verify)
    p = sub.add_parser("plotdata", help="figure tables from a trace directory")
    p.add_argument("trace", help="trace directory written by 'run'")
    p.add_argument("--out-dir", help="output directory (default: the trace directory)")
    p.set_defaults(func=cmd_plotdata)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, TraceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StdmpcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
