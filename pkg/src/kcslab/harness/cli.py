"""Command-line entry point: ``kcslab <subcommand> [--config F] [--out D] [--seed N] [--threads N]``."""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import experiments as ex
from .config import ExperimentConfig
from .io import write_csv, write_summary

log = logging.getLogger("kcslab")

SUBCOMMANDS = ("sweep-epsilon", "flocking-decay", "monokinetic", "meanfield", "audit",
               "metrics-selftest")


def _sweep(cfg, out: Path, threads: int) -> dict:
    rep = ex.run_epsilon_sweep(cfg, threads=threads)
    write_csv(out / "sweep.csv", ["epsilon", "t", "l2_gap", "w2_sq", "Q", "runtime_s"], rep.rows)
    return rep.summary()


def _decay(cfg, out: Path, threads: int) -> dict:
    rep = ex.run_flocking_decay(cfg)
    write_csv(out / "decay.csv", ["t", "E1", "E2", "E"], rep.rows)
    return rep.summary()


def _mono(cfg, out: Path, threads: int) -> dict:
    rep = ex.run_monokinetic_check(cfg)
    write_csv(out / "monokinetic.csv",
              ["t", "E1", "E1_bound", "lipschitz", "l2_gap", "l1_gap", "w2",
               "E1_gronwall"], rep.rows)
    return rep.summary()


def _meanfield(cfg, out: Path, threads: int) -> dict:
    rep = ex.run_meanfield_consistency(cfg)
    write_csv(out / "meanfield.csv",
              ["t", "mean_v_nbody", "mean_v_kinetic", "second_nbody", "second_kinetic"], rep.rows)
    return rep.summary()


def _audit(cfg, out: Path, threads: int) -> dict:
    run, report = ex.run_audit(cfg)
    led = ex.entropy_ledger(run)
    margins = led.margins(cfg.epsilon)
    write_csv(out / "entropy.csv", ["t", "F", "cum_D1", "cum_D2_tilde", "margin"],
              zip(led.times, led.F, led.cum_D1, led.cum_D2_tilde, margins))
    l2, w2, q = run.q_series()
    write_csv(out / "paired.csv", ["t", "l2_gap", "w2_sq", "Q"], zip(run.times, l2, w2, q))
    return report.as_dict()


def _metrics(cfg, out: Path, threads: int) -> dict:
    return ex.run_metrics_selftest(cfg)


HANDLERS = {
    "sweep-epsilon": _sweep,
    "flocking-decay": _decay,
    "monokinetic": _mono,
    "meanfield": _meanfield,
    "audit": _audit,
    "metrics-selftest": _metrics,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kcslab", description="Kinetic flocking / hydrodynamic limit laboratory")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="TOML file layered over the defaults")
        p.add_argument("--out", type=Path, default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides: dict = {}
    if args.seed is not None:
        overrides.setdefault("domain", {})["seed"] = args.seed
    if args.threads is not None:
        overrides.setdefault("experiment", {})["threads"] = args.threads
    try:
        cfg = ExperimentConfig.build(args.command, args.config, overrides)
    except (ValueError, OSError) as exc:
        print(f"kcslab: bad configuration: {exc}", file=sys.stderr)
        return 2
    out = args.out if args.out is not None else Path(cfg.exp("out", "runs")) / args.command
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    summary = HANDLERS[args.command](cfg, out, int(cfg.exp("threads", 1)))
    summary = {"experiment": args.command, "seed": cfg.seed, "runtime_s": time.perf_counter() - t0,
               "config": cfg.raw, **summary}
    path = write_summary(out, summary)
    ok = bool(summary.get("pass", False))
    print(f"{args.command}: {'PASS' if ok else 'FAIL'} ({path})")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
