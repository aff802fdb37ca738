"""Command-line front end.

Subcommands: prepare, pretrain, run, report, gen-synthetic, check-grads.
Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import sys
import time

from .config import load_config
from .errors import ConfigError, DataError, NumericalError
from . import experiment
from .gradcheck import run_suite


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; usage errors are 1 here
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="asmg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, out=True):
        if config:
            p.add_argument("--config", required=True, help="path to the key=value config file")
        if out:
            p.add_argument("--out", required=True, help="experiment output directory")

    p = sub.add_parser("gen-synthetic", help="write the synthetic drifting interaction log")
    common(p, out=False)
    p.add_argument("--path", required=True, help="output interaction file")

    p = sub.add_parser("prepare", help="split an interaction log into period shards")
    common(p)

    p = sub.add_parser("pretrain", help="train the shared initial model")
    common(p)

    p = sub.add_parser("run", help="run warm-up and online updating for each variant/seed")
    common(p)
    p.add_argument("--variant", action="append", help="restrict to this variant (repeatable)")
    p.add_argument("--seed", type=int, help="run a single seed instead of the configured set")
    p.add_argument("--stop-after", type=int, help="stop each run after N completed periods")

    p = sub.add_parser("report", help="aggregate period logs into results.csv and report.md")
    common(p, config=False)
    p.add_argument("--check", choices=["synthetic-trend"], help="gate the report on a property check")

    p = sub.add_parser("check-grads", help="run the finite-difference gradient suite")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


def _dispatch(args) -> int:
    if args.command == "gen-synthetic":
        cfg = load_config(args.config)
        n = experiment.gen_synthetic(cfg, args.path)
        print(f"wrote {n} interactions to {args.path}")
        return 0

    if args.command == "prepare":
        cfg = load_config(args.config)
        manifest = experiment.prepare(cfg, args.out)
        print(
            f"prepared {manifest['n_periods']} period shards "
            f"({manifest['n_users']} users, {manifest['n_items']} items)"
        )
        return 0

    if args.command == "pretrain":
        cfg = load_config(args.config)
        path = experiment.pretrain(cfg, args.out)
        print(f"pretrained checkpoint written to {path}")
        return 0

    if args.command == "run":
        cfg = load_config(args.config)
        seeds = [args.seed] if args.seed is not None else None

        def progress(variant, seed, period):
            print(f"  [{variant} seed={seed}] period {period} done", flush=True)

        logs = experiment.run(
            cfg, args.out, variants=args.variant, seeds=seeds,
            stop_after=args.stop_after, progress=progress,
        )
        print(f"completed {len(logs)} run(s)")
        return 0

    if args.command == "report":
        csv_path = experiment.write_report(args.out)
        print(f"results written to {csv_path}")
        if args.check == "synthetic-trend":
            ok, lines = experiment.check_synthetic_trend(args.out)
            for line in lines:
                print(line)
            return 0 if ok else 3
        return 0

    if args.command == "check-grads":
        t0 = time.perf_counter()
        results = run_suite(args.instances, args.seed)
        worst = 0.0
        failed = 0
        for r in results:
            state = "pass" if r.ok else "FAIL"
            print(f"[{state}] {r.name}: max rel err {r.error:.3e} (tol {r.tolerance:g})")
            worst = max(worst, r.error)
            failed += 0 if r.ok else 1
        elapsed = time.perf_counter() - t0
        print(f"{len(results)} instances in {elapsed:.1f}s; worst {worst:.3e}")
        return 0 if failed == 0 else 3

    raise ConfigError(f"unknown command {args.command!r}")  # pragma: no cover


if __name__ == "__main__":
    sys.exit(main())
