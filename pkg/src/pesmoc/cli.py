"""Command-line entry point: ``pesmoc {generate,run,bench,score,acq-surface}``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import acquisition, driver, problem
from .gp import NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise driver.ConfigError(message)


def parse_seeds(text: str) -> list[int]:
    """``"S"``, ``"S..T"`` (inclusive) or a comma-separated list."""
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise driver.ConfigError(f"empty seed range {text!r}")
            return list(range(lo, hi + 1))
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise driver.ConfigError(f"bad seed specification {text!r}") from exc


def _config_from_args(args, **overrides) -> driver.RunConfig:
    base = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            base = json.load(fh)
    for name in ("n_initial", "M", "hyper_samples", "pool_size"):
        v = getattr(args, name, None)
        if v is not None:
            base[name] = v
    base.update(overrides)
    return driver.RunConfig.from_dict(base)


def cmd_generate(args) -> int:
    if args.toy:
        pr = problem.make_toy_problem(args.noise)
    else:
        pr = problem.sample_synthetic_problem(args.d, args.k, args.c, rng=args.seed, noise_std=args.noise)
    problem.save_problem(pr, args.out)
    print(f"wrote {args.out} (id {pr.problem_id})")
    return EXIT_OK


def cmd_run(args) -> int:
    pr = problem.load_problem(args.problem)
    cfg = _config_from_args(args, strategy=args.strategy, budget=args.budget, seed=args.seed)
    trace = driver.run(cfg, pr)
    driver.save_trace(trace, args.out)
    last = trace.records[-1]
    print(f"wrote {args.out}: {len(trace.records)} evaluations, final log gap {last.log_gap:.4f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    seeds = parse_seeds(args.seeds)
    base = _config_from_args(args)
    report = driver.run_benchmark(args.problems, args.scenario, tuple(args.strategies.split(",")), seeds,
                                  args.budget, workers=args.workers, base_config=base, out_dir=args.out)
    for strat, c in report["curves"].items():
        print(f"{strat}: final mean log gap {c['mean'][-1]:.4f} +- {c['stderr'][-1]:.4f} (n={c['n']})")
    for strat, w in report["vs_random"].items():
        print(f"{strat} vs random: {w['wins']} wins, {w['losses']} losses")
    if report["failures"]:
        print(f"{len(report['failures'])} runs failed; see summary.json", file=sys.stderr)
    return EXIT_OK


def cmd_score(args) -> int:
    trace = driver.load_trace(args.trace)
    pr = problem.load_problem(args.problem)
    metrics = driver.score(trace, pr)
    driver.write_metrics_csv(metrics, args.out)
    print(f"wrote {args.out} ({len(metrics)} rows)")
    return EXIT_OK


def cmd_acq_surface(args) -> int:
    trace = driver.load_trace(args.trace)
    if not trace.problem:
        raise driver.ConfigError("trace does not embed its problem")
    pr = problem.problem_from_spec(trace.problem)
    if pr.d != 2:
        raise driver.ConfigError("acq-surface needs a 2-dimensional problem")
    ctx = driver.context_at(trace, pr, args.iter)
    acquisition.write_surface_csv(ctx, args.out, resolution=args.resolution)
    print(f"wrote {args.out}")
    return EXIT_OK


def _common_run_options(p):
    p.add_argument("--n-initial", dest="n_initial", type=int)
    p.add_argument("--M", dest="M", type=int, help="Pareto-set samples per iteration")
    p.add_argument("--hyper-samples", dest="hyper_samples", type=int)
    p.add_argument("--pool-size", dest="pool_size", type=int)
    p.add_argument("--config", help="JSON file with RunConfig fields")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="pesmoc", description="Constrained multi-objective Bayesian optimization.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="sample a synthetic problem")
    p.add_argument("--d", type=int, default=3)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--c", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0, help="observation noise std")
    p.add_argument("--toy", action="store_true", help="write the 2-D toy problem instead")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("run", help="run one optimization campaign")
    p.add_argument("--problem", required=True)
    p.add_argument("--strategy", choices=driver.STRATEGIES, default="pesmoc")
    p.add_argument("--budget", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _common_run_options(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="benchmark strategies on generated problems")
    p.add_argument("--problems", type=int, default=10)
    p.add_argument("--scenario", choices=sorted(driver.SCENARIOS), default="noiseless")
    p.add_argument("--budget", type=int, default=40)
    p.add_argument("--seeds", default="0")
    p.add_argument("--strategies", default="pesmoc,random")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    _common_run_options(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("score", help="recompute metrics of a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--problem", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("acq-surface", help="acquisition on a 2-D grid at one iteration")
    p.add_argument("--trace", required=True)
    p.add_argument("--iter", type=int, required=True)
    p.add_argument("--resolution", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_acq_surface)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except driver.ConfigError as exc:
        print(f"pesmoc: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"pesmoc: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except driver.EvaluationError as exc:
        if isinstance(exc.cause, NumericalError):
            print(f"pesmoc: numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        raise
    except (driver.ConfigError, problem.DomainError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"pesmoc: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
