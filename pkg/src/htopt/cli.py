"""Command-line front end: solve, bench, check-convexity, grad-check.

Exit codes: 0 success/converged, 1 usage or configuration error, 2 iteration
budget exhausted (or an inconclusive convexity check), 3 divergence,
evaluation failure, or a failed gradient check.  Benchmark scripts rely on
the distinction between a recorded baseline divergence (still exit 0 from
``bench``) and tool failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import bench
from .diagnostics import write_trace_csv
from .numerics import fd_gradient
from .problem import check_convexity, load_problem_file
from .tuner import ConfigurationError, TunerConfig, solve, validate_config

_EXIT_BY_OUTCOME = {"converged": 0, "max-iters": 2, "diverged": 3}

#: Seed for the grad-check sample draw; fixed so identical invocations give
#: byte-identical output.
_SAMPLE_SEED = 0

#: Gradient checks shrink the sampling box by this fraction of its width per
#: side so central-difference probes stay inside the loss domain.
_FD_SAMPLE_MARGIN = 1e-3

#: Step used by the gradient check; smaller than the library default so the
#: 1e-6 relative tolerance holds even where the curvature grows toward the
#: box edge.
_GRAD_CHECK_STEP = 1e-6

_DEFAULT_START = {"academic": 0.9, "academic-upper": 0.0, "nesterov": 2.0}


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_problem(spec: str):
    if spec in ("academic", "academic-upper", "nesterov"):
        return bench.builtin_reduced(spec)
    return load_problem_file(spec)


def _parse_vector(text: str) -> np.ndarray:
    return np.array([float(part) for part in text.split(",")])


def _cmd_solve(args) -> int:
    try:
        prob = _load_problem(args.problem)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: could not load problem {args.problem!r}: {exc}", file=sys.stderr)
        return 1

    cfg = TunerConfig(
        gamma=args.gamma,
        beta=args.beta,
        epsilon=args.epsilon,
        algorithm=args.algorithm,
        max_iters=args.max_iters,
        grad_tol=args.grad_tol,
    )
    try:
        validate_config(cfg)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    if args.theta0 is not None:
        theta0 = _parse_vector(args.theta0)
    elif args.problem in _DEFAULT_START:
        theta0 = np.array([_DEFAULT_START[args.problem]])
    else:
        print("error: --theta0 is required for this problem", file=sys.stderr)
        return 1
    nu0 = _parse_vector(args.nu0) if args.nu0 is not None else theta0.copy()

    try:
        trace = solve(prob, cfg, theta0, nu0, problem_name=args.problem)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    write_trace_csv(trace, args.trace)
    last = trace.records[-1]
    print(
        f"{args.problem} [{cfg.algorithm}] outcome={trace.outcome} iters={last.k} "
        f"loss={last.loss:.9g} grad_norm={last.grad_norm:.3g} trace={args.trace}"
    )
    return _EXIT_BY_OUTCOME[trace.outcome]


def _cmd_bench(args) -> int:
    out_dir = Path(args.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        result = bench.run_suite(args.suite, out_dir)
    except OSError as exc:
        print(f"error: cannot write to {args.out!r}: {exc}", file=sys.stderr)
        return 1
    for entry in result["runs"]:
        print(
            f"{entry['problem']} [{entry['algorithm']}] outcome={entry['outcome']} "
            f"iters={entry['iters']} final_loss={entry['final_loss']:.9g} "
            f"violations={entry['feasibility_violations']}"
        )
    for note in result["discrepancies"]:
        print(f"discrepancy: {note}")
    print(f"wrote {len(result['paths'])} trace files and summary.json to {out_dir}")
    return 0


def _cmd_check_convexity(args) -> int:
    if args.problem == "academic":
        full, _ = bench.academic_problem("lower")
        region = bench.ACADEMIC_LOWER_REGION
    elif args.problem == "academic-upper":
        full, _ = bench.academic_problem("upper")
        region = bench.ACADEMIC_UPPER_REGION
    else:
        print(
            "error: convexity checking needs a constrained problem; "
            "supported: academic, academic-upper",
            file=sys.stderr,
        )
        return 1
    report = check_convexity(full, region, args.grid)
    print(f"condition_matched: {report.condition_matched}")
    print(f"grad_p_h_sign: {report.grad_p_h_sign}")
    print(f"samples_tested: {report.samples_tested}")
    print(f"violations: {len(report.violations)}")
    failures = [v for v in report.violations if v[1] == "evaluation-failed"]
    for point, reason in report.violations[:10]:
        print(f"  {reason} at {point}")
    if len(report.violations) > 10:
        print(f"  ... {len(report.violations) - 10} more")
    if failures:
        return 3
    if report.condition_matched != "none" or report.grad_p_h_sign in ("negative", "positive"):
        return 0
    return 2


def _cmd_grad_check(args) -> int:
    try:
        prob = _load_problem(args.problem)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: could not load problem {args.problem!r}: {exc}", file=sys.stderr)
        return 1
    rng = np.random.default_rng(_SAMPLE_SEED)
    width = prob.box.upper - prob.box.lower
    lo = prob.box.lower + _FD_SAMPLE_MARGIN * width
    hi = prob.box.upper - _FD_SAMPLE_MARGIN * width
    failures = []
    worst = 0.0
    for _ in range(args.samples):
        theta = lo + rng.random(prob.m) * (hi - lo)
        try:
            analytic = np.asarray(prob.grad(theta), dtype=float)
            numeric = fd_gradient(prob.loss, theta, step=_GRAD_CHECK_STEP)
        except Exception as exc:
            failures.append((theta.tolist(), f"evaluation failed: {exc}"))
            continue
        rel = float(np.linalg.norm(numeric - analytic)) / max(
            float(np.linalg.norm(analytic)), 1e-8
        )
        worst = max(worst, rel)
        if rel >= args.rel_tol:
            failures.append((theta.tolist(), f"relative error {rel:.3e}"))
    print(f"checked {args.samples} points, worst relative error {worst:.3e}")
    if failures:
        print(f"{len(failures)} failing points:")
        for point, reason in failures[:20]:
            print(f"  {point}: {reason}")
        return 3
    return 0


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="htopt",
        description="Box-feasible momentum tuner: solvers, benchmarks, and checks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p_solve = sub.add_parser("solve", help="run one tuner on one problem", formatter_class=fmt)
    p_solve.add_argument("--problem", required=True,
                         help="builtin name (academic, academic-upper, nesterov) or JSON path")
    p_solve.add_argument("--algorithm", choices=("ht1", "ht2"), default="ht2",
                         help="baseline (ht1) or box-safeguarded (ht2) step rule")
    p_solve.add_argument("--gamma", type=float, default=bench.BENCH_GAMMA, help="step gain")
    p_solve.add_argument("--beta", type=float, default=bench.BENCH_BETA, help="averaging gain")
    p_solve.add_argument("--epsilon", type=float, default=bench.BENCH_EPSILON,
                         help="boundary-exception nudge")
    p_solve.add_argument("--theta0", default=None,
                         help="initial parameter, comma-separated (problem default if omitted: "
                              "academic 0.9, nesterov 2)")
    p_solve.add_argument("--nu0", default=None,
                         help="initial auxiliary iterate (defaults to theta0)")
    p_solve.add_argument("--max-iters", type=int, default=100_000, dest="max_iters")
    p_solve.add_argument("--grad-tol", type=float, default=1e-8, dest="grad_tol")
    p_solve.add_argument("--trace", default="trace.csv", help="output CSV path")
    p_solve.set_defaults(func=_cmd_solve)

    p_bench = sub.add_parser("bench", help="run the benchmark suites", formatter_class=fmt)
    p_bench.add_argument("--suite", choices=bench.SUITES, required=True)
    p_bench.add_argument("--out", required=True, help="output directory")
    p_bench.set_defaults(func=_cmd_bench)

    p_cvx = sub.add_parser("check-convexity", help="sampled convexity certificate",
                           formatter_class=fmt)
    p_cvx.add_argument("--problem", required=True)
    p_cvx.add_argument("--grid", type=int, default=50, help="grid points per dimension")
    p_cvx.set_defaults(func=_cmd_check_convexity)

    p_grad = sub.add_parser("grad-check", help="analytic vs central-difference gradients",
                            formatter_class=fmt)
    p_grad.add_argument("--problem", required=True)
    p_grad.add_argument("--samples", type=int, default=100)
    p_grad.add_argument("--rel-tol", type=float, default=1e-6, dest="rel_tol")
    p_grad.set_defaults(func=_cmd_grad_check)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
