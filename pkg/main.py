import argparse
import logging
import os
import sys

import numpy as np

from cells2d import build_cells
from diagnostics import GALLERY_DIMS, SUITES, gallery_run, random_linear_map, run_suite, write_ledger
from errors import ConvergenceError, MomentSolverError
from file_processor import FileProcessor
from forward import (GALLERY, moment_measure_polyhedral, moment_measure_sampled, necessary_conditions_report,
                     parallelepiped_potential)
from measures import validate
from quadrature import exact_masses_2d
from report_generator import ReportGenerator
from run_manifest import RunManifest
from solver import SolverConfig, solve

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NOT_CONVERGED = 2
THREADS_ENV = "MOMENT_SOLVER_THREADS"

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)


def resolve_threads(value):
    """--threads, else the environment variable, else 1"""
    if value is not None:
        return value
    try:
        return max(int(os.environ.get(THREADS_ENV, "1")), 1)
    except ValueError:
        logger.warning(f"Ignoring non-integer {THREADS_ENV}={os.environ[THREADS_ENV]!r}")
        return 1


def build_parser():
    parser = argparse.ArgumentParser(prog="moment-solver",
                                     description="Moment measures of convex functions: solve, sample and verify")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default=None, help="run directory (default runs/<command>)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--samples", type=int, default=None)
    common.add_argument("--threads", type=int, default=None, help=f"worker threads (default ${THREADS_ENV} or 1)")

    p = sub.add_parser("solve", parents=[common], help="find the potential whose moment measure is a target")
    p.add_argument("--measure", required=True, help="measure file (JSON or CSV)")
    p.add_argument("--config", default=None, help="flat TOML solver config")
    p.add_argument("--tol", type=float, default=None, help="gradient tolerance")
    p.add_argument("--quadrature", choices=["exact", "exact2d", "mc"], default=None)

    p = sub.add_parser("forward", parents=[common], help="compute the moment measure of a potential")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--potential", help="potential JSON file")
    source.add_argument("--case", choices=sorted(GALLERY_DIMS), help="built-in closed-form potential")
    p.add_argument("--dim", type=int, default=None, help="dimension for --case")
    p.add_argument("--tol", type=float, default=1e-9, help="barycenter tolerance of the conditions report")

    p = sub.add_parser("validate", help="check the existence conditions of a measure")
    p.add_argument("--measure", required=True)
    p.add_argument("--tol", type=float, default=None, help="barycenter tolerance")

    p = sub.add_parser("gallery", parents=[common], help="compare sampled gallery cases with their targets")
    p.add_argument("--case", choices=sorted(GALLERY_DIMS), default=None, help="single case (default all)")
    p.add_argument("--dim", type=int, default=None)

    p = sub.add_parser("check", parents=[common], help="run an inequality sweep")
    p.add_argument("suite", choices=sorted(SUITES))
    p.add_argument("--seeds", type=int, default=10, help="number of seeds, starting at --seed")

    p = sub.add_parser("report", help="emit plot data and summaries for a run directory")
    p.add_argument("run_dir")
    return parser


def _out_dir(args):
    out = args.out or os.path.join("runs", args.command)
    os.makedirs(out, exist_ok=True)
    return out


def cmd_solve(args, processor):
    overrides = {"seed": args.seed, "samples": args.samples, "threads": resolve_threads(args.threads),
                 "gradient_tol": args.tol, "quadrature": args.quadrature}
    if args.config:
        config = SolverConfig.from_file(args.config, **overrides)
    else:
        config = SolverConfig().with_overrides(**overrides)
    manifest = RunManifest("solve", config=config.to_dict(), seed=config.seed)
    manifest.record_input(args.measure, processor)
    if args.config:
        manifest.record_input(args.config, processor)

    measure = processor.load_measure(args.measure)
    check = validate(measure)
    if not check.ok:
        for message in check.failures():
            logger.error(f"Invalid target measure: {message}")
        return EXIT_INVALID

    out = _out_dir(args)
    potential, report = solve(measure, config)
    outputs = [processor.save_potential(potential, os.path.join(out, "potential.json")),
               processor.save_json(report.to_dict(), os.path.join(out, "report.json")),
               processor.save_trace(report, os.path.join(out, "trace.csv"))]
    if potential.dim == 2:
        cells = build_cells(potential, workers=config.threads)
        masses = exact_masses_2d(potential, cells, workers=config.threads)
        outputs.append(processor.save_cells(cells.with_masses(masses.masses, masses.total),
                                            os.path.join(out, "cells.csv")))
    for path in outputs:
        manifest.record_output(path)
    code = EXIT_OK if report.converged else EXIT_NOT_CONVERGED
    if not report.converged:
        logger.warning(f"Solver did not converge: {report.message}")
    manifest.finish(code)
    manifest.write(out, processor)
    return code


def cmd_forward(args, processor):
    seed = args.seed or 0
    samples = args.samples or 1_000_000
    threads = resolve_threads(args.threads)
    manifest = RunManifest("forward", config={"samples": samples, "case": args.case, "dim": args.dim,
                                              "threads": threads}, seed=seed)
    if args.potential:
        manifest.record_input(args.potential, processor)
        potential = processor.load_potential(args.potential)
        estimate = moment_measure_polyhedral(potential, samples=samples, seed=seed, workers=threads)
    else:
        dim = args.dim or GALLERY_DIMS[args.case]
        if args.case == "parallelepiped":
            analytic = parallelepiped_potential(random_linear_map(dim, seed))
        else:
            analytic = GALLERY[args.case](dim)
        estimate = moment_measure_sampled(analytic, samples=samples, seed=seed)

    out = _out_dir(args)
    conditions = necessary_conditions_report(estimate, tol=args.tol)
    if not conditions.ok:
        for message in conditions.failures():
            logger.warning(f"Computed moment measure: {message}")
    summary = {**estimate.summary(), "conditions_ok": conditions.ok, "conditions": conditions.failures(),
               "barycenter_tolerance": conditions.tolerance}
    for path in (processor.save_cloud(estimate, os.path.join(out, "moment_measure.csv")),
                 processor.save_json(summary, os.path.join(out, "conditions.json"))):
        manifest.record_output(path)
    manifest.finish(EXIT_OK)
    manifest.write(out, processor)
    return EXIT_OK


def cmd_validate(args, processor):
    if not processor.is_json(args.measure) and not processor.validate_csv_structure(args.measure):
        return EXIT_INVALID
    measure = processor.load_measure(args.measure)
    report = validate(measure) if args.tol is None else validate(measure, tol=args.tol)
    if report.ok:
        logger.info(f"{args.measure}: all existence conditions hold "
                    f"(|barycenter| = {np.linalg.norm(report.barycenter_vector):.3g})")
        return EXIT_OK
    for message in report.failures():
        logger.error(f"{args.measure}: {message}")
    return EXIT_INVALID


def _finish_checks(name, results, args, processor, config):
    out = _out_dir(args)
    manifest = RunManifest(name, config=config, seed=args.seed or 0)
    manifest.record_output(write_ledger(results, os.path.join(out, "ledger.csv")))
    failed = [r for r in results if not r.passed]
    code = EXIT_OK if not failed else EXIT_INVALID
    logger.info(f"{len(results) - len(failed)}/{len(results)} checks passed")
    manifest.finish(code)
    manifest.write(out, processor)
    return code


def cmd_gallery(args, processor):
    samples = args.samples or 1_000_000
    seed = args.seed or 0
    cases = [args.case] if args.case else sorted(GALLERY_DIMS)
    results = []
    for case in cases:
        results.extend(gallery_run(case, dim=args.dim, samples=samples, seed=seed))
    return _finish_checks("gallery", results, args, processor, {"cases": cases, "samples": samples})


def cmd_check(args, processor):
    start = args.seed or 0
    seeds = range(start, start + args.seeds)
    options = {} if args.samples is None else {"samples": args.samples}
    results = run_suite(args.suite, seeds, threads=resolve_threads(args.threads), **options)
    return _finish_checks(f"check:{args.suite}", results, args, processor,
                          {"suite": args.suite, "seeds": list(seeds), **options})


def cmd_report(args, processor):
    ReportGenerator(processor).generate_report(args.run_dir)
    return EXIT_OK


COMMANDS = {
    "solve": cmd_solve,
    "forward": cmd_forward,
    "validate": cmd_validate,
    "gallery": cmd_gallery,
    "check": cmd_check,
    "report": cmd_report,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    processor = FileProcessor()
    try:
        return COMMANDS[args.command](args, processor)
    except ConvergenceError as e:
        logger.error(f"Did not converge: {str(e)}")
        return EXIT_NOT_CONVERGED
    except (MomentSolverError, ValueError, OSError) as e:
        logger.error(f"Error during {args.command}: {str(e)}")
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
