"""
Kernel-method design and analysis of two-arm trials with longitudinal outcomes.

Subcommands write their artifacts (JSON and CSV) plus a manifest.json into
the output directory. Options come from --config (JSON or YAML) and are
overridden by the flags below.

Exit codes: 0 success, 1 usage/IO/data error, 2 model fit did not converge.
"""

import argparse
import logging
import pathlib
import sys

from kernelrct import conf, gpmodel, jobs, store

log = logging.getLogger(__name__)

SUBCOMMANDS = {
    "fit": (jobs.cmd_fit, "Fit the GP model to the asymptomatic cohort"),
    "embed": (jobs.cmd_embed, "Build the Fisher embedding and per-subject Fisher vectors"),
    "test": (jobs.cmd_test, "Two-sample test on long-format trial data"),
    "power": (jobs.cmd_power, "Power curve and sample size under the local alternative"),
    "simulate": (jobs.cmd_simulate, "FvH vs LMM power over arm sizes and measurement counts"),
    "pipeline": (jobs.cmd_pipeline, "synth, fit, embed, power and cross-validated fold power"),
    "synth": (jobs.cmd_synth, "Write a synthetic raw cohort CSV"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(jobs.EXIT_ERROR, f"{self.prog}: error: {message}\n")


def parse_arguments(argv=None):
    parser = _Parser(
        formatter_class=argparse.RawDescriptionHelpFormatter,
        description=__doc__)

    parser.add_argument(
        "--logfile",
        type=pathlib.Path,
        help="Log file path"
    )
    parser.add_argument(
        "--verbose",
        action="store_true",
        help="Set log level to DEBUG"
    )

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=pathlib.Path, help="JSON or YAML file with run options")
    common.add_argument("--seed", type=int, help="Master random seed")
    common.add_argument("--alpha", type=float, help="Significance level")
    common.add_argument("--rho", type=float, help="Fraction of the symptomatic/asymptomatic gap left after treatment")
    common.add_argument("--method", help=f"Test method: {', '.join(conf.METHODS)}")
    common.add_argument("--out", type=pathlib.Path, help="Output directory")

    subparsers = parser.add_subparsers(dest="subcommand", parser_class=_Parser)
    subparsers.required = True
    for name, (_, description) in SUBCOMMANDS.items():
        subparsers.add_parser(name, parents=[common], description=description, help=description)

    return parser.parse_args(argv)


def setup_logger(loglevel=logging.INFO, logfile=None):
    logger_format = '%(asctime)s %(levelname)s -- %(message)s'
    if logfile:
        logging.basicConfig(filename=logfile,
                            level=loglevel,
                            format=logger_format,
                            force=True)
    else:
        logging.basicConfig(stream=sys.stderr,
                            level=loglevel,
                            format=logger_format,
                            force=True)
    return logging.getLogger(__name__)


def run(args) -> int:
    config = conf.RunConfig.load(
        args.config,
        seed=args.seed, alpha=args.alpha, rho=args.rho, method=args.method,
        out=str(args.out) if args.out else None,
    )
    out = store.ArtifactStore(config.out, config=config.to_dict())
    func, _ = SUBCOMMANDS[args.subcommand]
    try:
        return func(config, out)
    finally:
        if out.artifacts:
            out.write_manifest()


def main(argv=None) -> int:
    global log

    args = parse_arguments(argv)

    if args.verbose:
        loglevel = logging.DEBUG
    else:
        loglevel = logging.INFO if args.logfile else logging.WARNING
    log = setup_logger(logfile=args.logfile, loglevel=loglevel)
    log.info("START")

    try:
        status = run(args)
    except gpmodel.NonConvergenceError as exc:
        log.error("Model fit did not converge: %s", exc)
        status = jobs.EXIT_NONCONVERGED
    except Exception as exc:
        log.debug("Fatal error", exc_info=True)
        log.error("Fatal error: %s", exc)
        status = jobs.EXIT_ERROR
    except KeyboardInterrupt:
        log.warning("Interrupted!")
        status = jobs.EXIT_ERROR
    finally:
        log.info("FINISHED")
    return status


if __name__ == "__main__":
    sys.exit(main())


# vim: set et sw=4 ts=4:
