"""
Command-line front door: `run`, `gradcheck` and `profile`.
"""
import argparse
import logging
import os
import sys
from typing import Callable, Sequence

from .configuration import Config
from .documents import dump_document, load_document
from .exceptions import (
    ConfigError,
    ContractError,
    DatasetIOError,
    ModPromptError,
    NumericError,
    ScheduleError,
)
from .experiment import ExperimentConfig, run_experiment, run_gradcheck, run_profile


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4
REPORT_NAME = 'report.yaml'


def exit_code(error: BaseException) -> int:
    """
    :return: the exit status a failure maps to
    """
    if isinstance(error, (ConfigError, ScheduleError, ContractError)):
        return EXIT_CONFIG
    if isinstance(error, NumericError):
        return EXIT_NUMERIC
    if isinstance(error, (DatasetIOError, OSError)):
        return EXIT_IO
    return EXIT_FAILURE


def _report_path(args: argparse.Namespace, config: ExperimentConfig) -> str:
    if args.out:
        return args.out
    if config.output:
        return config.output
    return os.path.join(Config.output_dir, REPORT_NAME)


def cmd_run(args: argparse.Namespace) -> int:
    config = ExperimentConfig.load(args.config)
    if args.seed is not None:
        config.seeds = [args.seed]
    report = run_experiment(config)
    path = _report_path(args, config)
    dump_document(report, path)
    logger.info('Report written to %s.', path)
    print(path)
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    config = ExperimentConfig.load(args.config)
    if args.seed is not None:
        config.gradcheck.seed = args.seed
    outcome = run_gradcheck(config)
    verdict = 'pass' if outcome.passed else 'fail'
    print('{}: max relative error {:.3e} over {} coordinates (tolerance {:.0e})'.format(
        verdict,
        outcome.max_error,
        outcome.parameter_count,
        outcome.tolerance,
    ))
    if args.out:
        dump_document({
            'passed': outcome.passed,
            'max_error': outcome.max_error,
            'tolerance': outcome.tolerance,
            'parameter_count': outcome.parameter_count,
            'errors': outcome.errors,
        }, args.out)
    return EXIT_OK if outcome.passed else EXIT_NUMERIC


def cmd_profile(args: argparse.Namespace) -> int:
    doc = load_document(args.schedule)
    profile = run_profile(doc, args.patches, args.layers, args.width)
    print(profile.format_table())
    if args.out:
        dump_document(profile.to_dict(), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='modprompt',
        description='Modular prompt learning experiments on a toy CLIP.',
    )
    parser.add_argument('--verbose', '-v', action='store_true', help='log every training step')
    commands = parser.add_subparsers(dest='command', required=True)

    run = commands.add_parser('run', help='run the configured protocol and write a report')
    run.add_argument('config', help='experiment config (YAML)')
    run.add_argument('--seed', type=int, help='run this single seed instead of the configured list')
    run.add_argument('--out', help='report path, defaults to ${}/{}'.format(
        'MODPROMPT_OUTPUT_DIR', REPORT_NAME,
    ))
    run.set_defaults(handler=cmd_run)

    gradcheck = commands.add_parser('gradcheck', help='compare gradients with finite differences')
    gradcheck.add_argument('config', help='experiment config (YAML)')
    gradcheck.add_argument('--seed', type=int, help='seed of the checked model')
    gradcheck.add_argument('--out', help='also write the per-parameter errors here')
    gradcheck.set_defaults(handler=cmd_gradcheck)

    profile = commands.add_parser('profile', help='context length and cost of a schedule')
    profile.add_argument('schedule', help='schedule document (YAML)')
    profile.add_argument('--patches', type=int, required=True, help='patch count ξ')
    profile.add_argument('--layers', type=int, required=True, help='encoder depth ℓ')
    profile.add_argument('--width', type=int, default=768, help='width used by the cost estimate')
    profile.add_argument('--out', help='also write the profile as YAML here')
    profile.set_defaults(handler=cmd_profile)

    return parser


def main(argv: Sequence[str] = None) -> int:
    """
    :param argv: arguments without the program name, defaults to `sys.argv`
    :return: process exit status
    """
    args = build_parser().parse_args(argv)
    if args.verbose:
        Config.set_log_level(logging.DEBUG)
    logging.basicConfig(
        level=Config.log_level,
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )

    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except (ModPromptError, OSError) as error:
        logger.error('%s', error)
        print('error: {}'.format(error), file=sys.stderr)
        return exit_code(error)
