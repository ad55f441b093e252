#!/usr/bin/env python

import argparse
import copy
import signal
import sys

import shtab

from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

from pathvalidate import sanitize_filename, sanitize_filepath

from mvlatent.config import load_run_config, write_resolved
from mvlatent.datasets import IdxFormatError, load_dataset
from mvlatent.evaluation import export_features_csv, extract_features, evaluate
from mvlatent.grids import private_traversal_grid, reconstruct_grid
from mvlatent.tensor import NumericalError, RngState
from mvlatent.training import CheckpointError, load_checkpoint, train, write_table
from mvlatent.utils import ConfigError, format_json, get_logger, write_json

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4
EXIT_INTERRUPTED = 1
DEFAULT_MU = [1.0, 0.8, 0.5, 0.2]


def get_main_parser():
    def formatter(prog):
        return argparse.HelpFormatter(prog, max_help_position=25)

    parser = argparse.ArgumentParser(
        formatter_class=formatter,
        description='Use "%(prog)s command_name --help" to get detailed help to a specific command',
    )
    for grp in parser._action_groups:
        if grp.title == 'options':
            grp.title = 'Options'
        elif grp.title == 'positional arguments':
            grp.title = 'Commands'

    parser.add_argument(
        '-v',
        '--verbosity',
        help='Set verbosity level (default: info)',
        choices=['warning', 'info', 'debug'],
        default='info',
    )
    parser.add_argument('-V', '--version', help='Print version information and quit', action='store_true')
    parser_cmd = parser.add_subparsers(help='Desired action to perform', dest='command')

    # help
    parser_cmd.add_parser('help', help='Print this help message', description='Print help message', add_help=False)

    # Create parent subparser with common run arguments
    parser_run_args = argparse.ArgumentParser(add_help=False)
    parser_run_args.add_argument('-c', '--config', help='Run config (JSON)', metavar='PATH', type=Path)
    parser_run_args.add_argument('-o', '--out', help='Output directory (overrides "out")', metavar='DIR', type=Path)
    parser_run_args.add_argument('--seed', help='Seed for data generation and training', metavar='N', type=int)
    parser_run_args.add_argument(
        '--set',
        help='Override a config value, e.g. train.epochs=5 (repeatable)',
        metavar='KEY=VALUE',
        action='append',
        default=[],
        dest='overrides',
    )
    parser_run_args.add_argument('--data', help='Saved dataset directory (sets data.path)', metavar='DIR', type=Path)

    parser_checkpoint_args = argparse.ArgumentParser(add_help=False)
    parser_checkpoint_args.add_argument(
        '--checkpoint', help='Checkpoint directory', metavar='DIR', type=Path, required=True
    )

    # gen-data
    info = 'Generate the synthetic two-view dataset (or pair IDX images) and save it to the output directory'
    parser_cmd.add_parser(
        'gen-data',
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
        parents=[parser_run_args],
        help=info,
        description=info,
    )

    # train
    info = (
        'Train a model. Writes config.resolved.json, metrics.csv and checkpoint/ to the output directory.'
        + ' Use --checkpoint to resume'
    )
    parser_train = parser_cmd.add_parser(
        'train',
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
        parents=[parser_run_args],
        help=info,
        description=info,
    )
    parser_train.add_argument('--checkpoint', help='Resume from this checkpoint directory', metavar='DIR', type=Path)

    # eval
    info = 'Evaluate learned features with linear classifiers and write eval_report.json'
    parser_eval = parser_cmd.add_parser(
        'eval',
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
        parents=[parser_run_args, parser_checkpoint_args],
        help=info,
        description=info,
    )
    parser_eval.add_argument(
        '--features',
        help='Feature sources (z_from_x, z_from_y, hx, hy, concat_zx_zy); default from config',
        nargs='+',
        metavar='SOURCE',
    )
    parser_eval.add_argument('--raw-baseline', help='Add raw view-1 pixels as a baseline', action='store_true')
    parser_eval.add_argument('--cca-baseline', help='Add linear CCA projections of view 1', action='store_true')
    parser_eval.add_argument(
        '--export-features', help='Write test-split features of the first source as CSV', metavar='PATH', type=Path
    )

    # reconstruct
    info = 'Write a grid of view-2 inputs, reconstruction means and stddevs (PGM)'
    parser_reconstruct = parser_cmd.add_parser(
        'reconstruct',
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
        parents=[parser_run_args, parser_checkpoint_args],
        help=info,
        description=info,
    )
    parser_reconstruct.add_argument('output', help='Output PGM file', metavar='OUTPUT', type=Path)
    parser_reconstruct.add_argument('--rows', help='Number of test samples', metavar='N', type=int, default=8)

    # traverse
    info = 'Write a private-variable traversal grid (PGM): rows share z, columns share h_x'
    parser_traverse = parser_cmd.add_parser(
        'traverse',
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
        parents=[parser_run_args, parser_checkpoint_args],
        help=info,
        description=info,
    )
    parser_traverse.add_argument('output', help='Output PGM file', metavar='OUTPUT', type=Path)
    parser_traverse.add_argument('-n', help='Grid size', metavar='N', type=int, default=8)
    parser_traverse.add_argument('--with-inputs', help='Prepend the input images as a column', action='store_true')

    # sweep-mu
    info = 'Train and evaluate one model per mu and write sweep_mu.csv'
    parser_sweep = parser_cmd.add_parser(
        'sweep-mu',
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
        parents=[parser_run_args],
        help=info,
        description=info,
    )
    parser_sweep.add_argument('--mu', help='Values of mu', nargs='+', type=float, default=DEFAULT_MU)

    info = 'Print shell tab completion'
    parser_completion = parser_cmd.add_parser(
        'completion', formatter_class=argparse.ArgumentDefaultsHelpFormatter, help=info, description=info
    )
    shtab.add_argument_to(parser_completion, "shell", parent=parser)
    return parser


_original_sigint = signal.default_int_handler


def exit_gracefully(signum, frame):
    '''
    SIGINT handler. On a terminal it asks before abandoning the run; piped or
    scheduled runs stop at once. Checkpoints and metrics written so far stay on disk.
    '''
    # the prompt must not re-enter this handler
    signal.signal(signal.SIGINT, _original_sigint)
    if sys.stdin is not None and sys.stdin.isatty():
        try:
            answer = input('\nStop this run? Files written so far are kept (y/n)> ')
        except (KeyboardInterrupt, EOFError):
            answer = 'y'
        if not answer.strip().lower().startswith('y'):
            signal.signal(signal.SIGINT, exit_gracefully)
            return
    print('Stopping', file=sys.stderr)
    sys.exit(EXIT_INTERRUPTED)


def install_interrupt_handler():
    global _original_sigint
    _original_sigint = signal.getsignal(signal.SIGINT) or signal.default_int_handler
    signal.signal(signal.SIGINT, exit_gracefully)
    return _original_sigint



def run_config_from_args(args):
    overrides = list(args.overrides)
    if getattr(args, 'data', None) is not None:
        overrides.append(f'data.path="{args.data.as_posix()}"')
    return load_run_config(args.config, overrides, seed=args.seed, out=args.out)


def cmd_gen_data(run_cfg):
    out = Path(run_cfg.out)
    dataset = load_dataset(run_cfg.data)
    dataset.save(out)
    write_resolved(run_cfg, out)
    return dataset


def cmd_train(run_cfg, resume=None):
    out = Path(run_cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(run_cfg, out)
    dataset = load_dataset(run_cfg.data)
    return train(run_cfg.model, run_cfg.train, dataset, out, resume)


def cmd_eval(run_cfg, checkpoint, out=None, export_path=None):
    bundle, _ = load_checkpoint(checkpoint)
    dataset = load_dataset(run_cfg.data)
    report = evaluate(bundle, dataset, run_cfg.eval)
    report['checkpoint'] = str(checkpoint)
    out = Path(out) if out is not None else Path(checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / 'eval_report.json', report)
    if export_path is not None:
        idx = dataset.split_indices('test')
        which = run_cfg.eval.features[0]
        feats = extract_features(bundle, dataset.x[idx], dataset.y[idx], which)
        export_features_csv(feats, dataset.labels[idx], sanitize_filepath(export_path, platform='auto'))
    return report


def cmd_reconstruct(run_cfg, checkpoint, output, rows=8):
    bundle, state = load_checkpoint(checkpoint)
    dataset = load_dataset(run_cfg.data)
    idx = dataset.split_indices('test')[:rows]
    rng = RngState(state.seed).substream('reconstruct')
    return reconstruct_grid(bundle, dataset.x[idx], dataset.y[idx], sanitize_filepath(output, platform='auto'), rng)


def cmd_traverse(run_cfg, checkpoint, output, n=8, with_inputs=False):
    bundle, state = load_checkpoint(checkpoint)
    dataset = load_dataset(run_cfg.data)
    idx = dataset.split_indices('test')[:n]
    rng = RngState(state.seed).substream('traverse')
    return private_traversal_grid(
        bundle, dataset.x[idx], n, sanitize_filepath(output, platform='auto'), rng, with_inputs=with_inputs
    )


def cmd_sweep_mu(run_cfg, mu_list):
    '''One run per mu with a shared seed; metrics are linear-classifier accuracies of the first feature source'''
    log = get_logger(__name__)
    base = Path(run_cfg.out)
    base.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(run_cfg.data)
    which = run_cfg.eval.features[0]
    rows = []
    for mu in mu_list:
        cfg = copy.deepcopy(run_cfg)
        cfg.train.mu = mu
        try:
            cfg.train.objective(training=True)
        except ValueError as e:
            raise ConfigError(str(e), 'train.mu')
        run_dir = base / sanitize_filename(f'mu_{mu:g}')
        cfg.out = str(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        write_resolved(cfg, run_dir)
        log.info(f'Sweep: training with mu={mu:g} in {run_dir}')
        result = train(cfg.model, cfg.train, dataset, run_dir)
        report = evaluate(result.bundle, dataset, cfg.eval)
        write_json(run_dir / 'eval_report.json', report)
        scores = report['features'][which]
        rows.append({'mu': float(mu), 'tune_metric': 1.0 - scores['tune_error'], 'test_metric': 1.0 - scores['error_rate']})
    write_table(base / 'sweep_mu.csv', ('mu', 'tune_metric', 'test_metric'), rows)
    log.info(f'Wrote {len(rows)} sweep rows to {base / "sweep_mu.csv"}')
    return rows


def dispatch(args, parser):
    if args.command == 'gen-data':
        cmd_gen_data(run_config_from_args(args))
    elif args.command == 'train':
        cmd_train(run_config_from_args(args), args.checkpoint)
    elif args.command == 'eval':
        run_cfg = run_config_from_args(args)
        if args.features:
            run_cfg.eval.features = args.features
        run_cfg.eval.raw_baseline = run_cfg.eval.raw_baseline or args.raw_baseline
        run_cfg.eval.cca_baseline = run_cfg.eval.cca_baseline or args.cca_baseline
        try:
            run_cfg.eval.__post_init__()
        except ValueError as e:
            raise ConfigError(str(e), 'eval')
        report = cmd_eval(run_cfg, args.checkpoint, args.out, args.export_features)
        print(format_json(report))
    elif args.command == 'reconstruct':
        cmd_reconstruct(run_config_from_args(args), args.checkpoint, args.output, args.rows)
    elif args.command == 'traverse':
        cmd_traverse(run_config_from_args(args), args.checkpoint, args.output, args.n, args.with_inputs)
    elif args.command == 'sweep-mu':
        cmd_sweep_mu(run_config_from_args(args), args.mu)
    elif args.version:
        try:
            print(version('mvlatent'))
        except PackageNotFoundError:
            print('unknown (not installed)')
    else:
        parser.print_help()


def main(argv=None):
    previous_sigint = install_interrupt_handler()

    parser = get_main_parser()
    args = parser.parse_args(argv)

    log = get_logger(__name__, args.verbosity)
    log.setLevel(args.verbosity.upper())
    log.debug('logging is set to debug')

    try:
        dispatch(args, parser)
    except ConfigError as e:
        log.fatal(f'Config error: {e}')
        sys.exit(EXIT_CONFIG)
    except NumericalError as e:
        log.fatal(f'Numerical abort: {e}')
        sys.exit(EXIT_NUMERICAL)
    except (OSError, CheckpointError, IdxFormatError) as e:
        log.fatal(f'I/O error: {e}')
        sys.exit(EXIT_IO)
    except ValueError as e:
        log.fatal(f'Invalid input: {e}')
        sys.exit(EXIT_CONFIG)
    finally:
        signal.signal(signal.SIGINT, previous_sigint)


if __name__ == '__main__':
    main()
