"""Command line interface.

Results go to standard output, diagnostics and logs to standard error.

Exit codes:
    0  success
    1  usage error
    2  data, file format, configuration or geometry error
    3  numerical check or calibration target failed
"""

import argparse
import logging
import os
import sys

import numpy as np
import structlog
from scipy import special

from . import VERSION
from . import analysis
from . import checks
from . import errors
from . import model as model_module
from . import persist
from . import train

log = structlog.get_logger()

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

EXIT_CODES = (
    (errors.UsageError, EXIT_USAGE),
    (errors.NumericalCheckError, EXIT_NUMERICAL),
    (errors.Error, EXIT_DATA),
    (KeyError, EXIT_USAGE),
)
"""Exception class -> exit code; the first matching class wins."""

EXIT_CODES_HELP = """exit codes:
  0  success
  1  usage error
  2  data, file format, configuration or geometry error
  3  numerical check or calibration target failed
"""


def configure_logging(verbosity=0, stream=None):
    """Render structlog events as key/value lines on ``stream``."""
    level = logging.WARNING - 10 * min(verbosity, 2)
    structlog.configure(
        processors=[structlog.processors.add_log_level,
                    structlog.processors.TimeStamper(fmt='iso'),
                    structlog.processors.KeyValueRenderer(
                        key_order=['timestamp', 'level', 'event'])],
        wrapper_class=structlog.make_filtering_bound_logger(level),
        logger_factory=structlog.PrintLoggerFactory(
            file=stream or sys.stderr),
        cache_logger_on_first_use=False)


class ArgumentParser(argparse.ArgumentParser):
    """Argument parser that raises instead of exiting on bad input."""

    def error(self, message):
        """Raise :py:class:`errors.UsageError`."""
        raise errors.UsageError('{0}: {1}'.format(self.prog, message))


def resolution(text):
    """Parse ``HxW``."""
    try:
        height, width = (int(part) for part in text.lower().split('x'))
    except ValueError:
        raise argparse.ArgumentTypeError(
            'resolution must look like 224x224, {0!r} given'.format(text))
    if height < 1 or width < 1:
        raise argparse.ArgumentTypeError('resolution must be positive')
    return height, width


def positive_int(text):
    """Parse an integer >= 1."""
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(
            'expected a positive integer, {0!r} given'.format(text))
    if value < 1:
        raise argparse.ArgumentTypeError(
            'expected a positive integer, {0} given'.format(value))
    return value


def _add_model_source(parser, required=True):
    group = parser.add_mutually_exclusive_group(required=required)
    group.add_argument('--variant', choices=model_module.PRESET_NAMES,
                       help='named preset')
    group.add_argument('--config', metavar='PATH',
                       help='config file in key = value form')


def _config_from(args):
    if args.variant:
        return model_module.preset(args.variant)
    try:
        with open(args.config) as stream:
            text = stream.read()
    except IOError as exception:
        raise errors.FormatError('cannot read {0}: {1}'.format(
            args.config, exception.strerror or exception))
    return persist.parse_config(text)


def _dataset_from(source, config, seed):
    kind, _, argument = source.partition(':')
    if kind == 'cifar10':
        if not argument:
            raise errors.UsageError('--data cifar10 needs a path: '
                                    'cifar10:PATH')
        return train.load_cifar10(argument)
    if kind == 'synthetic':
        try:
            count = positive_int(argument) if argument else 64
        except argparse.ArgumentTypeError as exception:
            raise errors.UsageError('--data synthetic:N: {0}'.format(
                exception))
        return train.synthetic_dataset(seed, count, config.num_classes)
    raise errors.UsageError('--data must be cifar10:PATH or synthetic[:N], '
                            '{0!r} given'.format(source))


def _eval_dataset_from(source, config, seed):
    kind, _, argument = source.partition(':')
    if kind == 'cifar10' and argument:
        return train.load_cifar10(argument, split='test')
    return _dataset_from(source, config, seed)


def cmd_summary(args, out):
    """Print the per-stage table, or per-layer CSV with ``--csv``."""
    config = _config_from(args)
    height, width = args.res
    if args.csv:
        out.write(analysis.count_macs(config, height, width).to_csv())
        return EXIT_OK
    model = model_module.build(config, dtype=np.float64, initialize=False)
    out.write(analysis.summarize(model, height, width))
    return EXIT_OK


def cmd_count(args, out):
    """Compare measured parameters and GMACs with published targets."""
    table = args.table
    if table is None:
        table = 3 if args.variant in analysis.PUBLISHED_TARGETS[3] else 2
    try:
        results = analysis.compare_to_published(args.variant, table, *args.res)
    except KeyError as exception:
        raise errors.UsageError(exception.args[0])
    out.write(analysis.format_checks(args.variant, results))
    failed = [check.quantity for check in results if not check.ok]
    if failed:
        raise errors.NumericalCheckError(
            'outside tolerance: {0}'.format(', '.join(failed)))
    return EXIT_OK


def cmd_train(args, out):
    """Train from scratch, write a checkpoint and metrics."""
    config = _config_from(args)
    dataset = _dataset_from(args.data, config, args.seed)
    if args.limit:
        dataset = dataset.subset(args.limit)
    settings = train.TrainSettings(optimizer=args.optimizer, lr=args.lr,
                                   weight_decay=args.weight_decay,
                                   warmup_fraction=args.warmup,
                                   pad=args.pad)
    model, history = train.train_loop(config, dataset, args.epochs,
                                      args.batch, settings, args.seed)
    if args.out:
        persist.save_checkpoint(model, args.out)
    if args.metrics:
        train.write_metrics_csv(history, args.metrics)
    last = history[-1]
    out.write('epochs {0} loss {1:.6f} top1 {2:.4f}\n'.format(
        len(history), last.loss, last.top1))
    return EXIT_OK


def cmd_eval(args, out):
    """Print eval-mode top-1 accuracy of a checkpoint."""
    model = persist.load_checkpoint(args.ckpt)
    dataset = _eval_dataset_from(args.data, model.config, args.seed)
    if args.limit:
        dataset = dataset.subset(args.limit)
    accuracy = train.evaluate(model, dataset, args.batch)
    out.write('top1 {0:.4f}\n'.format(accuracy))
    return EXIT_OK


def cmd_infer(args, out):
    """Print the top-k classes of one image."""
    model = persist.load_checkpoint(args.ckpt)
    image = persist.read_image(args.image)
    logits = train.predict(model, image)[0].astype(np.float64)
    probabilities = special.softmax(logits)
    order = np.argsort(-probabilities, kind='stable')[:args.top_k]
    for rank, index in enumerate(order, 1):
        out.write('{0} {1} {2:.6f}\n'.format(rank, index,
                                             probabilities[index]))
    return EXIT_OK


def cmd_export_features(args, out):
    """Write feature maps of one pyramid level."""
    model = persist.load_checkpoint(args.ckpt)
    image = persist.read_image(args.image).astype(
        model.params[0].value.dtype)
    maps = analysis.export_feature_maps(model, image, args.stage,
                                        args.reduce, args.k, args.out)
    for index, values in enumerate(maps):
        out.write('{0} {1}x{2}\n'.format(
            os.path.join(args.out, 'stage{0}_{1}_{2}.pgm'.format(
                args.stage, args.reduce, index)),
            values.shape[0], values.shape[1]))
    return EXIT_OK


def cmd_selftest(args, out):
    """Run the oracle and gradient suites."""
    results = checks.run_selftest(args.level, args.seed)
    for result in results:
        out.write('{0:<36} error {1:.3e}  tolerance {2:.0e}  {3}\n'.format(
            result.name, result.error, result.tolerance,
            'ok' if result.ok else 'FAIL'))
    checks.require(results)
    return EXIT_OK


def build_parser():
    """Return the top-level parser with every subcommand."""
    parser = ArgumentParser(
        prog='convmlp', description='ConvMLP backbones: accounting, '
        'training, inference and self-checks.', epilog=EXIT_CODES_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument('--version', action='version', version=VERSION)
    parser.add_argument('-v', '--verbose', action='count', default=0,
                        help='log more (repeat for debug)')
    commands = parser.add_subparsers(dest='command', metavar='COMMAND',
                                     parser_class=ArgumentParser)
    commands.required = True

    def command(name, handler, help_text):
        sub = commands.add_parser(
            name, help=help_text, description=help_text,
            epilog=EXIT_CODES_HELP,
            formatter_class=argparse.RawDescriptionHelpFormatter)
        sub.set_defaults(handler=handler)
        return sub

    sub = command('summary', cmd_summary, 'per-stage parameter and MAC table')
    _add_model_source(sub)
    sub.add_argument('--res', type=resolution, default=(224, 224),
                     metavar='HxW', help='input resolution (default 224x224)')
    sub.add_argument('--csv', action='store_true',
                     help='print per-layer CSV rows instead of the table')

    sub = command('count', cmd_count,
                  'compare parameters and GMACs with published targets')
    sub.add_argument('--variant', required=True,
                     choices=model_module.PRESET_NAMES, help='named preset')
    sub.add_argument('--res', type=resolution, default=(224, 224),
                     metavar='HxW', help='input resolution (default 224x224)')
    sub.add_argument('--table', type=int, choices=(2, 3),
                     help='2: ablation ladder, 3: model sizes (default by '
                     'variant)')

    sub = command('train', cmd_train, 'train a model from scratch')
    _add_model_source(sub)
    sub.add_argument('--data', required=True,
                     help='cifar10:PATH or synthetic[:N]')
    sub.add_argument('--epochs', type=positive_int, default=1,
                     help='passes over the dataset (default 1)')
    sub.add_argument('--batch', type=positive_int, default=32,
                     help='mini-batch size (default 32)')
    sub.add_argument('--seed', type=int, default=0,
                     help='seed of initialization, shuffling and synthetic '
                     'data (default 0)')
    sub.add_argument('--lr', type=float, default=1e-3,
                     help='peak learning rate (default 1e-3)')
    sub.add_argument('--weight-decay', type=float, default=0.05,
                     help='decoupled weight decay (default 0.05)')
    sub.add_argument('--warmup', type=float, default=0.05,
                     help='warmup fraction of all steps (default 0.05)')
    sub.add_argument('--optimizer', choices=sorted(train.OPTIMIZERS),
                     default='adamw', help='update rule (default adamw)')
    sub.add_argument('--limit', type=positive_int,
                     help='use the first N samples')
    sub.add_argument('--pad', action='store_true',
                     help='zero-pad images to a multiple of 32')
    sub.add_argument('--out', metavar='CKPT', help='checkpoint to write')
    sub.add_argument('--metrics', metavar='CSV', help='metrics CSV to write')

    sub = command('eval', cmd_eval, 'top-1 accuracy of a checkpoint')
    sub.add_argument('--ckpt', required=True, help='checkpoint to evaluate')
    sub.add_argument('--data', required=True,
                     help='cifar10:PATH (test split) or synthetic[:N]')
    sub.add_argument('--batch', type=positive_int, default=64,
                     help='evaluation batch size (default 64)')
    sub.add_argument('--seed', type=int, default=0,
                     help='seed of a synthetic dataset')
    sub.add_argument('--limit', type=positive_int,
                     help='use the first N samples')

    sub = command('infer', cmd_infer, 'top-k classes of one image')
    sub.add_argument('--ckpt', required=True, help='checkpoint to run')
    sub.add_argument('--image', required=True,
                     help='PPM/PGM raster or tensor file')
    sub.add_argument('--top-k', type=positive_int, default=5,
                     help='classes to print (default 5)')

    sub = command('export-features', cmd_export_features,
                  'write normalized feature maps of one pyramid level')
    sub.add_argument('--ckpt', required=True, help='checkpoint to run')
    sub.add_argument('--image', required=True,
                     help='PPM/PGM raster or tensor file')
    sub.add_argument('--stage', type=int, choices=(1, 2, 3, 4), required=True,
                     help='pyramid level (stride 4, 8, 16, 32)')
    sub.add_argument('--out', required=True, metavar='DIR',
                     help='directory for .pgm and .cmlt maps')
    sub.add_argument('--reduce', choices=('mean', 'per_channel'),
                     default='mean',
                     help='channel mean or top channels (default mean)')
    sub.add_argument('--k', type=positive_int, default=4,
                     help='channels written by per_channel')

    sub = command('selftest', cmd_selftest, 'gradient and oracle suites')
    sub.add_argument('--level', choices=('fast', 'full'), default='fast',
                     help='fast samples fewer geometries (default fast)')
    sub.add_argument('--seed', type=int, default=0,
                     help='seed of random cases (default 0)')
    return parser


def exit_code(exception):
    """Return the documented exit code of ``exception``."""
    for cls, code in EXIT_CODES:
        if isinstance(exception, cls):
            return code
    raise exception


def main(argv=None, out=None, err=None):
    """Run one command; return its exit code."""
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        args = build_parser().parse_args(argv)
    except errors.UsageError as exception:
        err.write('{0}\n'.format(exception))
        return EXIT_USAGE
    except SystemExit as exception:
        return exception.code or EXIT_OK
    configure_logging(args.verbose, err)
    try:
        return args.handler(args, out)
    except (errors.Error, KeyError) as exception:
        code = exit_code(exception)
        log.debug('command failed', command=args.command, exit_code=code,
                  error=str(exception))
        err.write('error: {0}\n'.format(exception))
        return code


if __name__ == '__main__':  # pragma: nocover
    sys.exit(main())
