import argparse
import logging
import sys

from retina_align import __version__
from retina_align.consts import (EXIT_DATA, EXIT_OK, FeatureChoice, Method,
                                 Precision, PromptMode, TaskType)
from retina_align.exceptions import ConfigError, RetinaAlignError
from retina_align.pipeline import (run_adapt, run_eval, run_gradcheck,
                                   run_pretrain, run_synth, run_zeroshot)
from retina_align.utils import UI, get_config_file, parse_config_file

VERSION_TEMPLATE = '%(prog)s {}'.format(__version__)


DESCRIPTION = """
Category-aware vision-language alignment on precomputed features.

Pretrain projection heads with expert-knowledge prompts, classify with
prompt-ensemble prototypes, transfer with few-shot adapters and score the
results with the k-shot / cross-validation protocol.

Image features come as EMB1 embedding files, samples as JSON lines
manifests whose labels are category names or abbreviations.
"""


EPILOG = """
Example:
  $ retina_align synth --out-emb feats.emb --out-manifest data.jsonl
  $ retina_align pretrain --manifest data.jsonl --image-emb feats.emb \
  --out model.json
  $ retina_align zeroshot --model model.json --manifest data.jsonl \
  --image-emb feats.emb --mode ek --out predictions.jsonl
"""


GLOBAL_DEFAULTS = {
    'seed': None,
    'precision': None,
    'threads': 1,
    'prompt_bank': None,
    'registry': None,
    'text_dim': None,
    'text_seed': None,
    'stdout': False,
    'verbose': False,
}


def _add_global_flags(parser, suppress):
    """Global flags; subcommands accept them too, without defaults, so a
    flag given after the subcommand wins over one given before it."""
    default = (lambda value: argparse.SUPPRESS) if suppress else (
        lambda value: value)
    parser.add_argument('--seed', type=int,
                        default=default(GLOBAL_DEFAULTS['seed']),
                        help='Seed of every random stream.')
    parser.add_argument('--precision', choices=sorted(Precision.DTYPES),
                        default=default(GLOBAL_DEFAULTS['precision']),
                        help='Floating point precision of training.')
    parser.add_argument('--threads', type=int,
                        default=default(GLOBAL_DEFAULTS['threads']),
                        help='Worker threads for fold evaluation. '
                        '(default: %(default)r)')
    parser.add_argument('--prompt-bank', dest='prompt_bank', type=str,
                        default=default(GLOBAL_DEFAULTS['prompt_bank']),
                        help='Prompt bank JSON file; the shipped '
                        'expert-knowledge bank is used if not given.')
    parser.add_argument('--registry', type=str,
                        default=default(GLOBAL_DEFAULTS['registry']),
                        help='Category registry JSON file; the shipped '
                        'registry is used if not given.')
    parser.add_argument('--text-dim', dest='text_dim', type=int,
                        default=default(GLOBAL_DEFAULTS['text_dim']),
                        help='Dimension of the surrogate text features.')
    parser.add_argument('--text-seed', dest='text_seed', type=int,
                        default=default(GLOBAL_DEFAULTS['text_seed']),
                        help='Seed of the surrogate text featurizer.')
    parser.add_argument('--verbose', '-v', action='store_true',
                        default=default(GLOBAL_DEFAULTS['verbose']),
                        help='Log debug details (per batch and per fold).')
    parser.add_argument('--stdout', action='store_true',
                        default=default(GLOBAL_DEFAULTS['stdout']),
                        help='Send all log messages to stdout instead of '
                        'a log file.')


def _add_data_args(parser, model=True):
    if model:
        parser.add_argument('--model', dest='model_path', required=True,
                            help='Model file written by pretrain.')
    parser.add_argument('--manifest', required=True,
                        help='JSON lines manifest of the samples.')
    parser.add_argument('--image-emb', dest='image_emb', required=True,
                        help='EMB1 file of the image features.')


def _classes(value):
    return [name.strip() for name in value.split(',') if name.strip()]


def _fraction(value):
    value = float(value)
    if not 0 < value <= 1:
        raise argparse.ArgumentTypeError('fraction must lie in (0, 1]')
    return value


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    _add_global_flags(common, suppress=True)

    parser = argparse.ArgumentParser(
        prog='retina_align', description=DESCRIPTION, epilog=EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument('--version', action='version',
                        version=VERSION_TEMPLATE, help='Show version')
    _add_global_flags(parser, suppress=False)
    commands = parser.add_subparsers(dest='command', metavar='COMMAND')
    commands.required = True

    pretrain = commands.add_parser(
        'pretrain', parents=[common],
        help='Train the projection heads and temperature.')
    _add_data_args(pretrain, model=False)
    pretrain.add_argument('--config', help='ini file with a [train] '
                          'section overriding the training defaults.')
    pretrain.add_argument('--out', required=True, help='Model file.')
    pretrain.add_argument('--loss-trace', dest='loss_trace',
                          help='JSON lines loss trace '
                          '(default: <out>_loss.jsonl).')

    zeroshot = commands.add_parser(
        'zeroshot', parents=[common],
        help='Classify with prompt prototypes, no fitting.')
    _add_data_args(zeroshot)
    zeroshot.add_argument('--mode', choices=PromptMode.ALL,
                          default=PromptMode.EK,
                          help='Prompt strategy. (default: %(default)r)')
    zeroshot.add_argument('--classes', type=_classes,
                          help='Comma-separated class names or '
                          'abbreviations; all labelled classes if omitted.')
    zeroshot.add_argument('--out', required=True,
                          help='Predictions JSON lines file.')
    zeroshot.add_argument('--report', help='Optional report JSON file.')

    adapt = commands.add_parser(
        'adapt', parents=[common],
        help='Fit and evaluate a few-shot adapter over CV folds.')
    _add_data_args(adapt)
    adapt.add_argument('--method', choices=Method.ALL, required=True)
    regime = adapt.add_mutually_exclusive_group()
    regime.add_argument('--shots', type=int,
                        help='Support samples per class.')
    regime.add_argument('--fraction', type=_fraction,
                        help='Fraction of the train pool used as support.')
    adapt.add_argument('--features', dest='feature_choice',
                       choices=sorted(FeatureChoice.FLAGS),
                       help='Linear-probe features. (default: vision)')
    adapt.add_argument('--classes', type=_classes,
                       help='Comma-separated class names or abbreviations.')
    adapt.add_argument('--mode', choices=(PromptMode.NAIVE, PromptMode.EK),
                       default=PromptMode.NAIVE,
                       help='Prompt strategy of the zero-shot prototypes. '
                       '(default: %(default)r)')
    adapt.add_argument('--task', choices=(TaskType.MULTICLASS,
                                          TaskType.ORDINAL, TaskType.BINARY),
                       default=TaskType.MULTICLASS)
    adapt.add_argument('--folds', type=int, default=5)
    adapt.add_argument('--test-fraction', dest='test_fraction', type=float,
                       default=0.2)
    adapt.add_argument('--config', help='ini file with an [adapter] '
                       'section overriding the adapter defaults.')
    adapt.add_argument('--out', required=True, help='Fitted adapter file.')
    adapt.add_argument('--predictions', help='Predictions JSON lines file.')
    adapt.add_argument('--report', help='Optional report JSON file.')

    evaluate = commands.add_parser(
        'eval', parents=[common],
        help='Score a predictions file against manifest labels.')
    evaluate.add_argument('--predictions', required=True)
    evaluate.add_argument('--labels', required=True,
                          help='Manifest holding the true labels.')
    evaluate.add_argument('--task', choices=(TaskType.MULTICLASS,
                                             TaskType.ORDINAL,
                                             TaskType.BINARY),
                          default=TaskType.MULTICLASS)
    evaluate.add_argument('--classes', type=_classes,
                          help='Class order (grades for ordinal tasks, '
                          'negative then positive for binary ones).')
    evaluate.add_argument('--out', required=True, help='Report JSON file.')

    gradcheck = commands.add_parser(
        'gradcheck', parents=[common],
        help='Check analytic gradients against finite differences.')
    gradcheck.add_argument('--configs', dest='n_configs', type=int,
                           default=200)

    synth = commands.add_parser(
        'synth', parents=[common],
        help='Write a synthetic clustered dataset.')
    synth.add_argument('--classes', dest='n_classes', type=int, default=4)
    synth.add_argument('--per-class', dest='n_per_class', type=int,
                       default=100)
    synth.add_argument('--dim', type=int, default=16)
    synth.add_argument('--separation', type=float, default=4.0)
    synth.add_argument('--noise', type=float, default=0.5)
    synth.add_argument('--out-emb', dest='out_emb', required=True)
    synth.add_argument('--out-manifest', dest='out_manifest', required=True)
    return parser


def parse_args(argv):
    parser = build_parser()
    defaults = dict(GLOBAL_DEFAULTS)
    conf_file = get_config_file()
    if conf_file:
        try:
            defaults.update(parse_config_file(conf_file))
        except ConfigError as e:
            parser.error(str(e))
    parser.set_defaults(**defaults)
    return vars(parser.parse_args(argv))


def _common(parsed_args, *names):
    return {name: parsed_args[name] for name in names}


def dispatch(parsed_args, ui):
    command = parsed_args['command']
    if command == 'pretrain':
        return run_pretrain(ui=ui, **_common(
            parsed_args, 'manifest', 'image_emb', 'out', 'prompt_bank',
            'registry', 'config', 'seed', 'precision', 'text_dim',
            'text_seed', 'loss_trace'))
    if command == 'zeroshot':
        return run_zeroshot(ui=ui, **_common(
            parsed_args, 'model_path', 'manifest', 'image_emb', 'out', 'mode',
            'classes', 'prompt_bank', 'registry', 'text_dim', 'text_seed',
            'report'))
    if command == 'adapt':
        kwargs = _common(
            parsed_args, 'model_path', 'manifest', 'image_emb', 'out',
            'method', 'predictions', 'shots', 'fraction', 'seed', 'classes',
            'mode', 'config', 'folds', 'test_fraction', 'task', 'threads',
            'prompt_bank', 'registry', 'text_dim', 'text_seed', 'report')
        choice = parsed_args['feature_choice']
        kwargs['feature_choice'] = FeatureChoice.FLAGS.get(choice)
        return run_adapt(ui=ui, **kwargs)
    if command == 'eval':
        return run_eval(ui=ui, **_common(
            parsed_args, 'predictions', 'labels', 'out', 'task', 'classes',
            'registry'))
    if command == 'gradcheck':
        return run_gradcheck(ui, n_configs=parsed_args['n_configs'],
                             seed=parsed_args['seed'] or 0)
    if command == 'synth':
        return run_synth(ui=ui, seed=parsed_args['seed'] or 0, **_common(
            parsed_args, 'out_emb', 'out_manifest', 'n_classes',
            'n_per_class', 'dim', 'separation', 'noise', 'registry'))
    raise ConfigError('unknown command {!r}'.format(command))


def main(argv=sys.argv[1:]):
    global ui  # module level so tests can inspect the last run
    parsed_args = parse_args(argv)
    loglevel = logging.DEBUG if parsed_args['verbose'] else logging.INFO
    ui = UI(loglevel, parsed_args['stdout'])
    ui.debug(parsed_args)
    ui.info('version: {}'.format(__version__))
    ui.info('platform: {} {}'.format(sys.platform, sys.version))

    exit_code = EXIT_OK
    try:
        dispatch(parsed_args, ui)
    except RetinaAlignError as e:
        ui.error(str(e))
        exit_code = e.exit_code
    except OSError as e:
        ui.error(str(e))
        exit_code = EXIT_DATA
    except Exception as e:
        ui.fatal('unexpected error: {}'.format(e))
    finally:
        ui.close()
    sys.exit(exit_code)


if __name__ == '__main__':
    main()
