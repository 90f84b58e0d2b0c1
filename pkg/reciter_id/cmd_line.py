from pathlib import Path
import argparse
import json
import logging
import sys

import logzero
from logzero import logger

from .audio_io import DEFAULT_RATIOS, load_manifest, read_wav, save_manifest, stratified_split
from .classify import predict
from .config import load_train_config, write_effective_config
from .errors import DataError, NumericError, TrainingError, UsageError
from .gradcheck import DEFAULT_SEEDS, run_suite
from .metrics import most_confused_pairs, write_report
from .synthgen import synth_corpus
from .trainer import TRAINLOG_FILE, TrainLog, evaluate_detailed, finetune, load_model, pretrain


EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises UsageError instead of exiting."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f'{self.prog}: error: {message}')


def _ratios(text):
    try:
        ratios = tuple(float(v) for v in text.split(','))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f'expected three comma-separated fractions, got {text!r}') from e
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise argparse.ArgumentTypeError(f'expected three positive fractions summing to 1, got {text!r}')
    return ratios


def _add_training_flags(parser):
    parser.add_argument('--config', help='Training config file (key = value lines).')
    parser.add_argument('--manifest', required=True, help='Manifest (JSON lines).')
    parser.add_argument('--seed', type=int, help='Overrides the config seed.')
    parser.add_argument('--max-iter', type=int, help='Overrides the config max_iter.')
    parser.add_argument('--checkpoint-dir', help='Overrides the config checkpoint_dir.')


def build_parser():
    parser = _Parser(
        prog='reciter-id',
        description='Speaker identification from raw audio with self-supervised pretraining.',
    )
    parser.add_argument('--verbose', action='store_true', help='Log at DEBUG level.')
    commands = parser.add_subparsers(dest='command', parser_class=_Parser)

    synth = commands.add_parser('synth', help='Write a synthetic multi-speaker corpus and its manifest.')
    synth.add_argument('--speakers', type=int, required=True)
    synth.add_argument('--clips', type=int, required=True, help='Clips per speaker.')
    synth.add_argument('--duration', type=float, default=2.0, help='Clip length in seconds.')
    synth.add_argument('--out', required=True, help='Output directory.')
    synth.add_argument('--seed', type=int, default=0)
    synth.set_defaults(handler=_synth)

    split = commands.add_parser('split', help='Reassign train/val/test splits, stratified by speaker.')
    split.add_argument('--manifest', required=True)
    split.add_argument('--ratios', type=_ratios, default=DEFAULT_RATIOS, help='e.g. 0.8,0.1,0.1')
    split.add_argument('--seed', type=int, default=0)
    split.add_argument('--out', help='Where to write the new manifest. Defaults to rewriting --manifest.')
    split.set_defaults(handler=_split)

    pre = commands.add_parser('pretrain', help='Self-supervised pretraining (wav2vec2 or HuBERT objective).')
    _add_training_flags(pre)
    pre.add_argument('--objective', choices=('w2v', 'hubert'), required=True)
    pre.add_argument('--refine-from', help='HuBERT checkpoint whose hidden states give refined targets.')
    pre.set_defaults(handler=_pretrain)

    fine = commands.add_parser('finetune', help='Supervised speaker classification training.')
    _add_training_flags(fine)
    fine.add_argument('--init', help='Pretraining checkpoint to start the encoder from.')
    fine.set_defaults(handler=_finetune)

    ev = commands.add_parser('evaluate', help='Metrics, confusion matrix and predictions on a split.')
    ev.add_argument('--ckpt', required=True)
    ev.add_argument('--manifest', required=True)
    ev.add_argument('--split', default='test', choices=('train', 'val', 'test'))
    ev.add_argument('--out', required=True, help='Report directory.')
    ev.add_argument('--batch-size', type=int, default=8)
    ev.set_defaults(handler=_evaluate)

    pred = commands.add_parser('predict', help='Speaker decision per WAV file, as JSON lines on stdout.')
    pred.add_argument('--ckpt', required=True)
    pred.add_argument('--wav', required=True, nargs='+')
    pred.set_defaults(handler=_predict)

    grad = commands.add_parser('gradcheck', help='Finite-difference gradient suite.')
    grad.add_argument('--seeds', type=int, default=len(DEFAULT_SEEDS), help='Number of seeds per case.')
    grad.add_argument('--case', action='append', help='Run only this case (repeatable).')
    grad.set_defaults(handler=_gradcheck)
    return parser


def parse_arguments(argv):
    """
    Usage:
    $ reciter-id [--verbose] {synth,split,pretrain,finetune,evaluate,predict,gradcheck} ...

    Raises UsageError for unknown subcommands or flags.
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        raise UsageError('a subcommand is required')
    return args


def _synth(args):
    manifest = synth_corpus(args.speakers, args.clips, args.duration, args.out, args.seed)
    logger.info(f'Wrote {len(manifest)} clips of {manifest.n_classes} speakers to {args.out}')


def _split(args):
    manifest = stratified_split(load_manifest(args.manifest), args.ratios, args.seed)
    out = Path(args.out or args.manifest)
    save_manifest(manifest, out)
    counts = {name: len(manifest.in_split(name)) for name in ('train', 'val', 'test')}
    logger.info(f'Split {len(manifest)} entries into {counts}, wrote {out}')


def _training_config(args, objective):
    overrides = {'objective': objective, 'seed': args.seed, 'max_iter': args.max_iter,
                 'checkpoint_dir': args.checkpoint_dir}
    config = load_train_config(args.config, overrides)
    write_effective_config(config, config.checkpoint_dir)
    return config


def _pretrain(args):
    config = _training_config(args, args.objective)
    checkpoint, _ = pretrain(config, load_manifest(args.manifest), refine_from=args.refine_from)
    logger.info(f'Pretraining done, checkpoint {checkpoint.path}')


def _finetune(args):
    config = _training_config(args, 'finetune')
    checkpoint, _ = finetune(config, load_manifest(args.manifest), init=args.init)
    logger.info(f'Fine-tuning done, checkpoint {checkpoint.path}')


def _evaluate(args):
    model = load_model(args.ckpt)
    result = evaluate_detailed(model, load_manifest(args.manifest), args.split, args.batch_size)
    for true, predicted, count in most_confused_pairs(result.confusion):
        logger.info(f'Confused {true} -> {predicted}: {count}')
    trainlog = Path(args.ckpt).parent / TRAINLOG_FILE
    log = TrainLog.read_csv(trainlog) if trainlog.is_file() else None
    write_report(result.report, result.confusion, log, args.out, result.predictions)


def _predict(args):
    model = load_model(args.ckpt)
    for path in args.wav:
        label, probs = predict(read_wav(path), model)
        record = {'path': str(path), 'label': label, 'probs': [float(p) for p in probs.data]}
        sys.stdout.write(json.dumps(record) + '\n')
    sys.stdout.flush()


def _gradcheck(args):
    results = run_suite(seeds=tuple(range(args.seeds)), names=args.case)
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise NumericError(f'gradient check failed for {", ".join(failed)}')


def run(argv):
    """Run one subcommand; returns the process exit code."""
    try:
        args = parse_arguments(argv)
    except UsageError as e:
        sys.stderr.write(f'{e}\n')
        return EXIT_USAGE
    except SystemExit as e:
        # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    logzero.loglevel(logging.DEBUG if args.verbose else logging.INFO)
    try:
        args.handler(args)
    except UsageError as e:
        logger.error(str(e))
        return EXIT_USAGE
    except (DataError, OSError) as e:
        logger.error(f'{type(e).__name__}: {e}')
        return EXIT_DATA
    except (NumericError, TrainingError) as e:
        logger.error(f'{type(e).__name__}: {e}')
        return EXIT_RUNTIME
    except ValueError as e:
        # precondition violations on flag values
        logger.error(f'{type(e).__name__}: {e}')
        return EXIT_DATA
    return EXIT_OK


def cmd_line_shortcut():
    sys.exit(run(sys.argv[1:]))
