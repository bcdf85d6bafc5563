"""Command line for data generation, LM pretraining, ASR training and studies.

Failures print one line, `error: <ErrorClass>: <message>`, on stderr and exit 1;
usage errors exit 2.
"""
import argparse
import logging
import pathlib
import sys

import numpy as np
from dotenv import find_dotenv, load_dotenv

try:
    import ujson as json
except ImportError:
    import json

from .checkpoint import Checkpoint
from .encoder import AssembledEncoder, count_parameters
from .features import (DEFAULT_TASK_SEED, SynthTaskSpec, bigram_entropy, gen_bigram_text, gen_splits,
                       load_corpus, make_task_spec, save_corpus, unigram_entropy)
from .lang_model import LmModel, LmTrainConfig, perplexity, train_lm
from .paths import paths
from .study import ExperimentConfig, load_splits, report_rows, run_study
from .tensor import precision
from .train_asr import evaluate, train_asr
from .util import ConfigError, InputError, PalError, limit_threads, make_rng

logger = logging.getLogger(__name__)

TASK_FILE = 'task.joblib'
TEXT_KEY = 7
HELD_OUT_KEY = 8


def _read_json(filename):
    if filename is None:
        return {}
    try:
        with open(filename) as f:
            return json.load(f)
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot read config {filename}: {e}")


def cmd_gen_data(args):
    options = _read_json(args.config)
    out = pathlib.Path(args.out or paths.data)
    out.mkdir(parents=True, exist_ok=True)
    task_options = options.get('task', {})
    spec = make_task_spec(seed=args.task_seed, **task_options)
    spec.save(out / TASK_FILE)
    logger.info("Task: unigram entropy %.4f nats, bigram entropy %.4f nats", unigram_entropy(spec), bigram_entropy(spec))
    splits = gen_splits(spec, args.seed, sizes=options.get('sizes'), len_range=tuple(options.get('len_range', (3, 12))),
                        progress=not args.quiet, other_noise=options.get('other_noise'))
    for split, items in splits.items():
        fingerprint = save_corpus(paths.corpus_file(split, out), items, spec.vocab_size)
        print(f"{split}\t{len(items)}\t{fingerprint}")
    return 0


def load_task(data_dir):
    filename = pathlib.Path(data_dir or paths.data) / TASK_FILE
    if not filename.exists():
        raise ConfigError(f"no task spec at {filename}; run gen-data first")
    return SynthTaskSpec.load(filename)


def cmd_train_lm(args):
    options = _read_json(args.config)
    if args.size:
        options['size'] = args.size
    if args.tokens:
        options['n_tokens'] = args.tokens
    options['seed'] = args.seed
    try:
        config = LmTrainConfig(**options)
    except TypeError as e:
        raise ConfigError(f"bad LM config: {e}")
    spec = load_task(args.data)
    if config.vocab_size != spec.n_symbols:
        raise ConfigError(f"LM vocabulary {config.vocab_size} does not match the task's {spec.n_symbols} symbols")
    text = gen_bigram_text(spec, config.n_tokens, make_rng(args.seed, TEXT_KEY))
    held_out = gen_bigram_text(spec, max(config.eval_tokens, 2), make_rng(args.seed, HELD_OUT_KEY))
    ckpt = train_lm(text, config, valid_tokens=held_out, progress=not args.quiet)
    out = pathlib.Path(args.out or paths.models)
    out.mkdir(parents=True, exist_ok=True)
    name = args.name or f'lm_{config.size}'
    ckpt.save(paths.model_file(name, out))
    ppl = perplexity(LmModel.from_checkpoint(ckpt), held_out, ckpt.metadata['context'])
    print(f"{name}\tperplexity\t{ppl:.4f}\tfloor\t{np.exp(bigram_entropy(spec)):.4f}")
    return 0


def _lm_checkpoints(models_dir):
    found = {}
    for name in ('lm_small', 'lm_large'):
        filename = paths.model_file(name, models_dir)
        if filename.exists():
            found[name] = Checkpoint.load(filename)
    return found


def cmd_train_asr(args):
    if args.config is None:
        raise ConfigError("train-asr needs --config with one experiment")
    options = _read_json(args.config)
    config = ExperimentConfig.from_dict(options)
    checkpoints = _lm_checkpoints(args.models)
    asr_init = args.asr or config.asr_init
    if config.form == 'eq3':
        if asr_init is None or asr_init.startswith('exp:'):
            raise ConfigError(f"{config.id}: pass the pretrained ASR encoder with --asr")
        checkpoints['asr'] = Checkpoint.load(asr_init)
    corpus = load_splits(args.data or config.corpus or paths.data)
    enc, log = train_asr(config, corpus, checkpoints, seed=args.seed, progress=not args.quiet)
    out = pathlib.Path(args.out or paths.models)
    out.mkdir(parents=True, exist_ok=True)
    enc.to_checkpoint(exp_id=config.id, seed=args.seed).save(out / f'{config.id}-seed{args.seed}.ckpt')
    for row in report_rows(config, args.seed, enc, log, corpus):
        print(json.dumps(row))
    return 0


def cmd_eval(args):
    enc = AssembledEncoder.from_checkpoint(Checkpoint.load(args.ckpt))
    corpus = load_corpus(args.corpus)
    if corpus.vocab_size != enc.vocab_size:
        raise InputError(f"encoder vocabulary {enc.vocab_size} does not match corpus vocabulary {corpus.vocab_size}")
    if corpus.n_mels != enc.n_mels:
        raise InputError(f"encoder expects {enc.n_mels} mel bins, corpus has {corpus.n_mels}")
    trainable, total = count_parameters(enc)
    print(f"cer\t{evaluate(enc, list(corpus)):.4f}\tutterances\t{len(corpus)}\tparams\t{trainable}/{total}")
    return 0


def cmd_run_study(args):
    study_file = args.study or args.config
    if study_file is None:
        raise ConfigError("run-study needs a study file")
    seeds = [args.seed] if args.seed is not None else None
    report = run_study(study_file, out_dir=args.out, n_jobs=args.jobs, dry_run=args.dry_run,
                       precision=args.precision, seeds=seeds)
    if args.dry_run:
        for config in report.experiments:
            print(f"{config.id}\t{config.form}\t{config.stack_init}\t{config.freeze}\tseeds={config.seeds}")
        print(f"ok: {len(report.experiments)} experiment(s) validated")
    else:
        print(report.to_markdown(), end='')
    return 0 if report.complete else 1


def cmd_inspect_ckpt(args):
    ckpt = Checkpoint.load(args.ckpt)
    meta = ckpt.metadata
    print(f"kind\t{meta.get('kind')}\tversion\t{ckpt.version}\ttensors\t{len(ckpt.tensors)}")
    for key in ('form', 'block_config', 'stack_config', 'frontend', 'freeze_policy', 'corpus_fingerprint'):
        if key in meta:
            print(f"{key}\t{json.dumps(meta[key], sort_keys=True)}")
    for line in ckpt.describe():
        print(line)
    return 0


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--precision', choices=['f32', 'f64'], default='f32')
    common.add_argument('-v', '--verbose', action='store_true')
    common.add_argument('-q', '--quiet', action='store_true', help="no progress bars")

    parser = argparse.ArgumentParser(prog='palasr', description=__doc__)
    sub = parser.add_subparsers(dest='command')
    sub.required = True

    p = sub.add_parser('gen-data', parents=[common], help="synthesize the task and its corpus splits")
    p.add_argument('--config')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--task-seed', type=int, default=DEFAULT_TASK_SEED)
    p.add_argument('--out')
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser('train-lm', parents=[common], help="pretrain a causal LM on bigram text")
    p.add_argument('--config')
    p.add_argument('--size', choices=['small', 'large'])
    p.add_argument('--tokens', type=int)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--data')
    p.add_argument('--out')
    p.add_argument('--name')
    p.set_defaults(func=cmd_train_lm)

    p = sub.add_parser('train-asr', parents=[common], help="train one experiment for one seed")
    p.add_argument('--config')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--data')
    p.add_argument('--models')
    p.add_argument('--asr')
    p.add_argument('--out')
    p.set_defaults(func=cmd_train_asr)

    p = sub.add_parser('eval', parents=[common], help="greedy-decoding CER of an encoder on a corpus file")
    p.add_argument('ckpt')
    p.add_argument('corpus')
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('run-study', parents=[common], help="run a JSON study and write its report")
    p.add_argument('study', nargs='?')
    p.add_argument('--config')
    p.add_argument('--seed', type=int)
    p.add_argument('--out')
    p.add_argument('--jobs', type=int)
    p.add_argument('--dry-run', action='store_true')
    p.set_defaults(func=cmd_run_study)

    p = sub.add_parser('inspect-ckpt', parents=[common], help="list a checkpoint's tensors")
    p.add_argument('ckpt')
    p.set_defaults(func=cmd_inspect_ckpt)
    return parser


def cli(argv=None):
    load_dotenv(find_dotenv(usecwd=True))
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return e.code
    logging.getLogger().setLevel(logging.DEBUG if args.verbose else logging.INFO)
    try:
        limit_threads()
        with precision(args.precision):
            return args.func(args)
    except PalError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def main():
    logging.basicConfig(format='%(asctime)s : %(levelname)s : %(message)s', level=logging.INFO)
    return cli()
