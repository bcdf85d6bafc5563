"""Experiment grids: configs, parallel runs over seeds, and the report tables."""
import collections
import logging
import pathlib

import attr
import joblib
import numpy as np
import pandas as pd

try:
    import ujson as json
except ImportError:
    import json

from .checkpoint import Checkpoint
from .encoder import FORMS, count_parameters
from .features import load_corpus
from .paths import paths
from . import tensor
from .train_asr import evaluate, train_asr
from .transformer import PRESETS
from .util import ConfigError, PalError, env_int, limit_threads

logger = logging.getLogger(__name__)

STACK_INITS = ('random', 'lm_small', 'lm_large')
SPLITS = ('train', 'dev', 'test', 'test_other', 'homophone')
EVAL_SPLITS = ('dev', 'test', 'test_other', 'homophone')
SPLIT_TITLES = dict(dev='Dev CER', test='Test CER', test_other='Test-other CER', homophone='Homophone CER')
DEFAULT_REPORT_SPLITS = ('dev', 'test', 'homophone')
COLUMNS = ['exp_id', 'seed', 'split', 'cer', 'trainable_params', 'total_params', 'skipped', 'wall_s']


class StudyValidationError(PalError):
    pass


def _one_of(choices):
    def check(instance, attribute, value):
        if value not in choices:
            raise ConfigError(f"{attribute.name} must be one of {choices}, got {value!r}")
    return check


def _optimizer(value):
    if isinstance(value, OptimizerConfig):
        return value
    return OptimizerConfig(**(value or {}))


@attr.s
class OptimizerConfig:
    # None picks 1e-3 for frontend-only training and 3e-4 for full fine-tuning.
    lr = attr.ib(default=None)
    warmup_steps = attr.ib(default=100)
    batch_size = attr.ib(default=16)
    beta1 = attr.ib(default=0.9)
    beta2 = attr.ib(default=0.999)
    epsilon = attr.ib(default=1e-8)
    clip = attr.ib(default=5.0)

    @batch_size.validator
    def _check_batch(self, attribute, value):
        if value < 1:
            raise ConfigError(f"batch_size must be >= 1, got {value}")


@attr.s
class ExperimentConfig:
    id = attr.ib(converter=str)
    form = attr.ib(default='eq2', validator=_one_of(FORMS))
    stack_init = attr.ib(default='random', validator=_one_of(STACK_INITS))
    arch = attr.ib(default='small', validator=_one_of(tuple(PRESETS)))
    arch_overrides = attr.ib(factory=dict)
    freeze = attr.ib(default='none')
    freeze_asr_encoder = attr.ib(default=True)
    asr_init = attr.ib(default=None)
    dropout = attr.ib(default=0.1)
    optimizer = attr.ib(factory=OptimizerConfig, converter=_optimizer)
    epochs = attr.ib(default=15)
    seeds = attr.ib(factory=lambda: [0, 1, 2], converter=list)
    corpus = attr.ib(default=None)
    stack_m = attr.ib(default=7)
    stack_rate = attr.ib(default=6)
    conv_channels = attr.ib(default=256)
    description = attr.ib(default='')

    def __attrs_post_init__(self):
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"{self.id}: dropout must lie in [0, 1), got {self.dropout}")
        if self.epochs < 1:
            raise ConfigError(f"{self.id}: epochs must be >= 1")
        if not self.seeds:
            raise ConfigError(f"{self.id}: at least one seed is required")
        if self.form == 'eq3' and not self.asr_init:
            raise ConfigError(f"{self.id}: eq3 experiments need asr_init")
        if self.form != 'eq3' and self.asr_init:
            raise ConfigError(f"{self.id}: asr_init only applies to eq3 experiments")
        if self.form == 'conv_only' and self.stack_init != 'random':
            raise ConfigError(f"{self.id}: a conv_only encoder has no stack to initialize")
        try:
            self.block_config
        except TypeError as e:
            raise ConfigError(f"{self.id}: bad arch_overrides {self.arch_overrides}: {e}")

    @property
    def block_config(self):
        return PRESETS[self.arch].evolve(mask_mode='full', dropout=self.dropout, **self.arch_overrides)

    @property
    def frozen_stack(self):
        freeze = self.freeze if isinstance(self.freeze, (list, tuple)) else [self.freeze]
        return 'freeze_stack' in freeze

    @property
    def learning_rate(self):
        if self.optimizer.lr is not None:
            return self.optimizer.lr
        return 1e-3 if self.frozen_stack or self.form == 'conv_only' else 3e-4

    @property
    def asr_dependency(self):
        if self.asr_init and self.asr_init.startswith('exp:'):
            return self.asr_init[len('exp:'):]
        return None

    def to_dict(self):
        return attr.asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {a.name for a in attr.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown experiment fields: {sorted(unknown)}")
        return cls(**d)


@attr.s
class Study:
    name = attr.ib()
    experiments = attr.ib()
    corpus = attr.ib(default=None)
    models = attr.ib(default=None)

    @property
    def corpus_dir(self):
        return pathlib.Path(self.corpus) if self.corpus else paths.data

    @property
    def models_dir(self):
        return pathlib.Path(self.models) if self.models else paths.models


def load_study(filename, seeds=None):
    """Parse and validate a JSON study file."""
    filename = pathlib.Path(filename)
    try:
        with open(filename) as f:
            raw = json.load(f)
    except (OSError, ValueError) as e:
        raise StudyValidationError(f"cannot read study {filename}: {e}")
    if isinstance(raw, list):
        raw = dict(experiments=raw)
    entries = raw.get('experiments') or []
    if not entries:
        raise StudyValidationError(f"study {filename} lists no experiments")
    defaults = raw.get('defaults', {})
    experiments = []
    seen = set()
    for entry in entries:
        try:
            config = ExperimentConfig.from_dict(dict(defaults, **entry))
        except (ConfigError, TypeError) as e:
            raise StudyValidationError(f"{filename}: experiment {entry.get('id', '?')}: {e}")
        if config.id in seen:
            raise StudyValidationError(f"{filename}: duplicate experiment id {config.id!r}")
        dep = config.asr_dependency
        if dep is not None:
            if dep not in seen:
                raise StudyValidationError(f"{config.id}: asr_init references {dep!r}, which must come earlier")
            source = next(e for e in experiments if e.id == dep)
            if source.form != 'asr_base':
                raise StudyValidationError(f"{config.id}: asr_init {dep!r} is not an asr_base experiment")
        if seeds is not None:
            config = attr.evolve(config, seeds=list(seeds))
        seen.add(config.id)
        experiments.append(config)
    if seeds is None:
        for config in experiments:
            dep = config.asr_dependency
            if dep is not None:
                source = next(e for e in experiments if e.id == dep)
                if not set(config.seeds) <= set(source.seeds):
                    raise StudyValidationError(f"{config.id}: seeds {config.seeds} are not all trained by {dep!r}")
    return Study(name=raw.get('name', filename.stem), experiments=experiments,
                 corpus=raw.get('corpus'), models=raw.get('models'))


def encoder_label(config):
    stack = {'random': 'random', 'lm_small': 'LM-small', 'lm_large': 'LM-large'}[config.stack_init]
    if config.form == 'conv_only':
        return 'Conv + Linear'
    if config.form == 'eq2':
        return f'Conv + Linear + {stack} stack'
    if config.form == 'asr_base':
        return 'ASR encoder (stacked frames)'
    frozen = 'frozen ' if config.freeze_asr_encoder else ''
    return f'{frozen}ASR encoder + Linear + {stack} stack'


@attr.s
class StudyReport:
    name = attr.ib()
    experiments = attr.ib()
    rows = attr.ib(factory=list)
    failures = attr.ib(factory=list)

    @property
    def complete(self):
        return not self.failures

    @property
    def frame(self):
        return pd.DataFrame(self.rows, columns=COLUMNS)

    def cer_table(self):
        """One row per (exp_id, seed), one column per evaluated split."""
        df = self.frame
        if df.empty:
            return df
        table = df.pivot_table(index=['exp_id', 'seed'], columns='split', values='cer', aggfunc='first')
        params = df.groupby(['exp_id', 'seed'])[['trainable_params', 'total_params', 'skipped']].first()
        return table.join(params)

    def medians(self):
        table = self.cer_table()
        if table.empty:
            return table
        return table.groupby(level='exp_id').median()

    def to_markdown(self):
        by_id = {config.id: config for config in self.experiments}
        table = self.cer_table()
        medians = self.medians()
        evaluated = set(self.frame['split'])
        splits = [s for s in EVAL_SPLITS if s in evaluated] or list(DEFAULT_REPORT_SPLITS)
        header = ['Exp ID', 'ASR Encoder', 'Freeze', 'Trainable/Total'] + [SPLIT_TITLES[s] for s in splits]
        lines = ['| ' + ' | '.join(header) + ' |', '|' + '---|' * len(header)]

        def fmt(row, split):
            value = row.get(split, np.nan)
            return '-' if pd.isnull(value) else f'{value:.2f}'

        def line(exp_id, seed_label, row):
            config = by_id[exp_id]
            counts = f"{int(row['trainable_params'])}/{int(row['total_params'])}"
            return '| ' + ' | '.join([
                f'{exp_id} ({seed_label})', encoder_label(config), 'yes' if config.frozen_stack else 'no', counts,
                *(fmt(row, split) for split in splits)]) + ' |'

        for config in self.experiments:
            if config.id not in medians.index:
                continue
            for (exp_id, seed), row in table.loc[[config.id]].iterrows():
                lines.append(line(exp_id, f'seed {seed}', row))
            lines.append(line(config.id, 'median', medians.loc[config.id]))
        if self.failures:
            lines.append('')
            lines.append(f'Incomplete: {len(self.failures)} run(s) failed.')
            for failure in self.failures:
                lines.append(f"- {failure['exp_id']} seed {failure['seed']}: {failure['error']}")
        return '\n'.join(lines) + '\n'

    def to_json(self):
        medians = self.medians()
        medians = json.loads(medians.reset_index().to_json(orient='records')) if not medians.empty else []
        return dict(name=self.name, complete=self.complete, failures=self.failures,
                    rows=self.rows, medians=medians)

    def save(self, out_dir):
        out_dir = pathlib.Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.frame.to_csv(out_dir / 'report.csv', index=False)
        (out_dir / 'report.md').write_text(self.to_markdown())
        with open(out_dir / 'report.json', 'w') as f:
            json.dump(self.to_json(), f, indent=2)
        logger.info("Wrote report to %s", out_dir)


def encoder_file(model_dir, exp_id, seed):
    return pathlib.Path(model_dir) / f'{exp_id}-seed{seed}.ckpt'


def load_splits(corpus_dir):
    splits = {}
    for split in SPLITS:
        filename = paths.corpus_file(split, corpus_dir)
        if filename.exists():
            splits[split] = load_corpus(filename)
        elif split in ('train', 'dev'):
            raise ConfigError(f"missing corpus split {filename}")
        elif split != 'test_other':
            logger.warning("No %s split at %s", split, filename)
    return splits


def lm_checkpoint_files(models_dir):
    return {name: paths.model_file(name, models_dir) for name in STACK_INITS if name != 'random'}


def report_rows(config, seed, enc, log, corpus):
    trainable, total = count_parameters(enc)
    rows = []
    for split in EVAL_SPLITS:
        if split not in corpus:
            continue
        rows.append(dict(exp_id=config.id, seed=seed, split=split, cer=evaluate(enc, list(corpus[split])),
                         trainable_params=trainable, total_params=total, skipped=log.skipped,
                         wall_s=log.wall_s))
    return rows


def run_experiment(config, seed, corpus_dir, lm_files, asr_file=None, model_dir=None,
                   precision='f32', progress=False):
    """Train and evaluate one (experiment, seed) pair; returns its report rows."""
    limit_threads()
    corpus = load_splits(config.corpus or corpus_dir)
    checkpoints = {}
    if config.form != 'conv_only' and config.stack_init != 'random':
        checkpoints[config.stack_init] = Checkpoint.load(lm_files[config.stack_init])
    if asr_file is not None:
        checkpoints['asr'] = Checkpoint.load(asr_file)
    with tensor.precision(precision):
        enc, log = train_asr(config, corpus, checkpoints, seed=seed, progress=progress)
        if model_dir is not None:
            pathlib.Path(model_dir).mkdir(parents=True, exist_ok=True)
            enc.to_checkpoint(exp_id=config.id, seed=seed).save(encoder_file(model_dir, config.id, seed))
        return report_rows(config, seed, enc, log, corpus)


def _run_job(config, seed, corpus_dir, lm_files, asr_file, model_dir, precision):
    try:
        return dict(rows=run_experiment(config, seed, corpus_dir, lm_files, asr_file, model_dir, precision))
    except Exception as e:
        logger.exception("%s seed %d failed", config.id, seed)
        return dict(rows=[], error=f'{type(e).__name__}: {e}')


def _waves(experiments):
    """Group experiments so every asr_init source runs in an earlier wave."""
    level = {}
    for config in experiments:
        dep = config.asr_dependency
        level[config.id] = 0 if dep is None else level[dep] + 1
    waves = collections.defaultdict(list)
    for config in experiments:
        waves[level[config.id]].append(config)
    return [waves[i] for i in sorted(waves)]


def _asr_file(config, seed, model_dir):
    if config.form != 'eq3':
        return None
    dep = config.asr_dependency
    if dep is None:
        return pathlib.Path(config.asr_init)
    return encoder_file(model_dir, dep, seed)


def check_inputs(study):
    lm_files = lm_checkpoint_files(study.models_dir)
    problems = []
    for config in study.experiments:
        if config.form != 'conv_only' and config.stack_init != 'random' and not lm_files[config.stack_init].exists():
            problems.append(f"{config.id}: missing {lm_files[config.stack_init]}")
        if config.form == 'eq3' and config.asr_dependency is None and not pathlib.Path(config.asr_init).exists():
            problems.append(f"{config.id}: missing {config.asr_init}")
        corpus_dir = config.corpus or study.corpus_dir
        for split in ('train', 'dev'):
            if not paths.corpus_file(split, corpus_dir).exists():
                problems.append(f"{config.id}: missing {paths.corpus_file(split, corpus_dir)}")
    if problems:
        raise StudyValidationError('; '.join(sorted(set(problems))))
    return lm_files


def run_study(study_file, out_dir=None, n_jobs=None, dry_run=False, precision='f32', seeds=None):
    """Run every (experiment, seed) of a study file and write report.{md,csv,json}."""
    study = load_study(study_file, seeds=seeds)
    if dry_run:
        for config in study.experiments:
            logger.info("would run %s (%s, %s init) for seeds %s", config.id, config.form, config.stack_init,
                        config.seeds)
        return StudyReport(name=study.name, experiments=study.experiments)

    lm_files = check_inputs(study)
    out_dir = pathlib.Path(out_dir) if out_dir else paths.reports / study.name
    model_dir = out_dir / 'models'
    n_jobs = n_jobs or env_int('PAL_JOBS', 1)
    results = {}
    for wave in _waves(study.experiments):
        jobs = [(config, seed) for config in wave for seed in config.seeds]
        logger.info("Running %d job(s) on %d worker(s)", len(jobs), n_jobs)
        outputs = joblib.Parallel(n_jobs=n_jobs)(
            joblib.delayed(_run_job)(config, seed, study.corpus_dir, lm_files,
                                     _asr_file(config, seed, model_dir), model_dir, precision)
            for config, seed in jobs)
        results.update(zip(((config.id, seed) for config, seed in jobs), outputs))

    report = StudyReport(name=study.name, experiments=study.experiments)
    for config in study.experiments:
        for seed in config.seeds:
            result = results[config.id, seed]
            report.rows.extend(result['rows'])
            if 'error' in result:
                report.failures.append(dict(exp_id=config.id, seed=seed, error=result['error']))
    if not report.complete:
        logger.warning("Study %s is incomplete: %d failed run(s)", study.name, len(report.failures))
    report.save(out_dir)
    return report
