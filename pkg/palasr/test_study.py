import json
import os

import pandas as pd
import pytest

from palasr import study as study_module
from palasr.features import gen_bigram_text, gen_splits, make_task_spec, save_corpus
from palasr.lang_model import LmTrainConfig, train_lm
from palasr.paths import paths
from palasr.study import (ExperimentConfig, StudyReport, StudyValidationError, _waves, encoder_label, load_study,
                          run_study)
from palasr.util import ConfigError

tiny_defaults = dict(arch_overrides=dict(d_model=16, n_head=2, d_ff=32, n_layer=1), conv_channels=8,
                     dropout=0., epochs=1, seeds=[0], optimizer=dict(batch_size=4, lr=1e-2, warmup_steps=1))


def write_study(tmp_path, experiments, name='study.json', **extra):
    filename = tmp_path / name
    filename.write_text(json.dumps(dict(experiments=experiments, **extra)))
    return filename


def test_experiment_config():
    config = ExperimentConfig(id=3)
    assert config.id == '3'
    assert config.seeds == [0, 1, 2]
    assert config.learning_rate == 3e-4
    assert ExperimentConfig(id='f', freeze='freeze_stack').learning_rate == 1e-3
    assert ExperimentConfig(id='c', form='conv_only').learning_rate == 1e-3
    assert ExperimentConfig(id='x', optimizer=dict(lr=0.5)).learning_rate == 0.5
    assert ExperimentConfig(id='e', form='eq3', asr_init='exp:base').asr_dependency == 'base'
    assert ExperimentConfig.from_dict(config.to_dict()) == config
    for bad in [dict(form='eq4'), dict(stack_init='lm_huge'), dict(form='eq3'), dict(asr_init='a.ckpt'),
                dict(form='conv_only', stack_init='lm_small'), dict(dropout=1.), dict(epochs=0), dict(seeds=[]),
                dict(arch_overrides=dict(n_heads=4)), dict(optimizer=dict(batch_size=0))]:
        with pytest.raises(ConfigError):
            ExperimentConfig(id='bad', **bad)
    with pytest.raises(ConfigError, match='colour'):
        ExperimentConfig.from_dict(dict(id='u', colour='red'))


def test_load_study_defaults_and_seeds(tmp_path):
    filename = write_study(tmp_path, [dict(id='a', form='conv_only'), dict(id='b', seeds=[4])],
                           defaults=dict(epochs=2), name='grid')
    study = load_study(filename)
    assert study.name == 'grid'
    assert [c.epochs for c in study.experiments] == [2, 2]
    assert study.experiments[1].seeds == [4]
    assert [c.seeds for c in load_study(filename, seeds=[9]).experiments] == [[9], [9]]
    assert load_study(write_study(tmp_path, [dict(id='a')], name='plain.json')).name == 'plain'


@pytest.mark.parametrize('experiments,message', [
    ([], 'no experiments'),
    ([dict(id='a'), dict(id='a')], 'duplicate'),
    ([dict(id='b', form='eq3', asr_init='exp:a'), dict(id='a', form='asr_base')], 'must come earlier'),
    ([dict(id='a', form='eq2'), dict(id='b', form='eq3', asr_init='exp:a')], 'not an asr_base'),
    ([dict(id='a', form='asr_base', seeds=[0]), dict(id='b', form='eq3', asr_init='exp:a', seeds=[0, 1])],
     'not all trained'),
    ([dict(id='a', form='eq5')], 'form'),
])
def test_load_study_rejects(tmp_path, experiments, message):
    with pytest.raises(StudyValidationError, match=message):
        load_study(write_study(tmp_path, experiments))


def test_load_study_unreadable(tmp_path):
    with pytest.raises(StudyValidationError):
        load_study(tmp_path / 'missing.json')
    (tmp_path / 'broken.json').write_text('{"experiments": [')
    with pytest.raises(StudyValidationError):
        load_study(tmp_path / 'broken.json')


def test_waves_follow_dependencies():
    configs = [ExperimentConfig(id='base', form='asr_base'), ExperimentConfig(id='plain'),
               ExperimentConfig(id='on_base', form='eq3', asr_init='exp:base'),
               ExperimentConfig(id='file', form='eq3', asr_init='some.ckpt')]
    assert [[c.id for c in wave] for wave in _waves(configs)] == [['base', 'plain', 'file'], ['on_base']]


def test_encoder_labels():
    assert encoder_label(ExperimentConfig(id='1', form='conv_only')) == 'Conv + Linear'
    assert encoder_label(ExperimentConfig(id='2', stack_init='lm_large')) == 'Conv + Linear + LM-large stack'
    assert 'frozen ASR encoder' in encoder_label(ExperimentConfig(id='3', form='eq3', asr_init='x'))


def fake_rows(exp_id, seed, dev, trainable=10, total=20):
    return [dict(exp_id=exp_id, seed=seed, split=split, cer=dev + offset, trainable_params=trainable,
                 total_params=total, skipped=0, wall_s=1.5) for split, offset in
            [('dev', 0.), ('test', 1.), ('homophone', 5.)]]


def test_report_tables(tmp_path):
    configs = [ExperimentConfig(id='e1', freeze='freeze_stack'), ExperimentConfig(id='e2', form='conv_only')]
    report = StudyReport(name='r', experiments=configs)
    for seed, dev in enumerate([10., 20., 40.]):
        report.rows.extend(fake_rows('e1', seed, dev))
    report.rows.extend(fake_rows('e2', 0, 50., trainable=20))
    assert report.complete
    assert report.medians().loc['e1', 'dev'] == 20.
    assert report.medians().loc['e1', 'homophone'] == 25.
    assert report.cer_table().shape[0] == 4

    md = report.to_markdown()
    lines = md.splitlines()
    assert lines[0] == '| Exp ID | ASR Encoder | Freeze | Trainable/Total | Dev CER | Test CER | Homophone CER |'
    assert '| e1 (seed 1) | Conv + Linear + random stack | yes | 10/20 | 20.00 | 21.00 | 25.00 |' in lines
    assert '| e1 (median) | Conv + Linear + random stack | yes | 10/20 | 20.00 | 21.00 | 25.00 |' in lines
    assert '| e2 (median) | Conv + Linear | no | 20/20 | 50.00 | 51.00 | 55.00 |' in lines

    report.failures.append(dict(exp_id='e2', seed=1, error='TrainingError: boom'))
    assert not report.complete
    assert '- e2 seed 1: TrainingError: boom' in report.to_markdown()

    report.save(tmp_path / 'out')
    assert pd.read_csv(tmp_path / 'out' / 'report.csv').shape == (12, 8)
    saved = json.loads((tmp_path / 'out' / 'report.json').read_text())
    assert saved['complete'] is False
    assert {m['exp_id'] for m in saved['medians']} == {'e1', 'e2'}
    assert (tmp_path / 'out' / 'report.md').read_text() == report.to_markdown()


def test_report_adds_test_other_column():
    report = StudyReport(name='r', experiments=[ExperimentConfig(id='e1', form='conv_only')])
    report.rows.extend(fake_rows('e1', 0, 10.))
    report.rows.append(dict(fake_rows('e1', 0, 10.)[0], split='test_other', cer=30.))
    lines = report.to_markdown().splitlines()
    assert lines[0] == ('| Exp ID | ASR Encoder | Freeze | Trainable/Total | Dev CER | Test CER | Test-other CER '
                        '| Homophone CER |')
    assert '| e1 (median) | Conv + Linear | no | 10/20 | 10.00 | 11.00 | 30.00 | 15.00 |' in lines


@pytest.mark.parametrize('name', ['table1', 'table2', 'table3'])
def test_shipped_studies_validate(name):
    study = load_study(paths.studies / f'{name}.json')
    assert study.name == name
    if name == 'table2':
        assert [c.id for c in study.experiments] == ['1', '2', '3', '4', '5']
        assert str(study.corpus_dir).endswith('task2')


def test_dry_run_writes_nothing(tmp_path):
    filename = write_study(tmp_path, [dict(id='a'), dict(id='b', form='conv_only')])
    report = run_study(filename, out_dir=tmp_path / 'out', dry_run=True)
    assert [c.id for c in report.experiments] == ['a', 'b']
    assert report.rows == [] and report.complete
    assert not (tmp_path / 'out').exists()


def test_missing_inputs_fail_before_training(tmp_path):
    filename = write_study(tmp_path, [dict(id='a', stack_init='lm_small')], corpus=str(tmp_path / 'data'),
                           models=str(tmp_path / 'models'))
    with pytest.raises(StudyValidationError, match='lm_small.ckpt'):
        run_study(filename, out_dir=tmp_path / 'out')


def test_failed_runs_mark_report_incomplete(tmp_path, monkeypatch):
    data = tmp_path / 'data'
    data.mkdir()
    for split in ('train', 'dev'):
        paths.corpus_file(split, data).write_bytes(b'')

    def fake_run(config, seed, *args, **kw):
        if config.id == 'bad':
            raise ConfigError('no luck')
        return fake_rows(config.id, seed, 10. * (seed + 1))
    monkeypatch.setattr(study_module, 'run_experiment', fake_run)

    filename = write_study(tmp_path, [dict(id='good', seeds=[0, 1]), dict(id='bad', seeds=[0])],
                           corpus=str(data), name='mixed.json')
    report = run_study(filename, out_dir=tmp_path / 'out', n_jobs=1)
    assert not report.complete
    assert report.failures == [dict(exp_id='bad', seed=0, error='ConfigError: no luck')]
    assert len(report.rows) == 6
    assert 'Incomplete: 1 run(s) failed.' in (tmp_path / 'out' / 'report.md').read_text()


def test_study_end_to_end(tmp_path):
    spec = make_task_spec(seed=0, vocab_size=5, n_mels=6, n_homophone_pairs=1, noise=0.3)
    data = tmp_path / 'data'
    data.mkdir()
    for split, items in gen_splits(spec, 0, sizes=dict(train=8, dev=2, test=2, homophone=2),
                                   len_range=(2, 4)).items():
        save_corpus(paths.corpus_file(split, data), items, spec.vocab_size)
    filename = write_study(tmp_path, [
        dict(id='base', form='asr_base'),
        dict(id='stacked', form='eq3', asr_init='exp:base'),
        dict(id='conv', form='conv_only'),
    ], defaults=tiny_defaults, corpus=str(data), name='e2e.json')

    report = run_study(filename, out_dir=tmp_path / 'out', n_jobs=1)
    assert report.complete, report.failures
    assert sorted({row['exp_id'] for row in report.rows}) == ['base', 'conv', 'stacked']
    assert {row['split'] for row in report.rows} == {'dev', 'test', 'homophone'}
    assert (tmp_path / 'out' / 'models' / 'base-seed0.ckpt').exists()
    stacked = [row for row in report.rows if row['exp_id'] == 'stacked'][0]
    assert stacked['trainable_params'] < stacked['total_params']


slow = pytest.mark.skipif(not os.environ.get('PAL_SLOW'), reason="set PAL_SLOW=1 for acceptance-scale runs")


@pytest.fixture(scope='module')
def full_inputs(tmp_path_factory):
    root = tmp_path_factory.mktemp('full')
    spec = make_task_spec()
    data, models = root / 'data', root / 'models'
    data.mkdir()
    models.mkdir()
    for split, items in gen_splits(spec, 0).items():
        save_corpus(paths.corpus_file(split, data), items, spec.vocab_size)
    text = gen_bigram_text(spec, 2_000_000, seed=0)
    train_lm(text, LmTrainConfig(vocab_size=spec.n_symbols, lr=1e-3), progress=False).save(models / 'lm_small.ckpt')
    return dict(corpus=str(data), models=str(models))


@slow
def test_pretrained_stack_ordering(tmp_path, full_inputs):
    filename = write_study(tmp_path, [
        dict(id='1', form='conv_only'),
        dict(id='2', stack_init='random', freeze='freeze_stack'),
        dict(id='3', stack_init='lm_small', freeze='freeze_stack'),
        dict(id='4', stack_init='random'),
        dict(id='5', stack_init='lm_small'),
    ], name='ordering.json', **full_inputs)
    report = run_study(filename, out_dir=tmp_path / 'out')
    assert report.complete
    dev = report.medians()['dev']
    assert dev['1'] - dev['2'] >= 2
    assert dev['2'] - dev['3'] >= 2
    assert dev['3'] - dev['5'] >= 2
    assert dev['5'] <= dev['4'] + 0.5


@slow
def test_transplant_helps_homophones_most(tmp_path, full_inputs):
    filename = write_study(tmp_path, [
        dict(id='asr', form='asr_base', arch='asr'),
        dict(id='asr+lm', form='eq3', asr_init='exp:asr', stack_init='lm_small', freeze_asr_encoder=False),
    ], name='homophones.json', **full_inputs)
    report = run_study(filename, out_dir=tmp_path / 'out')
    assert report.complete
    medians = report.medians()
    gain = 1 - medians.loc['asr+lm'] / medians.loc['asr']
    assert gain['homophone'] > gain['test']
