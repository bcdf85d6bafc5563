import json

from palasr.cli import cli
from palasr.encoder import build_encoder
from palasr.features import gen_corpus, make_task_spec, save_corpus
from palasr.study import ExperimentConfig

tiny_arch = dict(d_model=16, n_head=2, d_ff=32, n_layer=1)


def write_json(filename, obj):
    filename.write_text(json.dumps(obj))
    return str(filename)


def test_usage_errors_exit_2(capsys):
    assert cli(['train-lm', '--no-such-flag']) == 2
    assert cli([]) == 2
    assert cli(['eval', 'x.ckpt', 'y.palcorp', '--precision', 'f16']) == 2


def test_missing_checkpoint(tmp_path, capsys):
    assert cli(['inspect-ckpt', str(tmp_path / 'none.ckpt')]) == 1
    assert capsys.readouterr().err.startswith('error: CheckpointError: ')


def test_eval_rejects_vocab_mismatch(tmp_path, capsys):
    spec = make_task_spec(seed=0, vocab_size=5, n_mels=6, n_homophone_pairs=1)
    save_corpus(tmp_path / 'dev.palcorp', gen_corpus(spec, 2, seed=0), spec.vocab_size)
    config = ExperimentConfig(id='v', form='conv_only', arch_overrides=tiny_arch, conv_channels=8)
    build_encoder(config, vocab_size=7, n_mels=6).to_checkpoint().save(tmp_path / 'enc.ckpt')
    assert cli(['eval', str(tmp_path / 'enc.ckpt'), str(tmp_path / 'dev.palcorp')]) == 1
    err = capsys.readouterr().err
    assert err.startswith('error: InputError: ')
    assert len(err.strip().splitlines()) == 1


def test_dry_run(tmp_path, capsys):
    study = write_json(tmp_path / 'study.json', dict(experiments=[dict(id='a'), dict(id='b', form='conv_only')]))
    assert cli(['run-study', study, '--dry-run']) == 0
    assert 'ok: 2 experiment(s) validated' in capsys.readouterr().out
    assert cli(['run-study', '--config', study, '--dry-run', '--seed', '4']) == 0
    assert 'seeds=[4]' in capsys.readouterr().out

    broken = write_json(tmp_path / 'broken.json', dict(experiments=[dict(id='a'), dict(id='a')]))
    assert cli(['run-study', broken, '--dry-run']) == 1
    assert 'error: StudyValidationError' in capsys.readouterr().err


def test_pipeline(tmp_path, capsys):
    data, models = tmp_path / 'data', tmp_path / 'models'
    gen_config = write_json(tmp_path / 'gen.json', dict(
        task=dict(vocab_size=5, n_mels=6, n_homophone_pairs=1, noise=0.3),
        sizes=dict(train=8, dev=2, test=2, homophone=2), len_range=[2, 4]))
    assert cli(['gen-data', '--config', gen_config, '--out', str(data), '-q']) == 0
    out = capsys.readouterr().out.splitlines()
    assert [line.split('\t')[:2] for line in out] == [['train', '8'], ['dev', '2'], ['test', '2'], ['homophone', '2']]
    assert (data / 'task.joblib').exists()

    lm_config = write_json(tmp_path / 'lm.json', dict(
        vocab_size=4, arch=tiny_arch, n_tokens=512, batch_size=4, context=16, eval_tokens=200, eval_every=4))
    assert cli(['train-lm', '--config', lm_config, '--data', str(data), '--out', str(models), '--name', 'lm_small',
                '-q']) == 0
    assert capsys.readouterr().out.startswith('lm_small\tperplexity\t')

    assert cli(['inspect-ckpt', str(models / 'lm_small.ckpt')]) == 0
    listing = capsys.readouterr().out
    assert listing.startswith('kind\tlm\tversion\t1\t')
    assert 'stack.final_norm\t16' in listing

    exp_config = write_json(tmp_path / 'exp.json', dict(
        id='lm2', form='eq2', stack_init='lm_small', freeze='freeze_stack', arch_overrides=tiny_arch,
        conv_channels=8, dropout=0., epochs=1, optimizer=dict(batch_size=4, warmup_steps=1)))
    assert cli(['train-asr', '--config', exp_config, '--data', str(data), '--models', str(models),
                '--out', str(models), '-q']) == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert [row['split'] for row in rows] == ['dev', 'test', 'homophone']
    assert rows[0]['trainable_params'] < rows[0]['total_params']

    assert cli(['eval', str(models / 'lm2-seed0.ckpt'), str(data / 'dev.palcorp')]) == 0
    assert capsys.readouterr().out.startswith('cer\t')


def test_train_lm_checks_vocab(tmp_path, capsys):
    data = tmp_path / 'data'
    gen_config = write_json(tmp_path / 'gen.json', dict(task=dict(vocab_size=5, n_mels=6, n_homophone_pairs=1),
                                                        sizes=dict(train=1, dev=1, test=1, homophone=1)))
    assert cli(['gen-data', '--config', gen_config, '--out', str(data), '-q']) == 0
    assert cli(['train-lm', '--data', str(data), '--tokens', '100']) == 1
    assert 'error: ConfigError' in capsys.readouterr().err
    assert cli(['train-lm', '--data', str(tmp_path / 'nowhere')]) == 1
    assert 'run gen-data first' in capsys.readouterr().err


def test_gen_data_test_other(tmp_path, capsys):
    data = tmp_path / 'data'
    gen_config = write_json(tmp_path / 'gen.json', dict(
        task=dict(vocab_size=5, n_mels=6, n_homophone_pairs=1), other_noise=3.,
        sizes=dict(train=2, dev=1, test=1, test_other=2, homophone=1), len_range=[2, 3]))
    assert cli(['gen-data', '--config', gen_config, '--task-seed', '7', '--out', str(data), '-q']) == 0
    out = capsys.readouterr().out.splitlines()
    assert [line.split('\t')[0] for line in out] == ['train', 'dev', 'test', 'homophone', 'test_other']
    assert (data / 'test_other.palcorp').exists()
