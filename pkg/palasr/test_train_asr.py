import numpy as np
import pytest

from palasr import train_asr as train_module
from palasr.encoder import build_encoder
from palasr.features import Corpus, FeatureSequence, LabelSequence, corpus_fingerprint, gen_corpus, make_task_spec
from palasr.lang_model import LmModel, LmTrainConfig
from palasr.study import ExperimentConfig, report_rows
from palasr.tensor import Tensor
from palasr.train_asr import TrainingLog, decode_corpus, evaluate, feasible_items, train_asr
from palasr.util import ConfigError, TrainingError, make_rng

tiny_arch = dict(d_model=16, n_head=2, d_ff=32, n_layer=1)
quick = dict(batch_size=4, lr=1e-2, warmup_steps=1)


def tiny_config(**kw):
    kw.setdefault('epochs', 3)
    return ExperimentConfig(id=kw.pop('id', 'tiny'), arch_overrides=tiny_arch, conv_channels=8, dropout=0.,
                            optimizer=quick, **kw)


def tiny_corpus(n_train=24, n_dev=6):
    spec = make_task_spec(seed=0, vocab_size=5, n_mels=6, n_homophone_pairs=1, noise=0.3)
    corpus = {}
    for i, (split, n) in enumerate([('train', n_train), ('dev', n_dev)]):
        items = gen_corpus(spec, n, len_range=(2, 4), seed=i)
        corpus[split] = Corpus(items=items, vocab_size=5, n_mels=6, fingerprint=corpus_fingerprint(items, 5))
    return corpus


def test_conv_only_training_reduces_loss():
    corpus = tiny_corpus()
    enc, log = train_asr(tiny_config(form='conv_only'), corpus, seed=0)
    assert log.steps == 3 * 6
    assert len(log.losses) == 18
    assert np.mean(log.losses[-6:]) < np.mean(log.losses[:6])
    assert len(log.dev_cer) == 3
    assert log.best_epoch == int(np.argmin(log.dev_cer))
    assert log.skipped == 0
    assert log.wall_s > 0
    assert enc.metadata['corpus_fingerprint'] == corpus['train'].fingerprint
    # The returned encoder is the best-dev one.
    assert evaluate(enc, list(corpus['dev'])) == pytest.approx(min(log.dev_cer))


def test_training_is_deterministic():
    corpus = tiny_corpus(n_train=8, n_dev=2)
    config = tiny_config(form='eq2', epochs=2)
    enc_a, a = train_asr(config, corpus, seed=5)
    enc_b, b = train_asr(config, corpus, seed=5)
    _, c = train_asr(config, corpus, seed=6)
    assert a.losses == b.losses
    assert a.losses != c.losses
    assert enc_a.to_checkpoint().to_bytes() == enc_b.to_checkpoint().to_bytes()

    def rows(enc, log):
        return [{k: v for k, v in row.items() if k != 'wall_s'} for row in report_rows(config, 5, enc, log, corpus)]
    assert rows(enc_a, a) == rows(enc_b, b)
    assert [row['split'] for row in rows(enc_a, a)] == ['dev']


def test_frozen_stack_is_untouched():
    corpus = tiny_corpus(n_train=8, n_dev=2)
    lm_config = LmTrainConfig(vocab_size=4, arch=tiny_arch)
    lm = LmModel.init(lm_config.block_config, 4, make_rng(1)).to_checkpoint()
    config = tiny_config(form='eq2', stack_init='lm_small', freeze='freeze_stack', epochs=1)
    assert config.learning_rate == quick['lr']
    enc, _ = train_asr(config, corpus, dict(lm_small=lm), seed=0)
    for name, arr in lm.subset('stack.').items():
        assert np.array_equal(enc.stack.params[name].data, arr)
    fresh = build_encoder(config, lm_ckpt=lm, seed=0, vocab_size=5, n_mels=6)
    assert not np.array_equal(enc.adapter.weight.data, fresh.adapter.weight.data)


def test_missing_checkpoints():
    corpus = tiny_corpus(n_train=4, n_dev=2)
    with pytest.raises(ConfigError, match='lm_large'):
        train_asr(tiny_config(form='eq2', stack_init='lm_large'), corpus)
    with pytest.raises(ConfigError):
        train_asr(tiny_config(form='eq3', asr_init='exp:base'), corpus)


def test_infeasible_utterances_are_skipped():
    config = tiny_config(form='asr_base')
    enc = build_encoder(config, vocab_size=5, n_mels=6)
    short = (FeatureSequence(np.zeros((12, 6))), LabelSequence([1, 2, 3], vocab_size=5))
    repeats = (FeatureSequence(np.zeros((18, 6))), LabelSequence([1, 1], vocab_size=5))
    fine = (FeatureSequence(np.zeros((18, 6))), LabelSequence([1, 2], vocab_size=5))
    kept, skipped = feasible_items(enc, [short, repeats, fine])
    assert skipped == 1
    assert [labels.tolist() for _, labels in kept] == [[1, 1], [1, 2]]


def test_divergence_raises(monkeypatch):
    monkeypatch.setattr(train_module, 'ctc_loss', lambda log_probs, labels: (Tensor(np.nan), None))
    with pytest.raises(TrainingError, match='step 0'):
        train_asr(tiny_config(form='conv_only'), tiny_corpus(n_train=4, n_dev=2))


def test_decode_and_evaluate():
    corpus = tiny_corpus(n_train=4, n_dev=3)
    enc = build_encoder(tiny_config(form='conv_only'), vocab_size=5, n_mels=6)
    hyps = decode_corpus(enc, list(corpus['dev']))
    assert len(hyps) == 3
    assert all(isinstance(h, LabelSequence) for h in hyps)
    assert evaluate(enc, list(corpus['dev'])) >= 0.


def test_smoothed_losses():
    log = TrainingLog(losses=[4., 2., 0., 2.])
    assert log.smoothed(2).tolist() == [3., 1., 1.]
    assert log.smoothed(10).tolist() == [2.]
    assert len(TrainingLog().smoothed()) == 0
