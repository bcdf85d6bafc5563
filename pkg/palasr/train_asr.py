"""CTC fine-tuning of an assembled encoder on a synthetic corpus."""
import collections
import logging
import time

import attr
import numpy as np
import tqdm
from cytoolz import partition_all

from .ctc import ctc_loss, greedy_decode, required_min_length
from .encoder import build_encoder, count_parameters, encoder_forward
from .metrics import cer
from .optim import AdamState, adam_step, clip_grad_norm, collect_grads, warmup_lr
from .tensor import no_grad, zero_grads
from .util import ConfigError, TrainingError, make_rng

logger = logging.getLogger(__name__)

SHUFFLE_KEY = 2
DROPOUT_KEY = 3


@attr.s
class TrainingLog:
    losses = attr.ib(factory=list)
    dev_cer = attr.ib(factory=list)
    skipped = attr.ib(default=0)
    best_epoch = attr.ib(default=None)
    steps = attr.ib(default=0)
    wall_s = attr.ib(default=0.)

    def smoothed(self, window=50):
        """Trailing mean of the step losses."""
        losses = np.asarray(self.losses, dtype=np.float64)
        if len(losses) == 0:
            return losses
        kernel = np.ones(min(window, len(losses))) / min(window, len(losses))
        return np.convolve(losses, kernel, mode='valid')


def feasible_items(enc, items):
    """Split items into those CTC can align after downsampling and a skip count."""
    keep = [(feats, labels) for feats, labels in items
            if enc.output_length(feats.num_frames) >= required_min_length(labels)]
    return keep, len(items) - len(keep)


def decode_corpus(enc, items):
    with no_grad():
        return [greedy_decode(encoder_forward(enc, feats)) for feats, _ in items]


def evaluate(enc, items):
    """Greedy-decoding CER (percent) of the encoder on (features, labels) items."""
    hyps = decode_corpus(enc, items)
    return cer([labels for _, labels in items], hyps)


def _require_checkpoints(config, checkpoints):
    if config.form != 'conv_only' and config.stack_init != 'random' and config.stack_init not in checkpoints:
        raise ConfigError(f"experiment {config.id!r} needs the {config.stack_init} checkpoint")
    if config.form == 'eq3' and 'asr' not in checkpoints:
        raise ConfigError(f"experiment {config.id!r} needs a pretrained ASR encoder checkpoint")


def train_asr(config, corpus, checkpoints=None, seed=0, progress=False):
    """Adam on the CTC loss; returns the best-dev encoder and its TrainingLog.

    `corpus` maps split names to Corpus objects (train and dev are required);
    `checkpoints` maps 'lm_small' / 'lm_large' / 'asr' to Checkpoints.
    """
    checkpoints = checkpoints or {}
    _require_checkpoints(config, checkpoints)
    train, dev = corpus['train'], corpus['dev']
    start = time.perf_counter()

    enc = build_encoder(config, asr_ckpt=checkpoints.get('asr'), lm_ckpts=checkpoints, seed=seed,
                        vocab_size=train.vocab_size, n_mels=train.n_mels,
                        corpus_fingerprint=train.fingerprint)
    trainable = collections.OrderedDict((name, p) for name, p in enc.parameters().items() if p.requires_grad)
    opt = config.optimizer
    lr = config.learning_rate
    state = AdamState.for_params(trainable, lr=lr, beta1=opt.beta1, beta2=opt.beta2, epsilon=opt.epsilon)

    items, skipped = feasible_items(enc, list(train))
    log = TrainingLog(skipped=skipped)
    if skipped:
        logger.warning("%s seed %d: skipping %d infeasible training utterances", config.id, seed, skipped)
    n_trainable, n_total = count_parameters(enc)
    logger.info("%s seed %d: %d/%d trainable parameters, lr %g, %d utterances",
                config.id, seed, n_trainable, n_total, lr, len(items))

    shuffle_rng = make_rng(seed, SHUFFLE_KEY)
    drop_rng = make_rng(seed, DROPOUT_KEY)
    best_cer, best_state = np.inf, None
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(items))
        batches = list(partition_all(opt.batch_size, order))
        for batch in tqdm.tqdm(batches, desc=f"{config.id} epoch {epoch + 1}", disable=not progress):
            zero_grads(trainable)
            total = 0.
            for i in batch:
                feats, labels = items[i]
                loss, _ = ctc_loss(encoder_forward(enc, feats, True, drop_rng), labels)
                (loss * (1. / len(batch))).backward()
                total += loss.item()
            mean_loss = total / len(batch)
            if not np.isfinite(mean_loss):
                logger.error("%s seed %d: CTC loss diverged at step %d", config.id, seed, log.steps)
                raise TrainingError("CTC loss is not finite", step=log.steps)
            if trainable:
                clip_grad_norm(trainable, opt.clip)
                state.lr = warmup_lr(lr, log.steps, opt.warmup_steps)
                adam_step(trainable, collect_grads(trainable), state)
            log.losses.append(mean_loss)
            log.steps += 1

        dev_cer = evaluate(enc, list(dev))
        log.dev_cer.append(dev_cer)
        logger.info("%s seed %d epoch %d: loss %.4f, dev CER %.2f",
                    config.id, seed, epoch + 1, np.mean(log.losses[-len(batches):]) if batches else np.nan, dev_cer)
        if dev_cer < best_cer:
            best_cer, best_state, log.best_epoch = dev_cer, enc.state_dict(), epoch

    if best_state is not None:
        enc.load_state(best_state)
    enc.metadata['corpus_fingerprint'] = train.fingerprint
    log.wall_s = time.perf_counter() - start
    return enc, log
