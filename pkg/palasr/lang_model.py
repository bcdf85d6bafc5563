"""Decoder-only character LM over the task's text tokens.

The embedding table and output projection live here and only here; the
transformer stack in between is what gets transplanted into ASR encoders.
"""
import collections
import logging

import attr
import numpy as np
import tqdm

from .checkpoint import Checkpoint, CheckpointError
from .optim import AdamState, adam_step, clip_grad_norm, collect_grads, warmup_lr
from .tensor import cross_entropy, init_normal, log_softmax, no_grad, parameter, zero_grads
from .transformer import PRESETS, BlockConfig, TransformerStack, parameter_shapes, stack_forward
from .util import ConfigError, ContractError, InputError, TrainingError, make_rng

logger = logging.getLogger(__name__)

DEFAULT_TEXT_VOCAB = 20


def _preset(instance, attribute, value):
    if value not in PRESETS:
        raise ConfigError(f"unknown LM size {value!r}; expected one of {sorted(PRESETS)}")


def _positive(instance, attribute, value):
    if value <= 0:
        raise ConfigError(f"{attribute.name} must be positive, got {value}")


@attr.s
class LmTrainConfig:
    size = attr.ib(default='small', validator=_preset)
    vocab_size = attr.ib(default=DEFAULT_TEXT_VOCAB, validator=_positive)
    n_tokens = attr.ib(default=2_000_000, validator=_positive)
    batch_size = attr.ib(default=32, validator=_positive)
    context = attr.ib(default=64, validator=_positive)
    lr = attr.ib(default=3e-4, validator=_positive)
    warmup_steps = attr.ib(default=200)
    clip = attr.ib(default=1.0)
    dropout = attr.ib(default=0.0)
    eval_every = attr.ib(default=100, validator=_positive)
    eval_tokens = attr.ib(default=20_000)
    seed = attr.ib(default=0)
    # Overrides on top of the size preset, e.g. {"n_layer": 1}.
    arch = attr.ib(factory=dict)

    @property
    def block_config(self):
        return PRESETS[self.size].evolve(mask_mode='causal', dropout=self.dropout, **self.arch)

    @property
    def steps(self):
        return max(1, self.n_tokens // (self.batch_size * self.context))


@attr.s
class LmModel:
    config = attr.ib()
    vocab_size = attr.ib()
    embed = attr.ib()
    stack = attr.ib()
    output = attr.ib()

    preloaded = {}

    def __attrs_post_init__(self):
        if self.stack.mask_mode != 'causal':
            raise ConfigError("an LM stack must run with the causal mask")

    @classmethod
    def init(cls, config, vocab_size, rng):
        config = config.evolve(mask_mode='causal')
        embed = parameter(init_normal((vocab_size, config.d_model), rng), name='embed.weight')
        stack = TransformerStack.init(config, rng)
        output = parameter(init_normal((config.d_model, vocab_size), rng), name='output.weight')
        return cls(config=config, vocab_size=vocab_size, embed=embed, stack=stack, output=output)

    def parameters(self):
        params = collections.OrderedDict([('embed.weight', self.embed)])
        params.update(self.stack.parameters(prefix='stack.'))
        params['output.weight'] = self.output
        return params

    def to_checkpoint(self, **metadata):
        meta = dict(kind='lm', vocab_size=self.vocab_size, block_config=self.config.to_dict(),
                    components=['embed', 'stack', 'output'])
        meta.update(metadata)
        return Checkpoint.from_params(self.parameters(), metadata=meta)

    @classmethod
    def from_checkpoint(cls, ckpt):
        meta = ckpt.metadata
        if meta.get('kind') != 'lm':
            raise CheckpointError(f"expected an LM checkpoint, got kind={meta.get('kind')!r}")
        config = BlockConfig.from_dict(meta['block_config'])
        ckpt.require(['embed.weight', 'output.weight'])
        ckpt.require(parameter_shapes(config), prefix='stack.')
        return cls(config=config, vocab_size=int(meta['vocab_size']),
                   embed=parameter(ckpt.tensors['embed.weight'], name='embed.weight'),
                   stack=TransformerStack.from_arrays(config, ckpt.subset('stack.')),
                   output=parameter(ckpt.tensors['output.weight'], name='output.weight'))

    @classmethod
    def get_or_load(cls, filename):
        filename = str(filename)
        if filename not in cls.preloaded:
            cls.preloaded[filename] = Checkpoint.load(filename)
        return cls.preloaded[filename]

    def __call__(self, tokens, train_flag=False, rng=None):
        return lm_forward(self, tokens, train_flag, rng)


def _check_tokens(tokens, vocab_size):
    tokens = np.asarray(tokens)
    if not np.issubdtype(tokens.dtype, np.integer):
        raise InputError(f"tokens must be integers, got {tokens.dtype}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_size):
        raise InputError(f"token out of range [0, {vocab_size}): min {tokens.min()}, max {tokens.max()}")
    return tokens


def lm_forward(model, tokens, train_flag=False, rng=None):
    """tokens[..., T] -> logits[..., T, V_text]"""
    tokens = _check_tokens(tokens, model.vocab_size)
    x = model.embed[tokens]
    h = stack_forward(x, model.stack, 'causal', train_flag, rng)
    return h @ model.output


def _windows(n, context):
    """(start, stop) spans of at most context+1 tokens, overlapping by one."""
    spans = []
    start = 0
    while start < n - 1:
        spans.append((start, min(start + context + 1, n)))
        start += context
    return spans


def evaluate_nll(model, tokens, context=64):
    """Total next-token NLL and the number of predictions scored."""
    tokens = _check_tokens(tokens, model.vocab_size)
    if len(tokens) < 2:
        raise ContractError("need at least two tokens to score a next-token prediction")
    spans = _windows(len(tokens), context)
    total, count = 0., 0
    by_length = collections.defaultdict(list)
    for start, stop in spans:
        by_length[stop - start].append(tokens[start:stop])
    with no_grad():
        for length, chunks in sorted(by_length.items()):
            batch = np.stack(chunks)
            lp = log_softmax(lm_forward(model, batch[:, :-1]), axis=-1).data
            picked = np.take_along_axis(lp, batch[:, 1:, None], axis=-1)
            total -= float(picked.astype(np.float64).sum())
            count += batch.shape[0] * (length - 1)
    return total, count


def perplexity(model, tokens, context=64):
    total, count = evaluate_nll(model, tokens, context)
    return float(np.exp(total / count))


def train_lm(tokens, config=LmTrainConfig(), valid_tokens=None, progress=True):
    """Next-token cross-entropy with Adam; returns the trained LM as a Checkpoint."""
    tokens = _check_tokens(tokens, config.vocab_size)
    if len(tokens) < 2:
        raise ContractError("LM training corpus must hold at least two tokens")
    context = min(config.context, len(tokens) - 1)
    init_rng, data_rng, drop_rng = (make_rng(config.seed, k) for k in range(3))

    model = LmModel.init(config.block_config, config.vocab_size, init_rng)
    params = model.parameters()
    state = AdamState.for_params(params, lr=config.lr)
    offsets = np.arange(context + 1)
    train_flag = config.dropout > 0
    loss_curve, eval_curve = [], []
    logger.info("Training %s LM: %d steps of %dx%d tokens", config.size, config.steps, config.batch_size, context)

    for step in tqdm.trange(config.steps, desc="LM", disable=not progress):
        starts = data_rng.integers(0, len(tokens) - context, size=config.batch_size)
        batch = tokens[starts[:, None] + offsets[None, :]]
        logits = lm_forward(model, batch[:, :-1], train_flag, drop_rng)
        loss = cross_entropy(logits, batch[:, 1:])
        value = loss.item()
        if not np.isfinite(value):
            logger.error("LM loss diverged at step %d", step)
            raise TrainingError("LM loss is not finite", step=step)
        zero_grads(params)
        loss.backward()
        clip_grad_norm(params, config.clip)
        state.lr = warmup_lr(config.lr, step, config.warmup_steps)
        adam_step(params, collect_grads(params), state)
        loss_curve.append(value)

        if valid_tokens is not None and (step + 1) % config.eval_every == 0:
            held_out = valid_tokens[:config.eval_tokens] if config.eval_tokens else valid_tokens
            ppl = perplexity(model, held_out, context)
            eval_curve.append([step + 1, ppl])
            logger.info("step %d: train loss %.4f, held-out perplexity %.4f", step + 1, value, ppl)

    return model.to_checkpoint(
        loss_curve=loss_curve, eval_curve=eval_curve, context=context,
        train_config=attr.asdict(config))
