"""Encoder assembly: frontends, adapter, LM-stack transplant and freezing.

Forms:
  conv_only  ConvFrontend -> Adapter -> CTC head
  eq2        ConvFrontend -> Adapter -> Stack(full) -> CTC head
  asr_base   StackFrontend -> Adapter -> own Stack(full) -> CTC head
  eq3        PretrainedAsrEncoder -> Adapter -> Stack(full) -> CTC head

A trained asr_base encoder, minus its head, is the PretrainedAsrEncoder of eq3.
"""
import collections
import logging

import attr
import numpy as np

from .checkpoint import Checkpoint, CheckpointError
from .features import DEFAULT_N_MELS, DEFAULT_VOCAB_SIZE, FeatureSequence
from .tensor import Tensor, conv1d, conv1d_output_length, init_normal, log_softmax, parameter, silu
from .transformer import BlockConfig, TransformerStack, parameter_shapes, stack_forward
from .util import InputError, InputTooShortError, PalError, make_rng

logger = logging.getLogger(__name__)

FORMS = ('conv_only', 'eq2', 'eq3', 'asr_base')
FREEZE_POLICIES = ('none', 'freeze_stack', 'freeze_asr_encoder')
INIT_KEY = 1


class AssemblyError(PalError):
    pass


class PolicyError(PalError):
    pass


@attr.s
class Linear:
    weight = attr.ib()
    bias = attr.ib()

    @classmethod
    def init(cls, n_in, n_out, rng, name):
        return cls(weight=parameter(init_normal((n_in, n_out), rng), name=f'{name}.weight'),
                   bias=parameter(np.zeros(n_out), name=f'{name}.bias'))

    @classmethod
    def from_arrays(cls, arrays, name):
        return cls(weight=parameter(arrays['weight'], name=f'{name}.weight'),
                   bias=parameter(arrays['bias'], name=f'{name}.bias'))

    def parameters(self, prefix):
        return collections.OrderedDict([(prefix + 'weight', self.weight), (prefix + 'bias', self.bias)])

    def __call__(self, x):
        return x @ self.weight + self.bias


@attr.s
class ConvFrontend:
    """Two stride-2 convolutions with SiLU: T -> ceil(T/2) -> ceil(T/4)."""
    conv1_w = attr.ib()
    conv1_b = attr.ib()
    conv2_w = attr.ib()
    conv2_b = attr.ib()
    kernel = 3
    stride = 2
    padding = 1

    @classmethod
    def init(cls, n_in, rng, channels=256):
        k = cls.kernel
        return cls(conv1_w=parameter(init_normal((k, n_in, channels), rng)),
                   conv1_b=parameter(np.zeros(channels)),
                   conv2_w=parameter(init_normal((k, channels, channels), rng)),
                   conv2_b=parameter(np.zeros(channels)))

    @classmethod
    def from_arrays(cls, arrays):
        return cls(*(parameter(arrays[name]) for name in
                     ('conv1.weight', 'conv1.bias', 'conv2.weight', 'conv2.bias')))

    @property
    def input_dim(self):
        return self.conv1_w.shape[1]

    @property
    def output_dim(self):
        return self.conv2_w.shape[2]

    def describe(self):
        return dict(kind='conv', channels=self.output_dim)

    def parameters(self, prefix='frontend.'):
        return collections.OrderedDict([
            (prefix + 'conv1.weight', self.conv1_w), (prefix + 'conv1.bias', self.conv1_b),
            (prefix + 'conv2.weight', self.conv2_w), (prefix + 'conv2.bias', self.conv2_b),
        ])

    def output_length(self, T):
        for _ in range(2):
            T = conv1d_output_length(T, self.kernel, self.stride, self.padding)
        return T

    def __call__(self, x):
        h = silu(conv1d(x, self.conv1_w, self.conv1_b, self.stride, self.padding))
        return silu(conv1d(h, self.conv2_w, self.conv2_b, self.stride, self.padding))


@attr.s(frozen=True)
class StackFrontend:
    """Stack m frames centred on every rate-th frame, replicating the edges."""
    n_in = attr.ib()
    m = attr.ib(default=7)
    rate = attr.ib(default=6)

    @m.validator
    def _check(self, attribute, value):
        if value < 1 or value % 2 == 0:
            raise AssemblyError(f"frame stacking needs an odd window m >= 1, got {value}")

    @property
    def input_dim(self):
        return self.n_in

    @property
    def output_dim(self):
        return self.m * self.n_in

    def describe(self):
        return dict(kind='stack', m=self.m, rate=self.rate)

    def parameters(self, prefix='frontend.'):
        return collections.OrderedDict()

    def output_length(self, T):
        return -(-T // self.rate)

    def __call__(self, x):
        T = x.shape[0]
        centers = self.rate * np.arange(self.output_length(T))
        idx = np.clip(centers[:, None] + np.arange(self.m)[None, :] - self.m // 2, 0, T - 1)
        return x[idx].reshape(len(centers), self.output_dim)


def _make_frontend(desc, n_in, arrays=None, rng=None):
    if desc['kind'] == 'conv':
        if arrays is not None:
            return ConvFrontend.from_arrays(arrays)
        return ConvFrontend.init(n_in, rng, channels=desc.get('channels', 256))
    if desc['kind'] == 'stack':
        return StackFrontend(n_in=n_in, m=desc['m'], rate=desc['rate'])
    raise AssemblyError(f"unknown frontend kind {desc['kind']!r}")


@attr.s
class PretrainedAsrEncoder:
    """A trained stand-alone ASR encoder with its CTC head removed."""
    frontend = attr.ib()
    input = attr.ib()
    stack = attr.ib()
    fingerprint = attr.ib(default=None)

    @classmethod
    def from_checkpoint(cls, ckpt):
        meta = ckpt.metadata
        if meta.get('kind') != 'encoder' or meta.get('form') != 'asr_base':
            raise AssemblyError(
                f"a pretrained ASR encoder must come from an asr_base encoder checkpoint, "
                f"got kind={meta.get('kind')!r} form={meta.get('form')!r}")
        config = BlockConfig.from_dict(meta['stack_config'])
        ckpt.require(['adapter.weight', 'adapter.bias'])
        ckpt.require(parameter_shapes(config), prefix='stack.')
        frontend = _make_frontend(meta['frontend'], meta['n_mels'], ckpt.subset('frontend.') or None)
        return cls(frontend=frontend,
                   input=Linear.from_arrays(ckpt.subset('adapter.'), 'asr_encoder.input'),
                   stack=TransformerStack.from_arrays(config, ckpt.subset('stack.')),
                   fingerprint=meta.get('corpus_fingerprint'))

    @classmethod
    def from_arrays(cls, meta, arrays):
        config = BlockConfig.from_dict(meta['config'])
        return cls(frontend=_make_frontend(meta['frontend'], meta['n_mels'], arrays_under(arrays, 'frontend.') or None),
                   input=Linear.from_arrays(arrays_under(arrays, 'input.'), 'asr_encoder.input'),
                   stack=TransformerStack.from_arrays(config, arrays_under(arrays, 'stack.')),
                   fingerprint=meta.get('fingerprint'))

    def describe(self):
        return dict(config=self.stack.config.to_dict(), frontend=self.frontend.describe(),
                    n_mels=self.frontend.input_dim, fingerprint=self.fingerprint)

    @property
    def output_dim(self):
        return self.stack.config.d_model

    def output_length(self, T):
        return self.frontend.output_length(T)

    def parameters(self, prefix='asr_encoder.'):
        params = self.frontend.parameters(prefix + 'frontend.')
        params.update(self.input.parameters(prefix + 'input.'))
        params.update(self.stack.parameters(prefix + 'stack.'))
        return params

    def __call__(self, x, train_flag=False, rng=None):
        h = self.input(self.frontend(x))
        return stack_forward(h, self.stack, 'full', train_flag, rng)


def arrays_under(arrays, prefix):
    return collections.OrderedDict((k[len(prefix):], v) for k, v in arrays.items() if k.startswith(prefix))


@attr.s
class AssembledEncoder:
    form = attr.ib()
    vocab_size = attr.ib()
    frontend = attr.ib()
    asr_encoder = attr.ib()
    adapter = attr.ib()
    stack = attr.ib()
    head = attr.ib()
    freeze_policy = attr.ib(default='none')
    metadata = attr.ib(factory=dict)

    def __attrs_post_init__(self):
        if self.stack is not None and self.stack.mask_mode != 'full':
            self.stack = self.stack.with_mask_mode('full')

    @property
    def n_mels(self):
        if self.asr_encoder is not None:
            return self.asr_encoder.frontend.input_dim
        return self.frontend.input_dim

    def parameters(self):
        params = collections.OrderedDict()
        if self.frontend is not None:
            params.update(self.frontend.parameters('frontend.'))
        if self.asr_encoder is not None:
            params.update(self.asr_encoder.parameters('asr_encoder.'))
        params.update(self.adapter.parameters('adapter.'))
        if self.stack is not None:
            params.update(self.stack.parameters('stack.'))
        params.update(self.head.parameters('head.'))
        return params

    def output_length(self, T):
        if self.asr_encoder is not None:
            return self.asr_encoder.output_length(T)
        return self.frontend.output_length(T)

    def state_dict(self):
        return collections.OrderedDict((name, p.data.copy()) for name, p in self.parameters().items())

    def load_state(self, arrays):
        for name, p in self.parameters().items():
            if name not in arrays:
                raise CheckpointError(f"state is missing {name}")
            if arrays[name].shape != p.shape:
                raise CheckpointError(f"{name}: expected shape {p.shape}, got {arrays[name].shape}")
            p.data[...] = arrays[name]

    def to_checkpoint(self, **metadata):
        meta = dict(
            kind='encoder', form=self.form, vocab_size=self.vocab_size, n_mels=self.n_mels,
            frontend=None if self.frontend is None else self.frontend.describe(),
            asr_encoder=None if self.asr_encoder is None else self.asr_encoder.describe(),
            stack_config=None if self.stack is None else self.stack.config.to_dict(),
            freeze_policy=self.freeze_policy)
        meta.update(self.metadata)
        meta.update(metadata)
        return Checkpoint.from_params(self.parameters(), metadata=meta)

    @classmethod
    def from_checkpoint(cls, ckpt):
        meta = ckpt.metadata
        if meta.get('kind') != 'encoder':
            raise CheckpointError(f"expected an encoder checkpoint, got kind={meta.get('kind')!r}")
        arrays = ckpt.tensors
        frontend = asr_encoder = stack = None
        if meta.get('frontend'):
            frontend = _make_frontend(meta['frontend'], meta['n_mels'], arrays_under(arrays, 'frontend.') or None)
        if meta.get('asr_encoder'):
            asr_encoder = PretrainedAsrEncoder.from_arrays(meta['asr_encoder'], arrays_under(arrays, 'asr_encoder.'))
        if meta.get('stack_config'):
            config = BlockConfig.from_dict(meta['stack_config'])
            ckpt.require(parameter_shapes(config), prefix='stack.')
            stack = TransformerStack.from_arrays(config, arrays_under(arrays, 'stack.'))
        ckpt.require(['adapter.weight', 'adapter.bias', 'head.weight', 'head.bias'])
        extra = {k: v for k, v in meta.items() if k in ('corpus_fingerprint', 'lm_source', 'asr_source')}
        enc = cls(form=meta['form'], vocab_size=int(meta['vocab_size']), frontend=frontend,
                  asr_encoder=asr_encoder, adapter=Linear.from_arrays(arrays_under(arrays, 'adapter.'), 'adapter'),
                  stack=stack, head=Linear.from_arrays(arrays_under(arrays, 'head.'), 'head'), metadata=extra)
        apply_freeze(enc, meta.get('freeze_policy', 'none'))
        return enc

    def __call__(self, X, train_flag=False, rng=None):
        return encoder_forward(self, X, train_flag, rng)


def transplant(lm_ckpt):
    """The LM's transformer layers as a full-attention stack; embedding and output are ignored."""
    meta = lm_ckpt.metadata
    if 'block_config' not in meta:
        raise CheckpointError("checkpoint metadata declares no block_config")
    config = BlockConfig.from_dict(meta['block_config'])
    lm_ckpt.require(parameter_shapes(config), prefix='stack.')
    return TransformerStack.from_arrays(config.evolve(mask_mode='full'), lm_ckpt.subset('stack.'))


def _lm_for(config, lm_ckpt, lm_ckpts):
    if lm_ckpt is None and lm_ckpts:
        lm_ckpt = lm_ckpts.get(config.stack_init)
    if lm_ckpt is None:
        raise AssemblyError(f"experiment {config.id!r} wants a {config.stack_init} stack but no LM checkpoint was given")
    return lm_ckpt


def build_encoder(config, lm_ckpt=None, asr_ckpt=None, seed=0, vocab_size=DEFAULT_VOCAB_SIZE,
                  n_mels=DEFAULT_N_MELS, lm_ckpts=None, corpus_fingerprint=None):
    """Assemble the encoder an ExperimentConfig describes, initialized from `seed`."""
    if config.form not in FORMS:
        raise AssemblyError(f"unknown encoder form {config.form!r}; expected one of {FORMS}")
    rng = make_rng(seed, INIT_KEY)
    metadata = {}
    frontend = asr_encoder = None

    if config.form in ('conv_only', 'eq2'):
        frontend = ConvFrontend.init(n_mels, rng, channels=config.conv_channels)
        feature_dim = frontend.output_dim
    elif config.form == 'asr_base':
        frontend = StackFrontend(n_in=n_mels, m=config.stack_m, rate=config.stack_rate)
        feature_dim = frontend.output_dim
    else:
        if asr_ckpt is None:
            raise AssemblyError(f"experiment {config.id!r} needs a pretrained ASR encoder checkpoint")
        asr_encoder = PretrainedAsrEncoder.from_checkpoint(asr_ckpt)
        if asr_encoder.frontend.input_dim != n_mels:
            raise AssemblyError(f"ASR encoder expects {asr_encoder.frontend.input_dim} mel bins, corpus has {n_mels}")
        if asr_ckpt.metadata.get('vocab_size') != vocab_size:
            raise AssemblyError(f"ASR encoder was trained on vocab {asr_ckpt.metadata.get('vocab_size')}, not {vocab_size}")
        if corpus_fingerprint and asr_encoder.fingerprint and asr_encoder.fingerprint != corpus_fingerprint:
            raise AssemblyError(
                f"ASR encoder was trained on corpus {asr_encoder.fingerprint}, not {corpus_fingerprint}")
        metadata['asr_source'] = asr_encoder.fingerprint
        feature_dim = asr_encoder.output_dim

    stack = None
    if config.form != 'conv_only':
        if config.stack_init == 'random':
            stack = TransformerStack.init(config.block_config, rng)
        else:
            lm_ckpt = _lm_for(config, lm_ckpt, lm_ckpts)
            if lm_ckpt.metadata.get('kind') != 'lm':
                raise AssemblyError(f"stack_init={config.stack_init} needs an LM checkpoint")
            text_vocab = lm_ckpt.metadata.get('vocab_size')
            if text_vocab is not None and text_vocab != vocab_size - 1:
                raise AssemblyError(f"LM text vocabulary {text_vocab} does not match ASR vocabulary {vocab_size}")
            stack = transplant(lm_ckpt)
            stack = TransformerStack(config=stack.config.evolve(dropout=config.dropout), params=stack.params)
            metadata['lm_source'] = config.stack_init
        d_model = stack.config.d_model
    else:
        d_model = config.block_config.d_model

    enc = AssembledEncoder(
        form=config.form, vocab_size=vocab_size, frontend=frontend, asr_encoder=asr_encoder,
        adapter=Linear.init(feature_dim, d_model, rng, 'adapter'), stack=stack,
        head=Linear.init(d_model, vocab_size, rng, 'head'), metadata=metadata)
    apply_freeze(enc, freeze_policy_for(config, enc))
    logger.debug("Built %s encoder for %s: %d/%d trainable", config.form, config.id, *count_parameters(enc))
    return enc


def freeze_policy_for(config, enc):
    policy = config.freeze if isinstance(config.freeze, (list, tuple)) else [config.freeze]
    policy = [p for p in policy if p != 'none']
    if enc.asr_encoder is not None and config.freeze_asr_encoder:
        policy.append('freeze_asr_encoder')
    return policy or 'none'


def frozen_names(enc, policy):
    params = enc.parameters()
    if policy == 'none' or policy is None:
        return set()
    entries = [policy] if isinstance(policy, str) else list(policy)
    frozen = set()
    for entry in entries:
        if entry == 'none':
            continue
        prefix = {'freeze_stack': 'stack.', 'freeze_asr_encoder': 'asr_encoder.'}.get(entry)
        if prefix is None and entry in params:
            frozen.add(entry)
            continue
        if prefix is None:
            prefix = entry if entry.endswith('.') else entry + '.'
        matched = {name for name in params if name.startswith(prefix)}
        if not matched:
            raise PolicyError(f"freeze entry {entry!r} matches no parameter of this {enc.form} encoder")
        frozen |= matched
    return frozen


def apply_freeze(enc, policy):
    frozen = frozen_names(enc, policy)
    for name, p in enc.parameters().items():
        p.requires_grad = name not in frozen
    enc.freeze_policy = policy if isinstance(policy, str) else list(policy)


def count_parameters(enc):
    """(trainable, total) scalar counts."""
    params = enc.parameters().values()
    return (sum(p.size for p in params if p.requires_grad), sum(p.size for p in params))


def encoder_forward(enc, X, train_flag=False, rng=None):
    """FeatureSequence (or T x D frames) -> log_probs[T', V]."""
    if isinstance(X, FeatureSequence):
        x = Tensor(X.frames)
    elif isinstance(X, Tensor):
        x = X
    else:
        x = Tensor(np.asarray(X))
    if x.ndim != 2 or x.shape[0] < 1:
        raise InputTooShortError(f"encoder input must be T x D with T >= 1, got {x.shape}")
    if x.shape[1] != enc.n_mels:
        raise InputError(f"encoder expects {enc.n_mels}-dim features, got {x.shape[1]}")

    if enc.asr_encoder is not None:
        asr_trains = train_flag and any(p.requires_grad for p in enc.asr_encoder.parameters().values())
        h = enc.asr_encoder(x, asr_trains, rng)
    else:
        h = enc.frontend(x)
    if h.shape[0] < 1:
        raise InputTooShortError(f"{x.shape[0]} frames leave no encoder positions")
    h = enc.adapter(h)
    if enc.stack is not None:
        h = stack_forward(h, enc.stack, 'full', train_flag, rng)
    return log_softmax(enc.head(h), axis=-1)
