"""Qwen-style transformer stack: pre-RMSNorm blocks with rotary positions and a SiLU-gated FFN.

The same stack runs causally for LM pretraining and with full attention as an
ASR encoder. It holds no embedding table and no vocabulary projection; those
belong to the language model, so transplanting a stack is a plain weight copy.
"""
import collections
import logging

import attr
import numpy as np

from .tensor import Tensor, dropout, init_normal, parameter, rmsnorm, silu, softmax
from .util import ConfigError

logger = logging.getLogger(__name__)

MASK_MODES = ('causal', 'full')


@attr.s(frozen=True)
class BlockConfig:
    d_model = attr.ib()
    n_head = attr.ib()
    d_ff = attr.ib()
    n_layer = attr.ib()
    dropout = attr.ib(default=0.0)
    rope_base = attr.ib(default=10000.)
    mask_mode = attr.ib(default='causal')
    norm_eps = attr.ib(default=1e-6)

    def __attrs_post_init__(self):
        if self.n_layer < 1:
            raise ConfigError(f"a stack needs at least one layer, got n_layer={self.n_layer}")
        if self.n_head < 1 or self.d_model % self.n_head:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_head={self.n_head}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.mask_mode not in MASK_MODES:
            raise ConfigError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")

    @property
    def d_head(self):
        return self.d_model // self.n_head

    def evolve(self, **changes):
        return attr.evolve(self, **changes)

    def to_dict(self):
        return attr.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


PRESETS = dict(
    small=BlockConfig(d_model=128, n_head=4, d_ff=352, n_layer=4),
    large=BlockConfig(d_model=192, n_head=6, d_ff=512, n_layer=8),
    asr=BlockConfig(d_model=128, n_head=4, d_ff=352, n_layer=3, mask_mode='full'),
)


def layer_shapes(config):
    d, f = config.d_model, config.d_ff
    return collections.OrderedDict([
        ('attn_norm', (d,)),
        ('attn.q', (d, d)), ('attn.q_bias', (d,)),
        ('attn.k', (d, d)), ('attn.k_bias', (d,)),
        ('attn.v', (d, d)), ('attn.v_bias', (d,)),
        ('attn.o', (d, d)),
        ('ffn_norm', (d,)),
        ('ffn.gate', (d, f)), ('ffn.up', (d, f)), ('ffn.down', (f, d)),
    ])


def parameter_shapes(config):
    shapes = collections.OrderedDict()
    for i in range(config.n_layer):
        for name, shape in layer_shapes(config).items():
            shapes[f'layer{i}.{name}'] = shape
    shapes['final_norm'] = (config.d_model,)
    return shapes


def _init_value(name, shape, rng):
    if name.endswith('norm'):
        return np.ones(shape)
    if name.endswith('_bias'):
        return np.zeros(shape)
    return init_normal(shape, rng)


@attr.s
class TransformerStack:
    config = attr.ib()
    params = attr.ib()

    @classmethod
    def init(cls, config, rng):
        params = collections.OrderedDict(
            (name, parameter(_init_value(name, shape, rng), name=name))
            for name, shape in parameter_shapes(config).items())
        return cls(config=config, params=params)

    @classmethod
    def from_arrays(cls, config, arrays):
        return cls(config=config, params=collections.OrderedDict(
            (name, parameter(arrays[name], name=name)) for name in parameter_shapes(config)))

    @property
    def mask_mode(self):
        return self.config.mask_mode

    def with_mask_mode(self, mask_mode):
        """A view over the same parameter tensors with a different mask."""
        return TransformerStack(config=self.config.evolve(mask_mode=mask_mode), params=self.params)

    def parameters(self, prefix=''):
        return collections.OrderedDict((prefix + name, p) for name, p in self.params.items())

    def layer_params(self, i):
        head = f'layer{i}.'
        return {name[len(head):]: p for name, p in self.params.items() if name.startswith(head)}

    def __call__(self, x, train_flag=False, rng=None, positions=None):
        return stack_forward(x, self, self.mask_mode, train_flag, rng, positions=positions)


def _rotate(data, cos, sin):
    even, odd = data[..., 0::2], data[..., 1::2]
    out = np.empty_like(data)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rope_apply(x, positions, base=10000.):
    """Rotate consecutive feature pairs of x[..., T, n_head, d_head] by pos * base^(-2i/d_head)."""
    d_head = x.shape[-1]
    if d_head % 2:
        raise ConfigError(f"rotary positions need an even head dimension, got {d_head}")
    inv_freq = base ** (-np.arange(0, d_head, 2) / d_head)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    dtype = x.data.dtype
    cos = np.cos(angles)[:, None, :].astype(dtype)
    sin = np.sin(angles)[:, None, :].astype(dtype)
    return Tensor.from_op(_rotate(x.data, cos, sin), (x,), lambda g: (_rotate(g, cos, -sin),))


def causal_mask(T, dtype):
    return np.triu(np.full((T, T), -np.inf, dtype=dtype), k=1)


def attention(x, params, config, mask_mode, train_flag=False, positions=None):
    lead = x.shape[:-2]
    T = x.shape[-2]
    H, d_head = config.n_head, config.d_head
    nl = len(lead)
    if positions is None:
        positions = np.arange(T)

    def heads(name):
        t = (x @ params[f'attn.{name}'] + params[f'attn.{name}_bias']).reshape(*lead, T, H, d_head)
        if name != 'v':
            t = rope_apply(t, positions, config.rope_base)
        # [..., T, H, dh] -> [..., H, T, dh]
        return t.transpose(*range(nl), nl + 1, nl, nl + 2)

    q, k, v = heads('q'), heads('k'), heads('v')
    scores = (q @ k.transpose(*range(nl + 1), nl + 2, nl + 1)) * (1. / np.sqrt(d_head))
    if mask_mode == 'causal':
        scores = scores + Tensor(causal_mask(T, scores.data.dtype))
    elif mask_mode != 'full':
        raise ConfigError(f"unknown mask_mode {mask_mode!r}")
    context = softmax(scores, axis=-1) @ v
    context = context.transpose(*range(nl), nl + 1, nl, nl + 2).reshape(*lead, T, config.d_model)
    return context @ params['attn.o']


def block_forward(x, block_params, config, mask_mode, train_flag=False, rng=None, positions=None):
    p = block_params
    h = rmsnorm(x, p['attn_norm'], config.norm_eps)
    x = x + dropout(attention(h, p, config, mask_mode, train_flag, positions), config.dropout, train_flag, rng)
    h = rmsnorm(x, p['ffn_norm'], config.norm_eps)
    ffn = (silu(h @ p['ffn.gate']) * (h @ p['ffn.up'])) @ p['ffn.down']
    return x + dropout(ffn, config.dropout, train_flag, rng)


def stack_forward(x, stack, mask_mode=None, train_flag=False, rng=None, positions=None):
    mask_mode = mask_mode or stack.mask_mode
    for i in range(stack.config.n_layer):
        x = block_forward(x, stack.layer_params(i), stack.config, mask_mode, train_flag, rng, positions)
    return rmsnorm(x, stack.params['final_norm'], stack.config.norm_eps)
