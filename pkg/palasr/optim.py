import logging

import attr
import numpy as np

from .util import ContractError

logger = logging.getLogger(__name__)


@attr.s
class AdamState:
    lr = attr.ib(default=1e-3)
    beta1 = attr.ib(default=0.9)
    beta2 = attr.ib(default=0.999)
    epsilon = attr.ib(default=1e-8)
    step = attr.ib(default=0)
    m = attr.ib(factory=dict)
    v = attr.ib(factory=dict)

    @classmethod
    def for_params(cls, params, **kw):
        state = cls(**kw)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def collect_grads(params):
    return {name: p.grad for name, p in params.items()}


def adam_step(params, grads, state):
    """One bias-corrected Adam update; frozen parameters are skipped."""
    state.step += 1
    t = state.step
    bias1 = 1 - state.beta1 ** t
    bias2 = 1 - state.beta2 ** t
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = grads.get(name)
        if g is None:
            continue
        m, v = state.m.get(name), state.v.get(name)
        if m is None or m.shape != p.shape or g.shape != p.shape:
            raise ContractError(f"Adam state for {name} does not match parameter shape {p.shape}")
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        update = state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.epsilon)
        p.data -= update.astype(p.data.dtype)


def warmup_lr(base_lr, step, warmup_steps):
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, (step + 1) / warmup_steps)


def clip_grad_norm(params, max_norm):
    grads = [p.grad for p in params.values() if p.requires_grad and p.grad is not None]
    if not grads:
        return 0.
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads:
            g *= scale
    return total
