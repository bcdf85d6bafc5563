"""Dense tensors with reverse-mode automatic differentiation.

Every node keeps its numpy data, the parents it was computed from and a closure
mapping the upstream gradient to one gradient per parent. `Tensor.backward`
walks the graph once in reverse topological order; only leaves store `.grad`,
and they accumulate until `zero_grads` is called.
"""
import contextlib
import logging

import numpy as np
from scipy.special import expit
from scipy.stats import truncnorm

from .util import PalError, ConfigError, ContractError, InputTooShortError

logger = logging.getLogger(__name__)


class DimensionError(PalError):
    pass


class NumericError(PalError):
    pass


PRECISIONS = {'f32': np.float32, 'f64': np.float64}
_dtype = np.float32


def set_precision(name):
    global _dtype
    try:
        _dtype = PRECISIONS[name]
    except KeyError:
        raise ConfigError(f"unknown precision {name!r}; expected one of {sorted(PRECISIONS)}")


@contextlib.contextmanager
def precision(name):
    old = _dtype
    set_precision(name)
    try:
        yield
    finally:
        set_precision('f64' if old is np.float64 else 'f32')


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block; evaluation passes use it."""
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=_dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None

    @classmethod
    def from_op(cls, data, parents, backward_fn):
        """Node computed from `parents`; `backward_fn(g)` returns one gradient per parent."""
        out = cls.__new__(cls)
        out.data = np.asarray(data)
        out.grad = None
        out.name = None
        out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        grad = ', requires_grad=True' if self.requires_grad else ''
        return f'Tensor(shape={self.shape}, dtype={self.data.dtype}{grad})'

    def backward(self):
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        graph = GradGraph.build(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in graph.reversed():
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                g = np.array(g, dtype=node.data.dtype).reshape(node.shape)
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # Elementwise algebra.

    def __add__(self, other):
        other = _ensure(other)
        a, b = self, other
        return Tensor.from_op(a.data + b.data, (a, b),
                              lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    __radd__ = __add__

    def __sub__(self, other):
        other = _ensure(other)
        a, b = self, other
        return Tensor.from_op(a.data - b.data, (a, b),
                              lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))

    def __rsub__(self, other):
        return _ensure(other) - self

    def __mul__(self, other):
        other = _ensure(other)
        a, b = self, other
        return Tensor.from_op(a.data * b.data, (a, b),
                              lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _ensure(other)
        a, b = self, other
        return Tensor.from_op(
            a.data / b.data, (a, b),
            lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))

    def __rtruediv__(self, other):
        return _ensure(other) / self

    def __neg__(self):
        return Tensor.from_op(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p):
        a = self
        return Tensor.from_op(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        a = self

        def backward(g):
            z = np.zeros_like(a.data)
            np.add.at(z, key, g)
            return (z,)
        return Tensor.from_op(a.data[key], (a,), backward)

    # Reductions and shape.

    def sum(self, axis=None, keepdims=False):
        a = self

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape),)
        return Tensor.from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[ax] for ax in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        a = self
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))

    def transpose(self, *axes):
        a = self
        if not axes:
            axes = tuple(reversed(range(a.ndim)))
        inverse = np.argsort(axes)
        return Tensor.from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))

    @property
    def T(self):
        return self.transpose()

    def exp(self):
        a = self
        out = np.exp(a.data)
        return Tensor.from_op(out, (a,), lambda g: (g * out,))

    def log(self):
        a = self
        return Tensor.from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def _ensure(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class GradGraph:
    """Topologically ordered record of the nodes that need a gradient."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def build(cls, root):
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def reversed(self):
        return reversed(self.nodes)

    def __len__(self):
        return len(self.nodes)


def matmul(a, b):
    a, b = _ensure(a), _ensure(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return Tensor.from_op(a.data @ b.data, (a, b), backward)


def concat(tensors, axis=0):
    tensors = [_ensure(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                          lambda g: tuple(np.split(g, sizes, axis=axis)))


def silu(x):
    s = expit(x.data)
    out = x.data * s
    return Tensor.from_op(out, (x,), lambda g: (g * s * (1 + x.data * (1 - s)),))


def _check_finite(x, op):
    if np.isnan(x.data).any():
        raise NumericError(f"{op} received NaN input of shape {x.shape}")


def softmax(x, axis=-1):
    _check_finite(x, 'softmax')
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    return Tensor.from_op(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis=-1):
    _check_finite(x, 'log_softmax')
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    return Tensor.from_op(y, (x,), lambda g: (g - np.exp(y) * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer `targets` under `logits[..., V]`."""
    targets = np.asarray(targets).reshape(-1)
    lp = log_softmax(logits, axis=-1).reshape(-1, logits.shape[-1])
    return -lp[np.arange(len(targets)), targets].mean()


def conv1d(x, w, bias=None, stride=1, padding=0):
    if w.ndim != 3 or x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv1d expects x[T, Din] and w[k, Din, Dout], got {x.shape} and {w.shape}")
    k, d_in, d_out = w.shape
    if k < 1 or stride < 1 or padding < 0:
        raise ConfigError(f"conv1d needs k >= 1, stride >= 1, padding >= 0 (k={k}, stride={stride}, padding={padding})")
    T = x.shape[0]
    t_out = (T + 2 * padding - k) // stride + 1
    if t_out <= 0:
        raise InputTooShortError(f"conv1d input of {T} frames is too short for k={k}, padding={padding}")
    xp = np.pad(x.data, ((padding, padding), (0, 0)))
    idx = stride * np.arange(t_out)[:, None] + np.arange(k)[None, :]
    cols = xp[idx].reshape(t_out, k * d_in)
    w2 = w.data.reshape(k * d_in, d_out)
    out = cols @ w2
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gw = (cols.T @ g).reshape(w.shape)
        gxp = np.zeros_like(xp)
        np.add.at(gxp, idx, (g @ w2.T).reshape(t_out, k, d_in))
        gx = gxp[padding:padding + T]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)
    parents = (x, w) if bias is None else (x, w, bias)
    return Tensor.from_op(out, parents, backward)


def conv1d_output_length(T, k, stride=1, padding=0):
    return (T + 2 * padding - k) // stride + 1


def rmsnorm(x, gain, eps=1e-6):
    if x.shape[-1] != gain.shape[-1]:
        raise DimensionError(f"rmsnorm gain {gain.shape} does not match features of {x.shape}")
    r = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    n = x.data * r

    def backward(g):
        dn = g * gain.data
        gx = r * (dn - n * (dn * n).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * n, gain.shape)
    return Tensor.from_op(n * gain.data, (x, gain), backward)


def dropout(x, rate, train_flag, rng):
    if not 0 <= rate < 1:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train_flag or rate == 0:
        return x
    if rng is None:
        raise ContractError("training-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= rate).astype(x.data.dtype) / x.data.dtype.type(1 - rate)
    return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,))


def zero_grads(params):
    if isinstance(params, dict):
        params = params.values()
    for p in params:
        p.grad = None


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def init_normal(shape, rng, std=0.02):
    """N(0, std^2) truncated at two standard deviations."""
    return truncnorm.rvs(-2, 2, loc=0, scale=std, size=shape, random_state=rng).astype(_dtype)


def grad_check(f, x, eps=1e-5):
    """Max relative error between backward and central differences of scalar `f` at `x`."""
    if x.data.dtype != np.float64:
        raise ContractError("grad_check must run in 64-bit mode")
    x.data = np.ascontiguousarray(x.data)
    x.requires_grad = True
    x.grad = None
    f(x).backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    numeric = np.empty_like(x.data)
    flat, num_flat = x.data.reshape(-1), numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(f(x).data)
        flat[i] = orig - eps
        f_minus = float(f(x).data)
        flat[i] = orig
        num_flat[i] = (f_plus - f_minus) / (2 * eps)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / scale))
