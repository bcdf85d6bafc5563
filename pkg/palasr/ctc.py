"""CTC loss, its lattice, greedy decoding and a brute-force oracle.

Blank is index 0. Everything runs in log space; beta[t, s] includes the
emission at t, so alpha[t, s] + beta[t, s] - log_probs[t, l'(s)] is the log
mass of all alignments passing through (t, s).
"""
import itertools
import logging

import attr
import numba
import numpy as np
from scipy.special import logsumexp

from .features import BLANK, LabelSequence
from .tensor import Tensor
from .util import PalError

logger = logging.getLogger(__name__)

BRUTE_FORCE_LIMIT = 10 ** 7


class InfeasibleTargetError(PalError):
    pass


class OracleScopeError(PalError):
    pass


def _tokens(y):
    if isinstance(y, LabelSequence):
        return y.tokens
    return np.asarray(y, dtype=np.int64).reshape(-1)


def _log_probs(log_probs):
    data = log_probs.data if isinstance(log_probs, Tensor) else log_probs
    return np.asarray(data, dtype=np.float64)


def required_min_length(y):
    y = _tokens(y)
    return int(len(y) + np.count_nonzero(y[1:] == y[:-1]))


def extend_labels(y):
    y = _tokens(y)
    ext = np.full(2 * len(y) + 1, BLANK, dtype=np.int64)
    ext[1::2] = y
    return ext


@numba.jit(nopython=True, cache=True)
def _lse(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + np.log1p(np.exp(b - a))
    return b + np.log1p(np.exp(a - b))


@numba.jit(nopython=True, cache=True)
def _alpha(lp, ext):
    T = lp.shape[0]
    S = ext.shape[0]
    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = lp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            a = alpha[t - 1, s]
            if s >= 1:
                a = _lse(a, alpha[t - 1, s - 1])
            if s >= 2 and ext[s] != 0 and ext[s] != ext[s - 2]:
                a = _lse(a, alpha[t - 1, s - 2])
            alpha[t, s] = a + lp[t, ext[s]]
    return alpha


@numba.jit(nopython=True, cache=True)
def _beta(lp, ext):
    T = lp.shape[0]
    S = ext.shape[0]
    beta = np.full((T, S), -np.inf)
    beta[T - 1, S - 1] = lp[T - 1, ext[S - 1]]
    if S > 1:
        beta[T - 1, S - 2] = lp[T - 1, ext[S - 2]]
    for t in range(T - 2, -1, -1):
        for s in range(S):
            b = beta[t + 1, s]
            if s + 1 < S:
                b = _lse(b, beta[t + 1, s + 1])
            if s + 2 < S and ext[s + 2] != 0 and ext[s + 2] != ext[s]:
                b = _lse(b, beta[t + 1, s + 2])
            beta[t, s] = b + lp[t, ext[s]]
    return beta


@attr.s
class CtcLattice:
    labels = attr.ib()
    alpha = attr.ib()
    beta = attr.ib()
    log_probs = attr.ib()

    @property
    def log_likelihood(self):
        last = self.alpha[-1]
        if len(last) == 1:
            return float(last[0])
        return float(np.logaddexp(last[-1], last[-2]))

    def path_posteriors(self):
        """log P(alignment passes through (t, s) | y), shape T x S."""
        both = np.isfinite(self.alpha) & np.isfinite(self.beta)
        emit = self.log_probs[:, self.labels]
        with np.errstate(invalid='ignore'):
            joint = np.where(both, self.alpha + self.beta - emit, -np.inf)
        return joint - self.log_likelihood

    def occupation(self):
        """Per-frame label posteriors gamma[t, v], shape T x V."""
        T, V = self.log_probs.shape
        gamma = np.zeros((T, V))
        np.add.at(gamma, (slice(None), self.labels), np.exp(self.path_posteriors()))
        return gamma


def forward_backward(log_probs, y):
    lp = _log_probs(log_probs)
    y = _tokens(y)
    T = lp.shape[0]
    need = required_min_length(y)
    if T < need:
        raise InfeasibleTargetError(f"{T} frames cannot align {len(y)} labels (need at least {need})")
    ext = extend_labels(y)
    return CtcLattice(labels=ext, alpha=_alpha(lp, ext), beta=_beta(lp, ext), log_probs=lp)


def ctc_loss(log_probs, y):
    """-log P_CTC(y | X) as a graph node over `log_probs`, plus its gradient.

    The gradient with respect to log_probs is minus the label occupation.
    """
    lattice = forward_backward(log_probs, y)
    loss = -lattice.log_likelihood
    if not np.isfinite(loss):
        grad = np.zeros_like(lattice.log_probs)
    else:
        grad = -lattice.occupation()
    if not isinstance(log_probs, Tensor):
        return Tensor(loss), grad
    dtype = log_probs.data.dtype
    grad = grad.astype(dtype)
    node = Tensor.from_op(np.array(loss, dtype=dtype), (log_probs,), lambda g: (g * grad,))
    return node, grad


def ctc_brute_force(log_probs, y):
    lp = _log_probs(log_probs)
    target = tuple(_tokens(y).tolist())
    T, V = lp.shape
    if V ** T > BRUTE_FORCE_LIMIT:
        raise OracleScopeError(f"brute force over {V}^{T} paths exceeds {BRUTE_FORCE_LIMIT}")
    paths = np.array(list(itertools.product(range(V), repeat=T)), dtype=np.int64).reshape(-1, T)
    scores = lp[np.arange(T)[None, :], paths].sum(axis=1)
    keep = np.array([tuple(collapse(path)) == target for path in paths])
    if not keep.any():
        return np.inf
    return float(-logsumexp(scores[keep]))


def collapse(frame_ids):
    """Merge adjacent repeats, then drop blanks."""
    ids = np.asarray(frame_ids)
    if len(ids) == 0:
        return ids
    keep = np.ones(len(ids), dtype=bool)
    keep[1:] = ids[1:] != ids[:-1]
    ids = ids[keep]
    return ids[ids != BLANK]


def greedy_decode(log_probs):
    """Per-frame argmax (ties to the lowest index), collapsed."""
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    return LabelSequence(collapse(np.argmax(lp, axis=-1)), vocab_size=lp.shape[-1])
