import logging

import numba
import numpy as np

from .features import LabelSequence
from .util import ContractError

logger = logging.getLogger(__name__)


@numba.jit(nopython=True, cache=True)
def _levenshtein(a, b):
    n, m = a.shape[0], b.shape[0]
    current = np.arange(m + 1)
    for i in range(1, n + 1):
        previous = current.copy()
        current[0] = i
        for j in range(1, m + 1):
            change = previous[j - 1] + (0 if a[i - 1] == b[j - 1] else 1)
            current[j] = min(previous[j] + 1, current[j - 1] + 1, change)
    return current[m]


def _as_codes(a, b):
    if isinstance(a, LabelSequence):
        a = a.tokens
    if isinstance(b, LabelSequence):
        b = b.tokens
    a, b = list(a), list(b)
    if all(isinstance(s, (int, np.integer)) for s in a + b):
        return np.array(a, dtype=np.int64), np.array(b, dtype=np.int64)
    # Arbitrary hashable symbols, e.g. the characters of a string.
    codes = {}
    encode = lambda seq: np.array([codes.setdefault(s, len(codes)) for s in seq], dtype=np.int64)
    return encode(a), encode(b)


def edit_distance(a, b):
    """Levenshtein distance with unit insert, delete and substitute costs."""
    a, b = _as_codes(a, b)
    return int(_levenshtein(a, b))


def cer(refs, hyps):
    """Percent token error rate summed over the batch."""
    if len(refs) != len(hyps):
        raise ContractError(f"cer got {len(refs)} references but {len(hyps)} hypotheses")
    errors = sum(edit_distance(r, h) for r, h in zip(refs, hyps))
    length = sum(len(r) for r in refs)
    if length == 0:
        return 0. if errors == 0 else float('inf')
    return 100. * errors / length
