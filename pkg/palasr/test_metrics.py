import itertools

import pytest

from palasr.features import LabelSequence
from palasr.metrics import cer, edit_distance
from palasr.util import ContractError, make_rng


def slow_edit_distance(a, b):
    # Plain recursion over prefixes.
    if not a:
        return len(b)
    if not b:
        return len(a)
    return min(slow_edit_distance(a[1:], b) + 1,
               slow_edit_distance(a, b[1:]) + 1,
               slow_edit_distance(a[1:], b[1:]) + (a[0] != b[0]))


def test_edit_distance_examples():
    assert edit_distance('kitten', 'sitting') == 3
    assert edit_distance([1, 2, 3], [1, 2, 3]) == 0
    assert edit_distance([], [4, 5]) == 2
    assert edit_distance([4, 5], []) == 2
    assert edit_distance(LabelSequence([1, 2]), LabelSequence([2])) == 1


def test_edit_distance_matches_recursion():
    rng = make_rng(0)
    for _ in range(300):
        a = rng.integers(1, 4, size=int(rng.integers(0, 7))).tolist()
        b = rng.integers(1, 4, size=int(rng.integers(0, 7))).tolist()
        assert edit_distance(a, b) == slow_edit_distance(a, b)


def test_edit_distance_is_a_metric():
    words = ['', 'a', 'ab', 'ba', 'abc', 'cab', 'bbb']
    for a, b, c in itertools.product(words, repeat=3):
        assert edit_distance(a, b) == edit_distance(b, a)
        assert edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)


def test_cer():
    assert cer([[1, 2, 3, 4]], [[1, 2, 4]]) == pytest.approx(25.)
    assert cer([[1, 2], [3, 4]], [[1, 2], [3, 4]]) == 0.
    # Errors and lengths are summed before dividing.
    assert cer([[1], [2, 3, 4]], [[2], [2, 3, 4]]) == pytest.approx(25.)
    assert cer([[1, 2]], [[1, 2, 3, 3, 3]]) == pytest.approx(150.)
    assert cer([[]], [[]]) == 0.
    assert cer([[]], [[1]]) == float('inf')
    with pytest.raises(ContractError):
        cer([[1]], [])
