"""Opt-in runtime assertions for normalisation invariants.

Inside ``watch()`` every softmax output and every normalised fusion
weight vector is checked to be nonnegative and to sum to 1; failures
raise ``AssertionError`` immediately.
"""
import contextlib
from collections import Counter

import numpy as np

_ACTIVE: list = []


class NormalizationWatch:
    def __init__(self, atol: float):
        self.atol = atol
        self.checks = Counter()
        self.max_deviation = 0.0

    def check(self, kind: str, arr: np.ndarray, axis: int = -1, slack: float = 0.0) -> None:
        sums = arr.sum(axis=axis)
        dev = float(np.max(np.abs(sums - 1.0))) if sums.size else 0.0
        dev = max(0.0, dev - slack)
        self.max_deviation = max(self.max_deviation, dev)
        assert np.all(arr >= 0.0), f"{kind}: negative normalised weight"
        assert dev <= self.atol, f"{kind}: slices sum to 1 +- {dev:.3e} (tol {self.atol:g})"
        self.checks[kind] += 1


@contextlib.contextmanager
def watch(atol: float = 1e-6):
    w = NormalizationWatch(atol)
    _ACTIVE.append(w)
    try:
        yield w
    finally:
        _ACTIVE.remove(w)


def report(kind: str, arr: np.ndarray, axis: int = -1, slack: float = 0.0) -> None:
    for w in _ACTIVE:
        w.check(kind, arr, axis, slack)


def active() -> bool:
    return bool(_ACTIVE)
