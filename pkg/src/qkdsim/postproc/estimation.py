"""Test-bit sampling and QBER estimation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import beta

from ..protocols import SiftedKey

DEFAULT_ABORT_QBER = 0.11


@dataclass(frozen=True)
class SecurityParams:
    """``s``: failure probability O(2^-s); ``l``: leakage O(2^-l)."""

    s: int = 10
    l: int = 10

    def __post_init__(self):
        if int(self.s) < 1 or int(self.l) < 1:
            raise ValueError("security parameters s and l must be >= 1")


@dataclass(frozen=True)
class QberEstimate:
    point: float
    ci_upper: float
    n_test: int
    errors: int
    abort: bool = False


def split_test_bits(pair: tuple[SiftedKey, SiftedKey], fraction: float,
                    rng: np.random.Generator) -> tuple[tuple[SiftedKey, SiftedKey], tuple[SiftedKey, SiftedKey]]:
    """Disclose a uniform random sample (without replacement) of the sifted key.

    Returns ``((test_a, test_b), (code_a, code_b))``; test and code bits are a
    disjoint cover of the input.
    """
    ka, kb = pair
    n = len(ka)
    if n == 0:
        raise ValueError("sifted key is empty")
    if not 0.0 < fraction < 1.0:
        raise ValueError("test fraction must lie in (0, 1)")
    n_test = min(n, max(1, int(round(fraction * n))))
    pick = np.zeros(n, dtype=bool)
    pick[rng.choice(n, size=n_test, replace=False)] = True
    return (ka.subset(pick), kb.subset(pick)), (ka.subset(~pick), kb.subset(~pick))


def clopper_pearson_upper(errors: int, n: int, confidence: float) -> float:
    """One-sided exact binomial upper bound."""
    if n <= 0:
        return 1.0
    if errors >= n:
        return 1.0
    return float(beta.ppf(confidence, errors + 1, n - errors))


def estimate_qber(test_pair: tuple[SiftedKey, SiftedKey], params: SecurityParams,
                  abort_threshold: float = DEFAULT_ABORT_QBER) -> QberEstimate:
    ta, tb = test_pair
    n = len(ta)
    if n < 1:
        raise ValueError("need at least one test bit")
    k = int(np.count_nonzero(ta.bits != tb.bits))
    upper = clopper_pearson_upper(k, n, 1.0 - 2.0 ** (-params.s))
    return QberEstimate(k / n, upper, n, k, abort=upper >= abort_threshold)
