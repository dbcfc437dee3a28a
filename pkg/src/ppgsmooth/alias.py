"""Walker/Vose alias tables for O(1) categorical draws.

The table is built in vectorised rounds: every "small" column (scaled mass
below one) is paired with the "large" column whose cumulative excess covers
the start of its deficit.  A large column may absorb several smalls in one
round; if its residual drops below one it re-enters as a small in the next
round.  Each round finalises at least one column, so construction is O(N)
work per round and terminates after at most N rounds (in practice a handful).
Small tables use the classic sequential pairing, which has less overhead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AllWeightsZeroError, NegativeWeightError


@dataclass(frozen=True)
class AliasTable:
    prob: np.ndarray
    alias: np.ndarray

    @property
    def size(self) -> int:
        return self.prob.shape[0]

    def sample(self, rng, size=None):
        """Draw ``size`` indices (a scalar int when ``size`` is None)."""
        gen = rng.generator
        col = gen.integers(0, self.size, size=size)
        u = gen.random(size)
        return np.where(u < self.prob[col], col, self.alias[col])

    def probabilities(self) -> np.ndarray:
        """The exact categorical law encoded by the table."""
        n = self.size
        p = self.prob.copy()
        np.add.at(p, self.alias, 1.0 - self.prob)
        return p / n


_SEQUENTIAL_MAX = 32  # below this size the sequential build is faster


def _sequential_alias(q):
    n = len(q)
    q = q.tolist()
    prob = [1.0] * n
    alias = list(range(n))
    small = [i for i in range(n) if q[i] < 1.0]
    large = [i for i in range(n) if q[i] >= 1.0]
    while small and large:
        s, g = small.pop(), large[-1]
        prob[s], alias[s] = q[s], g
        q[g] -= 1.0 - q[s]
        if q[g] < 1.0:
            small.append(large.pop())
    return AliasTable(prob=np.array(prob), alias=np.array(alias))


def build_alias(weights) -> AliasTable:
    w = np.asarray(weights, dtype=float).ravel()
    if w.size == 0:
        raise AllWeightsZeroError("empty weight vector")
    total = w.sum()
    # a NaN or infinite entry makes the total non-finite
    if not np.isfinite(total) or w.min() < 0:
        raise NegativeWeightError("weights must be finite and non-negative")
    if not total > 0:
        raise AllWeightsZeroError("all weights are zero")

    n = w.size
    q = w * (n / total)
    if n <= _SEQUENTIAL_MAX:
        return _sequential_alias(q)
    prob = np.ones(n)
    alias = np.arange(n)
    small = np.flatnonzero(q < 1.0)
    large = np.flatnonzero(q >= 1.0)
    while small.size and large.size:
        deficit = 1.0 - q[small]
        start = np.cumsum(deficit) - deficit
        owner = np.searchsorted(np.cumsum(q[large] - 1.0), start, side="right")
        ok = owner < large.size
        if not ok.any():
            break  # leftover deficit is floating-point dust
        prob[small[ok]] = q[small[ok]]
        alias[small[ok]] = large[owner[ok]]
        q[large] -= np.bincount(owner[ok], weights=deficit[ok], minlength=large.size)
        spent = q[large] < 1.0
        small = np.concatenate([small[~ok], large[spent]])
        large = large[~spent]
    # unpaired columns keep prob 1 / alias to self
    prob[small] = 1.0
    prob[large] = 1.0
    return AliasTable(prob=prob, alias=alias)


def alias_draw(table: AliasTable, rng) -> int:
    return int(table.sample(rng))
