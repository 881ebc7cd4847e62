"""Reference replacement policies: LRU, FIFO, least-requested, random, threshold.

All of them speak the same indicator interface as the learned agents; the
classical ones admit every missed content and evict exactly as many cached
contents as needed, so the post-update cache never consults q values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cache_env import CacheEnv, SlotOutcome, SystemState, threshold_rule
from .workload import RequestBatch

__all__ = [
    "PolicyBookkeeping",
    "lru_decide",
    "fifo_decide",
    "least_requested_decide",
    "random_decide",
    "LruPolicy",
    "FifoPolicy",
    "LeastRequestedPolicy",
    "RandomPolicy",
    "ThresholdPolicy",
]


@dataclass
class PolicyBookkeeping:
    """Per-content stats the classical policies rank on."""

    last_used: dict[int, int] = field(default_factory=dict)
    inserted_at: dict[int, int] = field(default_factory=dict)
    request_tally: dict[int, int] = field(default_factory=dict)


def _evict_oldest(
    candidates: Sequence[int],
    cache: frozenset[int],
    misses: frozenset[int],
    rank: dict[int, int],
    capacity: int,
) -> list[int]:
    # Evict the |misses| cached contents with the smallest rank (ties toward the
    # lower content id); admit the misses. If more contents miss than fit,
    # admit the lowest-id ones so the cache still ends at exactly capacity.
    n_evict = min(len(misses), capacity)
    cached_order = sorted((o for o in candidates if o in cache), key=lambda o: (rank[o], o))
    evict = set(cached_order[:n_evict])
    admit = set(sorted(misses)[:capacity]) if len(misses) > capacity else misses
    indicators = []
    for o in candidates:
        if o in cache:
            indicators.append(0 if o in evict else 1)
        else:
            indicators.append(1 if o in admit else 0)
    return indicators


def lru_decide(
    book: PolicyBookkeeping,
    candidates: Sequence[int],
    cache: frozenset[int],
    misses: frozenset[int],
    capacity: int,
) -> list[int]:
    """Evict the least recently used cached contents to admit all misses."""
    return _evict_oldest(candidates, cache, misses, book.last_used, capacity)


def fifo_decide(
    book: PolicyBookkeeping,
    candidates: Sequence[int],
    cache: frozenset[int],
    misses: frozenset[int],
    capacity: int,
) -> list[int]:
    """Evict the earliest-cached contents to admit all misses."""
    return _evict_oldest(candidates, cache, misses, book.inserted_at, capacity)


def least_requested_decide(
    book: PolicyBookkeeping,
    candidates: Sequence[int],
    cache: frozenset[int],
    misses: frozenset[int],
    capacity: int,
) -> list[int]:
    """Evict the cached contents with the fewest recorded requests."""
    return _evict_oldest(candidates, cache, misses, book.request_tally, capacity)


def random_decide(
    candidates: Sequence[int],
    cache: frozenset[int],
    misses: frozenset[int],
    capacity: int,
    rng: np.random.Generator,
) -> list[int]:
    """Evict uniformly random cached contents to admit all misses."""
    n_evict = min(len(misses), capacity)
    cached = sorted(o for o in candidates if o in cache)
    pick = rng.choice(len(cached), size=n_evict, replace=False) if n_evict else []
    evict = {cached[int(i)] for i in pick}
    admit = set(sorted(misses)[:capacity]) if len(misses) > capacity else misses
    return [
        (0 if o in evict else 1) if o in cache else (1 if o in admit else 0)
        for o in candidates
    ]


class _BaselinePolicy:
    """Shared slot loop plumbing for the classical policies."""

    trainable = False

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.book = PolicyBookkeeping()

    @property
    def epsilon(self) -> float | None:
        return None

    def begin_episode(self, env: CacheEnv) -> None:
        state = env.state
        self.book = PolicyBookkeeping()
        for o in state.cache:
            self.book.last_used[o] = -1
            self.book.inserted_at[o] = -1
            self.book.request_tally[o] = 0

    def _touch_hits(self, state: SystemState, slot: int) -> None:
        cached = set(state.cache)
        for o in sorted(state.requests.distinct & cached):
            self.book.last_used[o] = slot
            self.book.request_tally[o] = self.book.request_tally.get(o, 0) \
                + state.requests.counts[o]

    def act(self, env: CacheEnv) -> list[int]:
        state = env.state
        slot = env.slot
        self._touch_hits(state, slot)
        cache = frozenset(state.cache)
        misses = state.requests.distinct - cache
        return self._decide(env.candidates(), cache, misses, slot)

    def _decide(self, candidates, cache, misses, slot) -> list[int]:
        raise NotImplementedError

    def record(self, env: CacheEnv, prev_state: SystemState, indicators: Sequence[int],
               outcome: SlotOutcome, new_state: SystemState, terminal: bool) -> float | None:
        slot = outcome.slot
        new_cache = set(new_state.cache)
        for o in sorted(new_cache - set(prev_state.cache)):
            self.book.inserted_at[o] = slot
            self.book.last_used[o] = slot
            self.book.request_tally[o] = prev_state.requests.counts.get(o, 0)
        for book in (self.book.last_used, self.book.inserted_at, self.book.request_tally):
            for o in list(book):
                if o not in new_cache:
                    del book[o]
        return None


class LruPolicy(_BaselinePolicy):
    def _decide(self, candidates, cache, misses, slot):
        return lru_decide(self.book, candidates, cache, misses, self.capacity)


class FifoPolicy(_BaselinePolicy):
    def _decide(self, candidates, cache, misses, slot):
        return fifo_decide(self.book, candidates, cache, misses, self.capacity)


class LeastRequestedPolicy(_BaselinePolicy):
    def _decide(self, candidates, cache, misses, slot):
        return least_requested_decide(self.book, candidates, cache, misses, self.capacity)


class RandomPolicy(_BaselinePolicy):
    def __init__(self, capacity: int, rng: np.random.Generator):
        super().__init__(capacity)
        self.rng = rng

    def _decide(self, candidates, cache, misses, slot):
        return random_decide(candidates, cache, misses, self.capacity, self.rng)


class ThresholdPolicy(_BaselinePolicy):
    """q-driven policy: cached contents below the mean q evict, misses admit,
    the refill step then ranks by q."""

    def act(self, env: CacheEnv) -> list[int]:
        state = env.state
        cached_part = threshold_rule(state.cache_q)
        n_new = len(env.candidates()) - len(state.cache)
        return cached_part + [1] * n_new

    def record(self, env, prev_state, indicators, outcome, new_state, terminal):
        return None
