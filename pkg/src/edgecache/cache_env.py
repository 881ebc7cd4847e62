"""The content-update decision process at the base station.

One step of the loop: serve the slot's requests (misses are fetched from the
server), apply the evict/retain action over the update candidates, refill the
cache to capacity by highest normalized cumulative request, fold the slot's
requests into the ledger, and score the reward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .workload import RequestBatch

__all__ = [
    "CumulativeLedger",
    "SystemState",
    "ActionVector",
    "SlotOutcome",
    "CacheEnv",
    "serve_requests",
    "candidate_set",
    "apply_update",
    "update_ledger",
    "threshold_rule",
    "compute_reward",
]

# Relative slack for the "strictly below the mean" comparison, so that values
# sitting exactly on the mean retain despite float summation noise.
_MEAN_TOL = 1e-12


class CumulativeLedger:
    """Per-content running tallies: raw counts, normalized cumulative request q,
    the most recent slot's delta, and the last slot each content was requested.

    q grows by delta = count / total-slot-requests each slot, so the per-slot
    deltas of requested contents sum to 1 and q never decreases.
    """

    def __init__(self, catalog_size: int):
        if catalog_size < 1:
            raise ValueError(f"catalog_size must be >= 1, got {catalog_size}")
        self.catalog_size = catalog_size
        # index 0 unused; content ids are 1-based
        self._raw = np.zeros(catalog_size + 1, dtype=np.int64)
        self._q = np.zeros(catalog_size + 1, dtype=np.float64)
        self._delta = np.zeros(catalog_size + 1, dtype=np.float64)
        self._last_requested = np.full(catalog_size + 1, -1, dtype=np.int64)

    def raw_count(self, content: int) -> int:
        return int(self._raw[content])

    def q(self, content: int) -> float:
        return float(self._q[content])

    def last_delta(self, content: int) -> float:
        return float(self._delta[content])

    def last_requested(self, content: int) -> int:
        return int(self._last_requested[content])

    def q_values(self, contents: Iterable[int]) -> tuple[float, ...]:
        return tuple(float(self._q[o]) for o in contents)

    def q_array(self) -> np.ndarray:
        """q over the whole catalog, index = content id (entry 0 unused)."""
        return self._q.copy()

    def update(self, batch: RequestBatch) -> None:
        """Fold one slot's requests in; an empty slot leaves everything unchanged."""
        self._delta[:] = 0.0
        total = batch.total_requests
        if total == 0:
            return
        for content in sorted(batch.counts):
            c = batch.counts[content]
            d = c / total
            self._delta[content] = d
            self._q[content] += d
            self._raw[content] += c
            self._last_requested[content] = batch.slot


@dataclass(frozen=True)
class SystemState:
    """MDP state: the cache with its q values, plus the slot's requests."""

    cache: tuple[int, ...]
    cache_q: tuple[float, ...]
    requests: RequestBatch

    def __post_init__(self):
        if len(set(self.cache)) != len(self.cache):
            raise ValueError("cache contains duplicate contents")
        if len(self.cache_q) != len(self.cache):
            raise ValueError("cache_q length does not match cache")


@dataclass(frozen=True)
class ActionVector:
    """Evict/retain indicators over an ordered candidate list (0 evict, 1 retain)."""

    candidates: tuple[int, ...]
    indicators: tuple[int, ...]

    def __post_init__(self):
        if len(self.candidates) != len(self.indicators):
            raise ValueError("candidates and indicators lengths differ")
        if len(set(self.candidates)) != len(self.candidates):
            raise ValueError("candidates contain duplicates")
        if any(b not in (0, 1) for b in self.indicators):
            raise ValueError("indicators must be 0 or 1")


@dataclass(frozen=True)
class SlotOutcome:
    """Everything observable about one executed slot."""

    slot: int
    hits: frozenset[int]
    misses: frozenset[int]
    d_plus: frozenset[int]   # newly cached this slot
    d_star: frozenset[int]   # cached before and retained
    d_minus: frozenset[int]  # evicted by the previous slot's update
    reward: float
    hit_numerator: int       # request-weighted hits this slot
    hit_denominator: int     # total requests this slot


def serve_requests(cache: Iterable[int], batch: RequestBatch) -> tuple[frozenset[int], frozenset[int]]:
    """Split the slot's distinct requests into cache hits and fetched misses."""
    cached = frozenset(cache)
    hits = batch.distinct & cached
    return hits, batch.distinct - cached


def candidate_set(cache: Sequence[int], distinct_requests: Iterable[int]) -> list[int]:
    """Ordered update candidates: cache contents in cache order, then newly
    fetched requests ascending. Requests already cached add nothing."""
    new = sorted(set(distinct_requests) - set(cache))
    return list(cache) + new


def apply_update(
    candidates: Sequence[int],
    indicators: Sequence[int],
    ledger: CumulativeLedger,
    catalog_size: int,
    capacity: int,
) -> list[int]:
    """Apply evict/retain indicators, then bring the cache back to exactly
    `capacity` contents.

    Over-retention keeps the retained contents with highest q; refill pulls the
    highest-q contents not already retained. Ties break toward the lower
    content id.
    """
    if capacity > catalog_size:
        raise ValueError(f"cache capacity {capacity} exceeds catalog size {catalog_size}")
    if len(candidates) != len(indicators):
        raise ValueError("candidates and indicators lengths differ")
    retained = [o for o, keep in zip(candidates, indicators) if keep]
    if len(retained) > capacity:
        q = np.array([ledger.q(o) for o in retained])
        ids = np.array(retained)
        keep_idx = np.lexsort((ids, -q))[:capacity]
        keep = set(ids[keep_idx].tolist())
        return [o for o in retained if o in keep]
    if len(retained) < capacity:
        q_all = ledger.q_array()
        q_all[0] = -np.inf
        for o in retained:
            q_all[o] = -np.inf
        order = np.lexsort((np.arange(len(q_all)), -q_all))
        refill = order[: capacity - len(retained)].tolist()
        return retained + [int(o) for o in refill]
    return list(retained)


def update_ledger(ledger: CumulativeLedger, batch: RequestBatch) -> CumulativeLedger:
    """Fold the slot's requests into the ledger (in place) and return it."""
    ledger.update(batch)
    return ledger


def threshold_rule(cache_q: Sequence[float]) -> list[int]:
    """Evict cached contents whose q is strictly below the cache mean; boundary
    values retain."""
    if len(cache_q) < 1:
        raise ValueError("cache_q must hold at least one value")
    mean = math.fsum(cache_q) / len(cache_q)
    cut = mean - _MEAN_TOL * max(1.0, abs(mean))
    return [0 if q < cut else 1 for q in cache_q]


def compute_reward(
    d_star: Iterable[int],
    d_plus: Iterable[int],
    d_minus: Iterable[int],
    counts: Mapping[int, int],
    eta: float,
    cost_weight: float,
) -> float:
    """Immediate reward for one slot.

    Delivering a retained content earns its normalized request share v, a newly
    cached one earns eta * v, and every newly cached or just-evicted content
    costs cost_weight * v. Contents not requested this slot contribute nothing.
    """
    total = sum(counts.values())
    if total == 0:
        return 0.0

    def share(content: int) -> float:
        return counts.get(content, 0) / total

    positive = math.fsum(share(o) for o in sorted(d_star))
    positive += eta * math.fsum(share(o) for o in sorted(d_plus))
    churn = set(d_plus) | set(d_minus)
    negative = cost_weight * math.fsum(share(o) for o in sorted(churn))
    return positive - negative


class CacheEnv:
    """Single base-station environment.

    The caller owns request generation: `reset` takes the first slot's batch and
    `step` takes the following slot's batch, so the same environment runs from a
    live sampler or from a trace file. Instances are single-threaded state
    machines; run replicas in parallel by giving each its own instance.
    """

    def __init__(
        self,
        catalog_size: int,
        capacity: int,
        eta: float = 0.5,
        cost_weight: float = 0.3,
        empty_slot_mode: str = "agent",
    ):
        if not 0 < eta < 1:
            raise ValueError(f"eta must lie in (0, 1), got {eta}")
        if not 0 < cost_weight < 1:
            raise ValueError(f"cost_weight must lie in (0, 1), got {cost_weight}")
        if capacity < 1 or capacity > catalog_size:
            raise ValueError(
                f"capacity must lie in [1, {catalog_size}], got {capacity}")
        if empty_slot_mode not in ("agent", "threshold"):
            raise ValueError(f"unknown empty_slot_mode {empty_slot_mode!r}")
        self.catalog_size = catalog_size
        self.capacity = capacity
        self.eta = eta
        self.cost_weight = cost_weight
        self.empty_slot_mode = empty_slot_mode
        self.ledger = CumulativeLedger(catalog_size)
        self._cache: list[int] = []
        self._prev_evicted: frozenset[int] = frozenset()
        self._slot = 0
        self._state: SystemState | None = None
        self.hit_numerator = 0
        self.hit_denominator = 0

    @property
    def state(self) -> SystemState:
        if self._state is None:
            raise RuntimeError("environment not reset")
        return self._state

    @property
    def slot(self) -> int:
        return self._slot

    @property
    def hit_rate(self) -> float:
        if self.hit_denominator == 0:
            return 0.0
        return self.hit_numerator / self.hit_denominator

    def reset(self, initial_cache: Sequence[int], first_batch: RequestBatch) -> SystemState:
        cache = list(initial_cache)
        if len(cache) != self.capacity or len(set(cache)) != self.capacity:
            raise ValueError(f"initial cache must hold {self.capacity} distinct contents")
        if any(not 1 <= o <= self.catalog_size for o in cache):
            raise ValueError("initial cache contains out-of-catalog contents")
        self.ledger = CumulativeLedger(self.catalog_size)
        self._cache = cache
        self._prev_evicted = frozenset()
        self._slot = 0
        self.hit_numerator = 0
        self.hit_denominator = 0
        self._state = self._make_state(first_batch)
        return self._state

    def _make_state(self, batch: RequestBatch) -> SystemState:
        cache = tuple(self._cache)
        return SystemState(cache=cache, cache_q=self.ledger.q_values(cache), requests=batch)

    def candidates(self) -> list[int]:
        return candidate_set(self.state.cache, self.state.requests.distinct)

    def default_indicators(self) -> list[int]:
        """Threshold-rule indicators for a request-free slot (cached part only)."""
        return threshold_rule(self.state.cache_q)

    def step(self, indicators: Sequence[int], next_batch: RequestBatch) -> tuple[SlotOutcome, SystemState]:
        """Run one slot: serve, update the cache, advance the ledger, score."""
        state = self.state
        batch = state.requests
        candidates = candidate_set(state.cache, batch.distinct)
        if len(indicators) != len(candidates):
            raise ValueError(
                f"expected {len(candidates)} indicators for slot {self._slot}, got {len(indicators)}")

        hits, misses = serve_requests(state.cache, batch)
        new_cache = apply_update(candidates, indicators, self.ledger,
                                 self.catalog_size, self.capacity)
        new_set = frozenset(new_cache)
        old_set = frozenset(state.cache)
        d_plus = new_set - old_set
        d_star = old_set & new_set
        d_minus = self._prev_evicted
        reward = compute_reward(d_star, d_plus, d_minus, batch.counts,
                                self.eta, self.cost_weight)

        hit_num = sum(batch.counts[o] for o in sorted(hits))
        hit_den = batch.total_requests
        self.hit_numerator += hit_num
        self.hit_denominator += hit_den

        outcome = SlotOutcome(
            slot=self._slot, hits=hits, misses=misses,
            d_plus=frozenset(d_plus), d_star=frozenset(d_star), d_minus=d_minus,
            reward=reward, hit_numerator=hit_num, hit_denominator=hit_den,
        )
        self._prev_evicted = frozenset(candidates) - new_set
        update_ledger(self.ledger, batch)
        self._cache = new_cache
        self._slot += 1
        self._state = self._make_state(next_batch)
        return outcome, self._state
