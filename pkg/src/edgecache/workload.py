"""Synthetic request workloads: Zipf catalogs, per-slot request batches, trace files.

All randomness flows through explicitly passed numpy Generators, so identical
seeds reproduce identical traces byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Catalog",
    "RequestBatch",
    "TraceHeader",
    "TraceParseError",
    "build_catalog",
    "sample_slot_requests",
    "write_trace",
    "read_trace",
]

# Content ids are 1-based: content 1 is the most popular.


class TraceParseError(ValueError):
    """Raised when a trace file is malformed; message names the offending line."""


@dataclass(frozen=True)
class Catalog:
    """The server's content universe with Zipf popularity weights."""

    size: int
    zipf_exponent: float
    popularity: np.ndarray  # shape (size,), strictly positive, sums to 1

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"catalog size must be >= 1, got {self.size}")
        if self.zipf_exponent < 0:
            raise ValueError(f"zipf exponent must be >= 0, got {self.zipf_exponent}")


@dataclass(frozen=True)
class RequestBatch:
    """All user requests of one time slot.

    per_user[k] is the set of contents requested by user k (each user requests
    a content at most once per slot), counts maps content id to the number of
    requesting users, distinct is the union of the per-user sets.
    """

    slot: int
    per_user: tuple[frozenset[int], ...]
    counts: dict[int, int]
    distinct: frozenset[int]

    @classmethod
    def from_user_sets(cls, slot: int, user_sets: Sequence[Iterable[int]]) -> "RequestBatch":
        per_user = tuple(frozenset(s) for s in user_sets)
        counts: dict[int, int] = {}
        for s in per_user:
            for o in sorted(s):
                counts[o] = counts.get(o, 0) + 1
        counts = dict(sorted(counts.items()))
        return cls(slot=slot, per_user=per_user, counts=counts,
                   distinct=frozenset(counts))

    @property
    def total_requests(self) -> int:
        return sum(self.counts.values())

    @property
    def empty(self) -> bool:
        return not self.counts


def build_catalog(size: int, zipf_exponent: float) -> Catalog:
    """Catalog whose popularity follows the Zipf law p_i proportional to i^-z."""
    if size < 1:
        raise ValueError(f"catalog size must be >= 1, got {size}")
    if zipf_exponent < 0:
        raise ValueError(f"zipf exponent must be >= 0, got {zipf_exponent}")
    ranks = np.arange(1, size + 1, dtype=np.float64)
    weights = ranks ** -float(zipf_exponent)
    return Catalog(size=size, zipf_exponent=float(zipf_exponent),
                   popularity=weights / weights.sum())


def _draw_distinct(cdf: np.ndarray, n: int, rng: np.random.Generator) -> frozenset[int]:
    # Successive popularity-weighted draws without replacement: duplicates are
    # redrawn, which renormalizes over the remaining contents.
    size = len(cdf)
    chosen: set[int] = set()
    want = n
    while want > 0:
        idx = np.searchsorted(cdf, rng.random(want), side="right")
        np.minimum(idx, size - 1, out=idx)
        chosen.update(int(i) + 1 for i in idx)
        want = n - len(chosen)
    return frozenset(chosen)


def sample_slot_requests(
    catalog: Catalog,
    num_users: int,
    cache_capacity: int,
    mean_requests: float,
    rng: np.random.Generator,
    slot: int = 0,
) -> RequestBatch:
    """Draw one slot of requests.

    Each user draws a Poisson(mean_requests) request count clipped to
    [0, cache_capacity], then that many distinct contents by popularity-weighted
    sampling without replacement. An all-empty slot is valid.
    """
    if num_users < 1:
        raise ValueError(f"num_users must be >= 1, got {num_users}")
    per_user_n = np.minimum(rng.poisson(mean_requests, num_users), cache_capacity)
    if catalog.size == 1:
        sets = [frozenset([1]) if n > 0 else frozenset() for n in per_user_n]
        return RequestBatch.from_user_sets(slot, sets)
    cdf = np.cumsum(catalog.popularity)
    sets = [
        _draw_distinct(cdf, int(n), rng) if n > 0 else frozenset()
        for n in per_user_n
    ]
    return RequestBatch.from_user_sets(slot, sets)


@dataclass(frozen=True)
class TraceHeader:
    catalog_size: int
    users: int
    cache_capacity: int
    zipf: float
    seed: int
    slots: int


_HEADER_KEYS = ("catalog_size", "users", "cache_capacity", "zipf", "seed", "slots")


def write_trace(path: str | Path, header: TraceHeader, batches: Sequence[RequestBatch]) -> None:
    """Write a trace file: `# key=value` header lines, then `slot,user,content` rows.

    Rows are sorted by slot, then user, then content; ASCII decimal throughout.
    """
    if len(batches) != header.slots:
        raise ValueError(f"header says {header.slots} slots, got {len(batches)} batches")
    lines = []
    for key in _HEADER_KEYS:
        value = getattr(header, key)
        lines.append(f"# {key}={value!r}" if isinstance(value, float) else f"# {key}={value}")
    for t, batch in enumerate(batches):
        if batch.slot != t:
            raise ValueError(f"batch {t} has slot {batch.slot}; slots must be consecutive from 0")
        if len(batch.per_user) != header.users:
            raise ValueError(f"batch {t} has {len(batch.per_user)} users, header says {header.users}")
        for user, requested in enumerate(batch.per_user):
            for content in sorted(requested):
                lines.append(f"{t},{user},{content}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_trace(path: str | Path) -> tuple[TraceHeader, list[RequestBatch]]:
    """Parse a trace file back into (header, batches); inverse of write_trace."""
    text = Path(path).read_text(encoding="ascii")
    header_values: dict[str, str] = {}
    rows: list[tuple[int, int, int]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" not in body:
                raise TraceParseError(f"line {lineno}: malformed header line {line!r}")
            key, _, value = body.partition("=")
            if key.strip() not in _HEADER_KEYS:
                raise TraceParseError(f"line {lineno}: unknown header key {key.strip()!r}")
            header_values[key.strip()] = value.strip()
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise TraceParseError(f"line {lineno}: expected slot,user,content, got {line!r}")
        try:
            slot, user, content = (int(p) for p in parts)
        except ValueError as exc:
            raise TraceParseError(f"line {lineno}: non-integer field in {line!r}") from exc
        rows.append((slot, user, content))

    missing = [k for k in _HEADER_KEYS if k not in header_values]
    if missing:
        raise TraceParseError(f"header missing keys: {', '.join(missing)}")
    try:
        header = TraceHeader(
            catalog_size=int(header_values["catalog_size"]),
            users=int(header_values["users"]),
            cache_capacity=int(header_values["cache_capacity"]),
            zipf=float(header_values["zipf"]),
            seed=int(header_values["seed"]),
            slots=int(header_values["slots"]),
        )
    except ValueError as exc:
        raise TraceParseError(f"malformed header value: {exc}") from exc

    if rows != sorted(rows):
        raise TraceParseError("rows not sorted by slot, user, content")
    user_sets: list[list[set[int]]] = [
        [set() for _ in range(header.users)] for _ in range(header.slots)
    ]
    for lineno_offset, (slot, user, content) in enumerate(rows):
        if not 0 <= slot < header.slots:
            raise TraceParseError(f"row {lineno_offset + 1}: slot {slot} out of range [0, {header.slots})")
        if not 0 <= user < header.users:
            raise TraceParseError(f"row {lineno_offset + 1}: user {user} out of range [0, {header.users})")
        if not 1 <= content <= header.catalog_size:
            raise TraceParseError(
                f"row {lineno_offset + 1}: content {content} out of range [1, {header.catalog_size}]")
        if content in user_sets[slot][user]:
            raise TraceParseError(f"row {lineno_offset + 1}: duplicate request ({slot},{user},{content})")
        user_sets[slot][user].add(content)
    batches = [RequestBatch.from_user_sets(t, sets) for t, sets in enumerate(user_sets)]
    return header, batches
