"""Recurrent Q-network with an external similarity memory.

The agent extends the factorized DQN with an LSTM trunk over a sliding window
of recent states, plus a finite FIFO memory of (state, action, max Q) records.
At greedy decision time the memory's most similar entries pull each candidate
hypothesis's joint Q toward their stored values:

    sim(s, s_ex) = 1 / (1 + d),  d = euclidean distance over the indicator
    overlap of cached and requested contents, and

    Q_re = Q + sum_i sim_i * (Q_i - Q) / sum_i |sim_i|

over the top-k neighbors. Entries sharing no content with the current state
are excluded (their zero distance would claim perfect similarity).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .agent_dqn import (
    NUM_FEATURES,
    ENCODING_VERSION,
    EncodedState,
    ReplayBuffer,
    StepRecord,
    epsilon_schedule,
)
from .cache_env import CacheEnv, CumulativeLedger, SlotOutcome, SystemState
from .grad_core import Adam, Dense, LstmCell, Param, Relu, huber_loss
from .workload import RequestBatch

__all__ = [
    "ExternalMemoryEntry",
    "ExternalMemory",
    "similarity",
    "modify_q",
    "memory_insert",
    "RecurrentQNetwork",
    "emrqn_select_action",
    "EmrqnAgent",
    "EpisodeResult",
    "discounted_returns",
    "run_episode",
]


@dataclass(frozen=True)
class ExternalMemoryEntry:
    """One stored decision: executed indicators over the cached and requested
    contents, plus the maximum joint Q the network saw at that state."""

    cached_indicators: dict[int, int]
    request_indicators: dict[int, int]
    stored_max_q: float


def similarity(cached_indicators: Mapping[int, int],
               request_indicators: Mapping[int, int],
               entry: ExternalMemoryEntry) -> float:
    """Similarity 1/(1+d) between the current indicators and a stored entry.

    d is the euclidean distance over the shared cached contents and the shared
    requested contents; contents outside the overlap contribute nothing.
    """
    d2 = 0
    for o, bit in cached_indicators.items():
        if o in entry.cached_indicators:
            d2 += (bit - entry.cached_indicators[o]) ** 2
    for o, bit in request_indicators.items():
        if o in entry.request_indicators:
            d2 += (bit - entry.request_indicators[o]) ** 2
    return 1.0 / (1.0 + math.sqrt(d2))


def modify_q(raw_q: float, neighbors: Iterable[tuple[float, ExternalMemoryEntry | float]]) -> float:
    """Pull a joint Q toward the similarity-weighted stored Qs of its neighbors:
    Q_re = Q + sum_i sim_i (Q_i - Q) / sum_i |sim_i|.

    Evaluated in the rearranged form (sum sim_i Q_i + (sum |sim_i| - sum sim_i) Q)
    / sum |sim_i|, which is algebraically identical but cancels Q exactly when
    every sim is positive (as 1/(1+d) always is), instead of leaving rounding
    residue. An empty neighborhood returns the raw value unchanged.
    """
    vote = 0.0
    sim_sum = 0.0
    den = 0.0
    for sim, entry in neighbors:
        q_ex = entry.stored_max_q if isinstance(entry, ExternalMemoryEntry) else float(entry)
        vote += sim * q_ex
        sim_sum += sim
        den += abs(sim)
    if den == 0.0:
        return float(raw_q)
    return float((vote + (den - sim_sum) * raw_q) / den)


def _pack_bits(ids: np.ndarray, bits: np.ndarray, words: int) -> tuple[np.ndarray, np.ndarray]:
    present = np.zeros(words, dtype=np.uint64)
    retain = np.zeros(words, dtype=np.uint64)
    if len(ids):
        word = ids >> 6
        mask = np.uint64(1) << (ids & 63).astype(np.uint64)
        np.bitwise_or.at(present, word, mask)
        on = bits.astype(bool)
        if on.any():
            np.bitwise_or.at(retain, word[on], mask[on])
    return present, retain


class ExternalMemory:
    """FIFO store of decisions, held as per-content bitsets so the similarity
    scan over thousands of entries vectorizes to a handful of popcounts."""

    def __init__(self, capacity: int, catalog_size: int, store_rows: bool = False):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.catalog_size = catalog_size
        self.words = catalog_size // 64 + 1
        self.store_rows = store_rows
        shape = (capacity, self.words)
        self._cached_present = np.zeros(shape, dtype=np.uint64)
        self._cached_retain = np.zeros(shape, dtype=np.uint64)
        self._request_present = np.zeros(shape, dtype=np.uint64)
        self._request_retain = np.zeros(shape, dtype=np.uint64)
        self._max_q = np.zeros(capacity, dtype=np.float64)
        self._extras: list[tuple | None] = [None] * capacity
        self._start = 0
        self._count = 0

    def __len__(self) -> int:
        return self._count

    def _physical(self, logical: int) -> int:
        if not 0 <= logical < self._count:
            raise IndexError(f"entry {logical} out of range [0, {self._count})")
        return (self._start + logical) % self.capacity

    def insert(
        self,
        cached_ids: np.ndarray,
        cached_bits: np.ndarray,
        request_ids: np.ndarray,
        request_bits: np.ndarray,
        max_q: float,
        extra: tuple | None = None,
    ) -> None:
        """Append one decision; the oldest entry drops once the store is full."""
        if self._count < self.capacity:
            pos = (self._start + self._count) % self.capacity
            self._count += 1
        else:
            pos = self._start
            self._start = (self._start + 1) % self.capacity
        cp, cr = _pack_bits(np.asarray(cached_ids, dtype=np.int64),
                            np.asarray(cached_bits), self.words)
        rp, rr = _pack_bits(np.asarray(request_ids, dtype=np.int64),
                            np.asarray(request_bits), self.words)
        self._cached_present[pos] = cp
        self._cached_retain[pos] = cr
        self._request_present[pos] = rp
        self._request_retain[pos] = rr
        self._max_q[pos] = max_q
        self._extras[pos] = extra

    def entry(self, logical: int) -> ExternalMemoryEntry:
        """Reconstruct the logical-index-th oldest entry."""
        pos = self._physical(logical)

        def unpack(present: np.ndarray, retain: np.ndarray) -> dict[int, int]:
            out: dict[int, int] = {}
            for w in range(self.words):
                word = int(present[w])
                while word:
                    low = word & -word
                    bit = low.bit_length() - 1
                    o = w * 64 + bit
                    out[o] = int((int(retain[w]) >> bit) & 1)
                    word ^= low
            return out

        return ExternalMemoryEntry(
            cached_indicators=unpack(self._cached_present[pos], self._cached_retain[pos]),
            request_indicators=unpack(self._request_present[pos], self._request_retain[pos]),
            stored_max_q=float(self._max_q[pos]),
        )

    def extra(self, logical: int) -> tuple | None:
        return self._extras[self._physical(logical)]

    def live_views(self, recent: int = 0):
        """Arrays over the live entries plus their logical indices.

        With `recent` > 0 only the newest `recent` entries are scanned; 0 scans
        everything.
        """
        n = self._count
        if n == 0:
            return None
        if recent and recent < n:
            logical = np.arange(n - recent, n)
            physical = (self._start + logical) % self.capacity
            take = lambda a: a[physical]
            return (take(self._cached_present), take(self._cached_retain),
                    take(self._request_present), take(self._request_retain),
                    take(self._max_q), logical)
        if n == self.capacity:
            physical = np.arange(self.capacity)
            logical = (physical - self._start) % self.capacity
        else:
            physical = np.arange(n)
            logical = physical
        return (self._cached_present[physical], self._cached_retain[physical],
                self._request_present[physical], self._request_retain[physical],
                self._max_q[physical], logical)


def memory_insert(memory: ExternalMemory, state: SystemState,
                  indicators: Sequence[int], max_q: float,
                  extra: tuple | None = None) -> None:
    """Store the state's executed indicators and its maximum joint Q."""
    from .cache_env import candidate_set

    candidates = candidate_set(state.cache, state.requests.distinct)
    position = {o: i for i, o in enumerate(candidates)}
    bits = np.asarray(indicators, dtype=np.int8)
    cached_ids = np.asarray(state.cache, dtype=np.int64)
    cached_bits = np.array([bits[position[o]] for o in state.cache], dtype=np.int8)
    requested = sorted(state.requests.distinct)
    request_ids = np.asarray(requested, dtype=np.int64)
    request_bits = np.array([bits[position[o]] for o in requested], dtype=np.int8)
    memory.insert(cached_ids, cached_bits, request_ids, request_bits, float(max_q),
                  extra=extra)


class RecurrentQNetwork:
    """Row embed + masked mean pool per state, LSTM over the state window, and a
    per-candidate head on [row features, recurrent context]."""

    def __init__(self, hidden_size: int, rng: np.random.Generator, dtype=np.float32):
        self.hidden_size = hidden_size
        self.dtype = dtype
        self.embed = Dense(NUM_FEATURES, hidden_size, rng, dtype)
        self.embed_act = Relu()
        self.lstm = LstmCell(hidden_size, hidden_size, rng, dtype)
        self.h1 = Dense(NUM_FEATURES + hidden_size, hidden_size, rng, dtype)
        self.h1_act = Relu()
        self.head = Dense(hidden_size, 2, rng, dtype)
        self._cache: dict | None = None

    def params(self) -> dict[str, Param]:
        out = {}
        named = (("embed", self.embed), ("lstm", self.lstm),
                 ("h1", self.h1), ("head", self.head))
        for name, layer in named:
            for key, p in layer.params().items():
                out[f"{name}.{key}"] = p
        return out

    def copy_from(self, other: "RecurrentQNetwork") -> None:
        mine, theirs = self.params(), other.params()
        for key in mine:
            mine[key].value[...] = theirs[key].value

    def forward_batch(self, windows: Sequence[Sequence[EncodedState | None]]) -> np.ndarray:
        """Q pairs for the final state of each window, concatenated over the
        batch in window order; keeps caches for backward_batch."""
        batch = len(windows)
        width = len(windows[0])
        if any(len(w) != width for w in windows):
            raise ValueError("all windows must share one width")
        if any(w[-1] is None for w in windows):
            raise ValueError("the final window element must be a real state")

        # embed every real state's rows in one pass, pool to one vector each
        segments: list[tuple[int, int]] = []  # (flat window index, row count)
        row_blocks = []
        for b, window in enumerate(windows):
            for t, st in enumerate(window):
                if st is not None and st.count > 0:
                    segments.append((b * width + t, st.count))
                    row_blocks.append(st.rows)
        all_rows = np.concatenate(row_blocks, axis=0).astype(self.dtype, copy=False)
        embedded = self.embed_act.forward(self.embed.forward(all_rows))
        counts = np.array([c for _, c in segments])
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        pooled_flat = np.add.reduceat(embedded, starts, axis=0) / counts[:, None]
        pooled = np.zeros((batch * width, self.hidden_size), dtype=self.dtype)
        seg_idx = np.array([i for i, _ in segments])
        pooled[seg_idx] = pooled_flat.astype(self.dtype, copy=False)
        xs = [pooled.reshape(batch, width, -1)[:, t, :] for t in range(width)]

        h0, c0 = self.lstm.zero_state(batch)
        hs, lstm_caches = self.lstm.unroll(xs, h0, c0)
        context = hs[-1]  # (batch, H)

        cur_counts = np.array([w[-1].count for w in windows])
        cur_rows = np.concatenate([w[-1].rows for w in windows], axis=0).astype(self.dtype, copy=False)
        ctx_rows = np.repeat(context, cur_counts, axis=0)
        head_in = np.concatenate([cur_rows, ctx_rows], axis=1)
        hidden = self.h1_act.forward(self.h1.forward(head_in))
        q = self.head.forward(hidden)

        self._cache = {
            "batch": batch, "width": width, "counts": counts, "starts": starts,
            "seg_idx": seg_idx, "lstm_caches": lstm_caches,
            "cur_counts": cur_counts,
        }
        return q

    def backward_batch(self, dq: np.ndarray) -> None:
        if self._cache is None:
            raise RuntimeError("backward_batch called before forward_batch")
        cache = self._cache
        d_head_in = self.h1.backward(self.h1_act.backward(self.head.backward(dq)))
        d_ctx_rows = d_head_in[:, NUM_FEATURES:]
        cur_starts = np.concatenate([[0], np.cumsum(cache["cur_counts"])[:-1]])
        d_context = np.add.reduceat(d_ctx_rows, cur_starts, axis=0)

        dxs, _, _ = self.lstm.unroll_backward(cache["lstm_caches"], d_context.astype(self.dtype))
        d_pooled = np.stack(dxs, axis=1).reshape(cache["batch"] * cache["width"], -1)
        d_pooled_flat = d_pooled[cache["seg_idx"]] / cache["counts"][:, None]
        d_embedded = np.repeat(d_pooled_flat, cache["counts"], axis=0)
        self.embed.backward(self.embed_act.backward(d_embedded.astype(self.dtype)))
        self._cache = None

    def forward_window(self, window: Sequence[EncodedState | None]) -> np.ndarray:
        """Q pairs (C, 2) for a single window's final state."""
        return self.forward_batch([window])


def _state_bitsets(encoded: EncodedState, bits: np.ndarray, words: int):
    ids = encoded.candidates.astype(np.int64)
    in_cache = encoded.rows[:, 2] > 0.5
    in_request = encoded.rows[:, 3] > 0.5
    cached = _pack_bits(ids[in_cache], bits[in_cache], words)
    requested = _pack_bits(ids[in_request], bits[in_request], words)
    return ids, in_cache, in_request, cached, requested


def _neighbor_scan(memory: ExternalMemory, encoded: EncodedState, base_bits: np.ndarray,
                   scan_recent: int):
    """Integer squared distances of the base action against the scanned entries,
    plus the per-candidate distance shift a single-bit flip would cause."""
    views = memory.live_views(scan_recent)
    if views is None:
        return None
    mem_cp, mem_cr, mem_rp, mem_rr, mem_q, logical = views
    ids, in_cache, in_request, (cur_cp, cur_cr), (cur_rp, cur_rr) = _state_bitsets(
        encoded, base_bits, memory.words)

    inter_c = mem_cp & cur_cp
    inter_r = mem_rp & cur_rp
    diff_c = (mem_cr ^ cur_cr) & inter_c
    diff_r = (mem_rr ^ cur_rr) & inter_r
    d2 = (np.bitwise_count(diff_c).sum(axis=1, dtype=np.int64)
          + np.bitwise_count(diff_r).sum(axis=1, dtype=np.int64))
    overlap = (np.bitwise_count(inter_c).sum(axis=1, dtype=np.int64)
               + np.bitwise_count(inter_r).sum(axis=1, dtype=np.int64))
    valid = overlap > 0

    # per-candidate distance shift: gather each candidate's bit column from the
    # intersection/difference words in one vectorized pass per part
    words = ids >> 6
    bits = (ids & 63).astype(np.uint64)
    one = np.uint64(1)

    def column_delta(inter, diff, active):
        gathered_i = (inter[:, words] >> bits[None, :]) & one   # (n, C)
        gathered_d = (diff[:, words] >> bits[None, :]) & one
        part = gathered_i.astype(np.int64) - 2 * gathered_d.astype(np.int64)
        part[:, ~active] = 0
        return part

    delta = (column_delta(inter_c, diff_c, in_cache)
             + column_delta(inter_r, diff_r, in_request)).T
    return d2, valid, delta, mem_q, logical


def _reeval_joint(memory: ExternalMemory, network: RecurrentQNetwork,
                  logical_idx: int, ids: np.ndarray, base_bits: np.ndarray):
    """Re-evaluate a stored state under the current head; returns the joint Q of
    the current base action mapped onto it by content id, plus the per-current-
    candidate joint shift a flip would cause."""
    extra = memory.extra(logical_idx)
    if extra is None:
        return None
    ex_ids, ex_bits, ex_rows, ex_ctx = extra
    head_in = np.concatenate([ex_rows, np.repeat(ex_ctx[None, :], len(ex_rows), axis=0)], axis=1)
    hidden = np.maximum(head_in @ network.h1.w.value.T + network.h1.b.value, 0.0)
    pairs = hidden @ network.head.w.value.T + network.head.b.value
    position = {int(o): i for i, o in enumerate(ex_ids)}
    mapped = ex_bits.astype(np.int64).copy()
    for j, o in enumerate(ids):
        pos = position.get(int(o))
        if pos is not None:
            mapped[pos] = base_bits[j]
    sel = pairs[np.arange(len(pairs)), mapped]
    base_joint = float(sel.mean())
    adjust = np.zeros(len(ids))
    for j, o in enumerate(ids):
        pos = position.get(int(o))
        if pos is not None:
            adjust[j] = (pairs[pos, 1 - base_bits[j]] - pairs[pos, mapped[pos]]) / len(pairs)
    return base_joint, adjust


def _modified_decisions(
    q_pairs: np.ndarray,
    encoded: EncodedState,
    memory: ExternalMemory | None,
    network: RecurrentQNetwork,
    knn_k: int,
    scan_recent: int,
    qex_mode: str,
) -> np.ndarray:
    """Greedy indicators after the external memory modifies each candidate's two
    joint hypotheses (base action with that candidate retained vs evicted)."""
    base = (q_pairs[:, 1] >= q_pairs[:, 0]).astype(np.int8)
    if memory is None or len(memory) == 0:
        return base
    scan = _neighbor_scan(memory, encoded, base, scan_recent)
    if scan is None:
        return base
    d2, valid, delta, mem_q, logical = scan
    n_valid = int(valid.sum())
    k = min(knn_k, n_valid)
    if k == 0:
        return base

    count = len(q_pairs)
    idx_all = np.arange(count)
    chosen_q = q_pairs[idx_all, base.astype(np.int64)]
    flip_q = q_pairs[idx_all, 1 - base.astype(np.int64)]
    base_joint = float(chosen_q.mean())
    joints = np.empty(count + 1)
    joints[0] = base_joint
    joints[1:] = base_joint + (flip_q - chosen_q) / count

    dmat = np.empty((count + 1, len(d2)))
    dmat[0] = d2
    dmat[1:] = d2[None, :] + delta
    dmat[:, ~valid] = np.inf

    top = np.argpartition(dmat, k - 1, axis=1)[:, :k]
    top_d = np.take_along_axis(dmat, top, axis=1)
    sims = 1.0 / (1.0 + np.sqrt(top_d))

    if qex_mode == "reeval":
        q_ex = np.empty_like(sims)
        cache: dict[int, tuple[float, np.ndarray]] = {}
        ids = encoded.candidates.astype(np.int64)
        for r in range(count + 1):
            for c in range(k):
                entry_idx = int(logical[top[r, c]])
                if entry_idx not in cache:
                    reevaluated = _reeval_joint(memory, network, entry_idx, ids, base)
                    cache[entry_idx] = reevaluated if reevaluated is not None else None
                got = cache[entry_idx]
                if got is None:
                    q_ex[r, c] = mem_q[top[r, c]]
                elif r == 0:
                    q_ex[r, c] = got[0]
                else:
                    q_ex[r, c] = got[0] + got[1][r - 1]
    else:
        q_ex = mem_q[top]

    # rearranged Eq. form as in modify_q: with all-positive sims the raw joint
    # cancels exactly, so mathematically tied hypotheses stay bitwise tied
    sim_sum = sims.sum(axis=1)
    den = np.abs(sims).sum(axis=1)
    modified = ((sims * q_ex).sum(axis=1) + (den - sim_sum) * joints) / den

    keep_value = modified[0]
    flip_value = modified[1:]
    retain_value = np.where(base == 1, keep_value, flip_value)
    evict_value = np.where(base == 0, keep_value, flip_value)
    return (retain_value >= evict_value).astype(np.int8)


def emrqn_select_action(
    network: RecurrentQNetwork,
    window: Sequence[EncodedState | None],
    memory: ExternalMemory | None,
    epsilon: float,
    rng: np.random.Generator,
    knn_k: int = 32,
    scan_recent: int = 0,
    qex_mode: str = "stored",
) -> np.ndarray:
    """Indicators for the window's final state; the greedy branch runs the
    memory-modified per-candidate argmax."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    q_pairs = network.forward_window(window)
    if epsilon > 0.0 and rng.random() < epsilon:
        return rng.integers(0, 2, size=len(q_pairs)).astype(np.int8)
    return _modified_decisions(q_pairs, window[-1], memory, network,
                               knn_k, scan_recent, qex_mode)


def emrqn_train_step(
    online: RecurrentQNetwork,
    target: RecurrentQNetwork,
    replay: ReplayBuffer,
    refs: Sequence[tuple[int, int]],
    width: int,
    gamma: float,
    optimizer: Adam,
    memory: ExternalMemory | None = None,
    knn_k: int = 32,
    scan_recent: int = 0,
    modify_targets: bool = False,
) -> float:
    """One TD step on window batches; identical target construction to the DQN
    step, with recurrent forward passes over the sampled sequences."""
    records = [replay.record(r) for r in refs]
    next_windows = [replay.window(ep, t + 1, width) for ep, t in refs]
    next_q = target.forward_batch(next_windows)
    target._cache = None
    next_counts = np.array([w[-1].count for w in next_windows])
    next_starts = np.concatenate([[0], np.cumsum(next_counts)[:-1]])
    next_max = next_q.max(axis=1)
    next_value = np.add.reduceat(next_max, next_starts) / next_counts
    if modify_targets and memory is not None and len(memory) > 0:
        for b, window in enumerate(next_windows):
            seg = slice(next_starts[b], next_starts[b] + next_counts[b])
            pairs = next_q[seg]
            greedy = (pairs[:, 1] >= pairs[:, 0]).astype(np.int8)
            scan = _neighbor_scan(memory, window[-1], greedy, scan_recent)
            if scan is None:
                continue
            d2, valid, _, mem_q, _ = scan
            k = min(knn_k, int(valid.sum()))
            if k == 0:
                continue
            d2 = np.where(valid, d2.astype(np.float64), np.inf)
            top = np.argpartition(d2, k - 1)[:k]
            sims = 1.0 / (1.0 + np.sqrt(d2[top]))
            next_value[b] = modify_q(float(next_value[b]),
                                     zip(sims.tolist(), mem_q[top].tolist()))

    ys = np.array([
        rec.reward + (0.0 if rec.terminal else gamma * float(v))
        for rec, v in zip(records, next_value)
    ])

    windows = [replay.window(ep, t, width) for ep, t in refs]
    q = online.forward_batch(windows)
    counts = np.array([rec.encoded.count for rec in records])
    chosen = np.concatenate([rec.indicators for rec in records]).astype(np.int64)
    idx = np.arange(len(q))
    q_sel = q[idx, chosen]
    y_rows = np.repeat(ys, counts)
    losses, grads = huber_loss(q_sel.astype(np.float64), y_rows)
    loss = float(losses.mean())
    dq = np.zeros_like(q)
    dq[idx, chosen] = (grads / len(q)).astype(q.dtype)
    optimizer.zero_grad()
    online.backward_batch(dq)
    optimizer.step()
    return loss


class EmrqnAgent:
    """External-memory recurrent Q agent following the shared policy protocol."""

    trainable = True

    def __init__(
        self,
        catalog_size: int,
        capacity: int,
        users: int,
        horizon: int,
        hidden_size: int = 128,
        window: int = 8,
        learning_rate: float = 0.00015,
        weight_decay: float = 1e-5,
        gamma: float = 0.999,
        batch_size: int = 8,
        replay_capacity: int = 100_000,
        memory_capacity: int = 80_000,
        knn_k: int = 32,
        scan_recent: int = 0,
        qex_mode: str = "stored",
        modify_targets: bool = False,
        train_every: int = 4,
        target_sync: int = 200,
        epsilon_tau: float = 2000.0,
        epsilon_floor: float = 0.01,
        rng_init: np.random.Generator | None = None,
        rng_explore: np.random.Generator | None = None,
    ):
        if qex_mode not in ("stored", "reeval"):
            raise ValueError(f"unknown qex_mode {qex_mode!r}")
        rng_init = rng_init or np.random.default_rng(0)
        self.catalog_size = catalog_size
        self.capacity = capacity
        self.users = users
        self.horizon = horizon
        self.window = window
        self.gamma = gamma
        self.batch_size = batch_size
        self.knn_k = knn_k
        self.scan_recent = scan_recent
        self.qex_mode = qex_mode
        self.modify_targets = modify_targets
        self.train_every = train_every
        self.target_sync = target_sync
        self.epsilon_tau = epsilon_tau
        self.epsilon_floor = epsilon_floor
        self.online = RecurrentQNetwork(hidden_size, rng_init)
        self.target = RecurrentQNetwork(hidden_size, rng_init)
        self.target.copy_from(self.online)
        self.optimizer = Adam(self.online.params(), learning_rate, weight_decay)
        self.replay = ReplayBuffer(replay_capacity)
        self.memory = ExternalMemory(memory_capacity, catalog_size,
                                     store_rows=(qex_mode == "reeval"))
        self.rng_explore = rng_explore or np.random.default_rng(1)
        self.eval_mode = False
        self.global_slots = 0
        self.train_steps = 0
        self._episode_states: list[EncodedState] = []
        self._acted_slot = -1
        self._last_pairs: np.ndarray | None = None

    @property
    def epsilon(self) -> float:
        if self.eval_mode:
            return 0.0
        return epsilon_schedule(self.global_slots, self.epsilon_tau, self.epsilon_floor)

    def set_eval(self, eval_mode: bool) -> None:
        self.eval_mode = eval_mode

    def encode(self, state: SystemState, ledger: CumulativeLedger, slot: int) -> EncodedState:
        from .agent_dqn import encode_state

        return encode_state(state, ledger, slot, self.horizon, self.users)

    def begin_episode(self, env: CacheEnv) -> None:
        if not self.eval_mode:
            self.replay.begin_episode()
        self._episode_states = [self.encode(env.state, env.ledger, env.slot)]
        self._acted_slot = -1
        self._last_pairs = None

    def current_window(self) -> list[EncodedState | None]:
        states = self._episode_states[-self.window:]
        pad: list[EncodedState | None] = [None] * (self.window - len(states))
        return pad + states

    def act(self, env: CacheEnv) -> list[int]:
        window = self.current_window()
        q_pairs = self.online.forward_window(window)
        self._last_pairs = q_pairs
        self._acted_slot = env.slot
        eps = self.epsilon
        if eps > 0.0 and self.rng_explore.random() < eps:
            return self.rng_explore.integers(0, 2, size=len(q_pairs)).astype(np.int8).tolist()
        return _modified_decisions(q_pairs, window[-1], self.memory, self.online,
                                   self.knn_k, self.scan_recent, self.qex_mode).tolist()

    def _insert_memory(self, state: SystemState, indicators: Sequence[int],
                       q_pairs: np.ndarray, encoded: EncodedState) -> None:
        max_q = float(q_pairs.max(axis=1).mean())
        extra = None
        if self.memory.store_rows:
            extra = (
                encoded.candidates.copy(),
                np.asarray(indicators, dtype=np.int8),
                encoded.rows.copy(),
                self._context_vector(),
            )
        memory_insert(self.memory, state, indicators, max_q, extra=extra)

    def _context_vector(self) -> np.ndarray:
        window = self.current_window()
        pooled = []
        for st in window:
            if st is None or st.count == 0:
                pooled.append(np.zeros(self.online.hidden_size, dtype=self.online.dtype))
            else:
                e = np.maximum(st.rows @ self.online.embed.w.value.T + self.online.embed.b.value, 0.0)
                pooled.append(e.mean(axis=0).astype(self.online.dtype))
        h, c = self.online.lstm.zero_state(1)
        for x in pooled:
            h, c, _ = self.online.lstm.step(x[None, :], h, c)
        return h[0].copy()

    def record(self, env: CacheEnv, prev_state: SystemState, indicators: Sequence[int],
               outcome: SlotOutcome, new_state: SystemState, terminal: bool) -> float | None:
        if self._acted_slot != outcome.slot:
            # the driver overrode the action (request-free threshold mode);
            # still need Q pairs for the stored maximum
            self._last_pairs = self.online.forward_window(self.current_window())
        q_pairs = self._last_pairs
        assert q_pairs is not None
        prev_encoded = self._episode_states[-1]
        encoded_next = self.encode(new_state, env.ledger, env.slot)
        loss = None
        if not self.eval_mode:
            self.replay.append(StepRecord(
                encoded=prev_encoded,
                indicators=np.asarray(indicators, dtype=np.int8),
                reward=outcome.reward,
                terminal=terminal,
                next_encoded=encoded_next,
            ))
            self._insert_memory(prev_state, indicators, q_pairs, prev_encoded)
            self.global_slots += 1
            if (len(self.replay) >= self.batch_size
                    and self.global_slots % self.train_every == 0):
                refs = self.replay.sample_refs(self.rng_explore, self.batch_size)
                loss = emrqn_train_step(
                    self.online, self.target, self.replay, refs, self.window,
                    self.gamma, self.optimizer,
                    memory=self.memory, knn_k=self.knn_k,
                    scan_recent=self.scan_recent,
                    modify_targets=self.modify_targets,
                )
                self.train_steps += 1
                if self.train_steps % self.target_sync == 0:
                    self.target.copy_from(self.online)
        self._episode_states.append(encoded_next)
        if len(self._episode_states) > self.window:
            self._episode_states = self._episode_states[-self.window:]
        return loss

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.value for k, p in self.online.params().items()}

    def checkpoint_meta(self) -> dict:
        return {"policy": "emrqn", "hidden_size": self.online.hidden_size,
                "window": self.window, "features": NUM_FEATURES,
                "encoding_version": ENCODING_VERSION}

    def load_param_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.online.params()
        if set(arrays) != set(params):
            raise ValueError("checkpoint parameter names do not match this network")
        for key, p in params.items():
            if arrays[key].shape != p.value.shape:
                raise ValueError(
                    f"checkpoint shape {arrays[key].shape} for {key!r} does not match {p.value.shape}")
            p.value[...] = arrays[key]
        self.target.copy_from(self.online)


@dataclass
class EpisodeResult:
    """Per-step rewards and derived returns of one finished episode."""

    rewards: list[float]
    returns: np.ndarray
    average_return: float
    losses: list[float | None]
    epsilons: list[float | None]
    hit_numerators: list[int]
    hit_denominators: list[int]


def discounted_returns(rewards: Sequence[float], gamma: float) -> np.ndarray:
    """G_t = sum_{k>=0} gamma^k R_{t+k} over the finite episode, by backward
    recursion."""
    out = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def run_episode(
    env: CacheEnv,
    policy,
    batches: Callable[[int], RequestBatch],
    steps: int,
    gamma: float,
    initial_cache: Sequence[int],
) -> EpisodeResult:
    """One episode of the decision loop: reset, then per slot select an action
    (or apply the threshold rule on request-free slots when the environment is
    configured for it), step, and let the policy record the transition. Returns
    include the discounted return sequence and its mean."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    state = env.reset(initial_cache, batches(0))
    policy.begin_episode(env)
    rewards: list[float] = []
    losses: list[float | None] = []
    epsilons: list[float | None] = []
    hit_ns: list[int] = []
    hit_ds: list[int] = []
    for t in range(steps):
        epsilons.append(policy.epsilon)
        if state.requests.empty and env.empty_slot_mode == "threshold":
            indicators = env.default_indicators()
        else:
            indicators = policy.act(env)
        outcome, new_state = env.step(indicators, batches(t + 1))
        loss = policy.record(env, state, indicators, outcome, new_state,
                             terminal=(t == steps - 1))
        rewards.append(outcome.reward)
        losses.append(loss)
        hit_ns.append(outcome.hit_numerator)
        hit_ds.append(outcome.hit_denominator)
        state = new_state
    returns = discounted_returns(rewards, gamma)
    return EpisodeResult(
        rewards=rewards, returns=returns,
        average_return=float(returns.mean()),
        losses=losses, epsilons=epsilons,
        hit_numerators=hit_ns, hit_denominators=hit_ds,
    )
