"""DQN baseline agent: per-candidate feedforward Q pairs, epsilon-greedy
exploration, uniform experience replay, TD training with Huber loss.

The joint action space over the candidate list is exponential, so the network
factorizes: each candidate row gets an (evict, retain) Q pair, the joint value
of an action is the mean of the chosen-indicator Qs, and the greedy action is
the per-candidate argmax.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cache_env import CacheEnv, CumulativeLedger, SlotOutcome, SystemState
from .grad_core import Adam, Dense, Param, Relu, huber_loss

__all__ = [
    "NUM_FEATURES",
    "EncodedState",
    "encode_state",
    "QNetwork",
    "Transition",
    "StepRecord",
    "ReplayBuffer",
    "select_action",
    "epsilon_schedule",
    "dqn_train_step",
    "DqnAgent",
]

# Feature layout, version 1 (one row per update candidate, all values in [0, 1]):
#   0  cumulative request q scaled by 1/max(1, slot)
#   1  previous slot's normalized request share delta
#   2  in-cache flag
#   3  in-request flag
#   4  requesting users this slot / total users
#   5  staleness: slots since last request / horizon, clipped to 1 (1 if never)
NUM_FEATURES = 6
ENCODING_VERSION = 1


@dataclass(frozen=True)
class EncodedState:
    """Per-candidate feature rows for one system state.

    Rows are variable length (one per candidate); batching code pads to the
    batch maximum and masks the padding rows out of every aggregation.
    """

    candidates: np.ndarray  # int32 (C,)
    rows: np.ndarray        # float32 (C, NUM_FEATURES)

    @property
    def count(self) -> int:
        return len(self.candidates)


def encode_state(state: SystemState, ledger: CumulativeLedger, slot: int,
                 horizon: int, users: int) -> EncodedState:
    """Deterministic feature rows for the state's update candidates."""
    from .cache_env import candidate_set

    candidates = candidate_set(state.cache, state.requests.distinct)
    cached = set(state.cache)
    counts = state.requests.counts
    scale = 1.0 / max(1, slot)
    rows = np.zeros((len(candidates), NUM_FEATURES), dtype=np.float32)
    for i, o in enumerate(candidates):
        last = ledger.last_requested(o)
        stale = 1.0 if last < 0 else min(1.0, (slot - last) / horizon)
        rows[i, 0] = ledger.q(o) * scale
        rows[i, 1] = ledger.last_delta(o)
        rows[i, 2] = 1.0 if o in cached else 0.0
        rows[i, 3] = 1.0 if o in state.requests.distinct else 0.0
        rows[i, 4] = counts.get(o, 0) / users
        rows[i, 5] = stale
    return EncodedState(candidates=np.asarray(candidates, dtype=np.int32), rows=rows)


class QNetwork:
    """Feedforward trunk mapping each candidate row to an (evict, retain) pair."""

    def __init__(self, hidden_size: int, rng: np.random.Generator, dtype=np.float32):
        self.hidden_size = hidden_size
        self.l1 = Dense(NUM_FEATURES, hidden_size, rng, dtype)
        self.r1 = Relu()
        self.l2 = Dense(hidden_size, hidden_size, rng, dtype)
        self.r2 = Relu()
        self.head = Dense(hidden_size, 2, rng, dtype)

    def params(self) -> dict[str, Param]:
        out = {}
        for name, layer in (("l1", self.l1), ("l2", self.l2), ("head", self.head)):
            for key, p in layer.params().items():
                out[f"{name}.{key}"] = p
        return out

    def forward(self, rows: np.ndarray) -> np.ndarray:
        h = self.r1.forward(self.l1.forward(rows))
        h = self.r2.forward(self.l2.forward(h))
        return self.head.forward(h)

    def backward(self, dq: np.ndarray) -> np.ndarray:
        d = self.head.backward(dq)
        d = self.l2.backward(self.r2.backward(d))
        return self.l1.backward(self.r1.backward(d))

    def copy_from(self, other: "QNetwork") -> None:
        mine, theirs = self.params(), other.params()
        for key in mine:
            mine[key].value[...] = theirs[key].value


@dataclass(frozen=True)
class Transition:
    state: EncodedState
    indicators: np.ndarray
    reward: float
    next_state: EncodedState
    terminal: bool


@dataclass(frozen=True)
class StepRecord:
    encoded: EncodedState
    indicators: np.ndarray  # int8 (C,), the executed action
    reward: float
    terminal: bool
    next_encoded: EncodedState  # shares the following record's encoded state


class ReplayBuffer:
    """Uniform ring buffer of step references into per-episode state sequences.

    Keeping each episode's encoded states once (plus the state after the final
    step) lets both single transitions and length-W windows be reconstructed
    without duplicating arrays. When the ring overflows, the oldest reference
    drops out and fully expired episodes are freed.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._ring: list[tuple[int, int] | None] = [None] * capacity
        self._start = 0
        self._count = 0
        self._episodes: list[list[StepRecord] | None] = []
        self._pruned_upto = 0

    def __len__(self) -> int:
        return self._count

    def begin_episode(self) -> None:
        self._episodes.append([])

    def append(self, record: StepRecord) -> None:
        if not self._episodes:
            raise RuntimeError("append outside an episode")
        ep = len(self._episodes) - 1
        steps = self._episodes[ep]
        steps.append(record)
        ref = (ep, len(steps) - 1)
        if self._count < self.capacity:
            self._ring[(self._start + self._count) % self.capacity] = ref
            self._count += 1
        else:
            self._ring[self._start] = ref
            self._start = (self._start + 1) % self.capacity
            self._prune()

    def _prune(self) -> None:
        oldest = self._ring[self._start]
        assert oldest is not None
        for idx in range(self._pruned_upto, oldest[0]):
            self._episodes[idx] = None
        self._pruned_upto = max(self._pruned_upto, oldest[0])

    def sample_refs(self, rng: np.random.Generator, n: int) -> list[tuple[int, int]]:
        if self._count == 0:
            raise ValueError("cannot sample from an empty buffer")
        picks = rng.integers(0, self._count, size=n)
        return [self._ring[(self._start + int(i)) % self.capacity] for i in picks]

    def record(self, ref: tuple[int, int]) -> StepRecord:
        ep, t = ref
        episode = self._episodes[ep]
        assert episode is not None
        return episode[t]

    def state_at(self, ep: int, t: int) -> EncodedState:
        """State before step t; t == len(episode) is the state after the newest step."""
        episode = self._episodes[ep]
        assert episode is not None
        if t < len(episode):
            return episode[t].encoded
        if t == len(episode) and episode:
            return episode[-1].next_encoded
        raise IndexError(f"step {t} out of range for episode {ep}")

    def window(self, ep: int, t: int, width: int) -> list[EncodedState | None]:
        """States t-width+1 .. t of the episode, None-padded before step 0."""
        return [
            self.state_at(ep, i) if i >= 0 else None
            for i in range(t - width + 1, t + 1)
        ]

    def transition(self, ref: tuple[int, int]) -> Transition:
        rec = self.record(ref)
        return Transition(state=rec.encoded, indicators=rec.indicators,
                          reward=rec.reward, next_state=rec.next_encoded,
                          terminal=rec.terminal)


def select_action(q_pairs: np.ndarray, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """Greedy per-candidate argmax with probability 1-epsilon, otherwise each
    indicator flips a fair coin. Ties retain."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    n = len(q_pairs)
    if epsilon > 0.0 and rng.random() < epsilon:
        return rng.integers(0, 2, size=n).astype(np.int8)
    return (q_pairs[:, 1] >= q_pairs[:, 0]).astype(np.int8)


def epsilon_schedule(step: int, tau: float = 2000.0, floor: float = 0.01) -> float:
    """Exponential decay from 1 toward the floor."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    return max(floor, float(np.exp(-step / tau)))


def _concat_states(states: Sequence[EncodedState]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows = np.concatenate([s.rows for s in states], axis=0)
    counts = np.array([s.count for s in states])
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return rows, counts, starts


def joint_q(q_pairs: np.ndarray, indicators: np.ndarray) -> float:
    """Joint action value: mean over candidates of the chosen-indicator Q."""
    return float(q_pairs[np.arange(len(q_pairs)), indicators].mean())


def dqn_train_step(
    online: QNetwork,
    target: QNetwork,
    transitions: Sequence[Transition],
    gamma: float,
    optimizer: Adam,
) -> float:
    """One TD step on a batch: y = R + gamma * (mean of per-candidate maxima at
    the next state), broadcast to every candidate; Huber loss averaged over all
    valid candidates in the batch."""
    next_rows, next_counts, next_starts = _concat_states([t.next_state for t in transitions])
    next_max = target.forward(next_rows).max(axis=1)
    next_value = np.add.reduceat(next_max, next_starts) / next_counts
    ys = np.array([
        t.reward + (0.0 if t.terminal else gamma * float(v))
        for t, v in zip(transitions, next_value)
    ])

    rows, counts, _ = _concat_states([t.state for t in transitions])
    chosen = np.concatenate([t.indicators for t in transitions]).astype(np.int64)
    q = online.forward(rows)
    idx = np.arange(len(rows))
    q_sel = q[idx, chosen]
    y_rows = np.repeat(ys, counts)
    losses, grads = huber_loss(q_sel.astype(np.float64), y_rows)
    loss = float(losses.mean())
    dq = np.zeros_like(q)
    dq[idx, chosen] = (grads / len(rows)).astype(q.dtype)
    optimizer.zero_grad()
    online.backward(dq)
    optimizer.step()
    return loss


class DqnAgent:
    """Replay-trained factorized DQN following the shared policy protocol."""

    trainable = True

    def __init__(
        self,
        capacity: int,
        users: int,
        horizon: int,
        hidden_size: int = 128,
        learning_rate: float = 0.0002,
        weight_decay: float = 1e-5,
        gamma: float = 0.999,
        batch_size: int = 8,
        replay_capacity: int = 100_000,
        train_every: int = 4,
        target_sync: int = 200,
        epsilon_tau: float = 2000.0,
        epsilon_floor: float = 0.01,
        rng_init: np.random.Generator | None = None,
        rng_explore: np.random.Generator | None = None,
    ):
        rng_init = rng_init or np.random.default_rng(0)
        self.capacity = capacity
        self.users = users
        self.horizon = horizon
        self.gamma = gamma
        self.batch_size = batch_size
        self.train_every = train_every
        self.target_sync = target_sync
        self.epsilon_tau = epsilon_tau
        self.epsilon_floor = epsilon_floor
        self.online = QNetwork(hidden_size, rng_init)
        self.target = QNetwork(hidden_size, rng_init)
        self.target.copy_from(self.online)
        self.optimizer = Adam(self.online.params(), learning_rate, weight_decay)
        self.replay = ReplayBuffer(replay_capacity)
        self.rng_explore = rng_explore or np.random.default_rng(1)
        self.eval_mode = False
        self.global_slots = 0
        self.train_steps = 0
        self._encoded: EncodedState | None = None

    @property
    def epsilon(self) -> float:
        if self.eval_mode:
            return 0.0
        return epsilon_schedule(self.global_slots, self.epsilon_tau, self.epsilon_floor)

    def set_eval(self, eval_mode: bool) -> None:
        self.eval_mode = eval_mode

    def encode(self, state: SystemState, ledger: CumulativeLedger, slot: int) -> EncodedState:
        return encode_state(state, ledger, slot, self.horizon, self.users)

    def begin_episode(self, env: CacheEnv) -> None:
        if not self.eval_mode:
            self.replay.begin_episode()
        self._encoded = self.encode(env.state, env.ledger, env.slot)

    def q_pairs(self, encoded: EncodedState) -> np.ndarray:
        return self.online.forward(encoded.rows)

    def act(self, env: CacheEnv) -> list[int]:
        assert self._encoded is not None
        pairs = self.q_pairs(self._encoded)
        return select_action(pairs, self.epsilon, self.rng_explore).tolist()

    def record(self, env: CacheEnv, prev_state: SystemState, indicators: Sequence[int],
               outcome: SlotOutcome, new_state: SystemState, terminal: bool) -> float | None:
        encoded_next = self.encode(new_state, env.ledger, env.slot)
        loss = None
        if not self.eval_mode:
            assert self._encoded is not None
            self.replay.append(StepRecord(
                encoded=self._encoded,
                indicators=np.asarray(indicators, dtype=np.int8),
                reward=outcome.reward,
                terminal=terminal,
                next_encoded=encoded_next,
            ))
            self.global_slots += 1
            if (len(self.replay) >= self.batch_size
                    and self.global_slots % self.train_every == 0):
                refs = self.replay.sample_refs(self.rng_explore, self.batch_size)
                batch = [self.replay.transition(r) for r in refs]
                loss = dqn_train_step(self.online, self.target, batch,
                                      self.gamma, self.optimizer)
                self.train_steps += 1
                if self.train_steps % self.target_sync == 0:
                    self.target.copy_from(self.online)
        self._encoded = encoded_next
        return loss

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.value for k, p in self.online.params().items()}

    def checkpoint_meta(self) -> dict:
        return {"policy": "dqn", "hidden_size": self.online.hidden_size,
                "features": NUM_FEATURES, "encoding_version": ENCODING_VERSION}

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
