import numpy as np
import pytest

from edgecache.agent_dqn import EncodedState
from edgecache.agent_emrqn import (
    EmrqnAgent,
    ExternalMemory,
    ExternalMemoryEntry,
    RecurrentQNetwork,
    _modified_decisions,
    discounted_returns,
    emrqn_select_action,
    memory_insert,
    modify_q,
    run_episode,
    similarity,
)
from edgecache.cache_env import CacheEnv, CumulativeLedger, SystemState
from edgecache.workload import RequestBatch, build_catalog, sample_slot_requests
from helpers import finite_diff_grad, max_rel_err


def batch_of(slot, *user_sets):
    return RequestBatch.from_user_sets(slot, list(user_sets))


def encoded_for(cache, requested, catalog_size=64):
    """Hand-built encoding: only the id/in-cache/in-request columns matter for
    the memory machinery."""
    cands = list(cache) + sorted(set(requested) - set(cache))
    rows = np.zeros((len(cands), 6), dtype=np.float32)
    for i, o in enumerate(cands):
        rows[i, 2] = 1.0 if o in cache else 0.0
        rows[i, 3] = 1.0 if o in requested else 0.0
    return EncodedState(candidates=np.array(cands, dtype=np.int32), rows=rows)


class RetainAll:
    trainable = False
    epsilon = None

    def begin_episode(self, env):
        pass

    def act(self, env):
        return [1] * len(env.candidates())

    def record(self, env, prev_state, indicators, outcome, new_state, terminal):
        return None


class TestSimilarity:
    def test_identical_indicators_give_one(self):
        entry = ExternalMemoryEntry({1: 1, 2: 0}, {5: 1}, 3.0)
        assert similarity({1: 1, 2: 0}, {5: 1}, entry) == 1.0

    def test_one_differing_indicator(self):
        entry = ExternalMemoryEntry({1: 1, 2: 0}, {}, 0.0)
        assert similarity({1: 0, 2: 0}, {}, entry) == 0.5

    def test_two_differing_indicators(self):
        entry = ExternalMemoryEntry({1: 1}, {5: 1}, 0.0)
        sim = similarity({1: 0}, {5: 0}, entry)
        assert sim == pytest.approx(1.0 / (1.0 + np.sqrt(2.0)))

    def test_non_overlapping_contents_ignored(self):
        entry = ExternalMemoryEntry({1: 1}, {9: 0}, 0.0)
        assert similarity({2: 0}, {8: 1}, entry) == 1.0  # empty overlap: d = 0

    def test_range_property(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            ids = rng.choice(20, size=6, replace=False) + 1
            entry = ExternalMemoryEntry(
                {int(o): int(rng.integers(0, 2)) for o in ids[:3]},
                {int(o): int(rng.integers(0, 2)) for o in ids[3:]}, 0.0)
            cur_c = {int(o): int(rng.integers(0, 2)) for o in rng.choice(20, 4, replace=False) + 1}
            cur_r = {int(o): int(rng.integers(0, 2)) for o in rng.choice(20, 4, replace=False) + 1}
            sim = similarity(cur_c, cur_r, entry)
            assert 0.0 < sim <= 1.0


class TestModifyQ:
    def test_single_neighbor_returns_stored_q(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            q = float(rng.uniform(-5, 5))
            sim = float(rng.uniform(1e-6, 1.0))
            q_ex = float(rng.uniform(-5, 5))
            got = modify_q(q, [(sim, q_ex)])
            assert abs(got - q_ex) <= 1e-12 * max(1.0, abs(q_ex))

    def test_empty_neighborhood_identity(self):
        assert modify_q(1.23, []) == 1.23

    def test_hand_computed_two_neighbor_case(self):
        got = modify_q(1.0, [(1.0, 2.0), (0.5, 0.0)])
        assert abs(got - 4.0 / 3.0) <= 1e-12

    def test_accepts_entry_objects(self):
        entry = ExternalMemoryEntry({}, {}, 7.5)
        assert modify_q(0.0, [(0.4, entry)]) == pytest.approx(7.5)


class TestExternalMemory:
    def test_insert_grows_to_one(self):
        mem = ExternalMemory(10, catalog_size=8)
        mem.insert(np.array([1, 2]), np.array([1, 0]), np.array([3]), np.array([1]), 2.5)
        assert len(mem) == 1
        entry = mem.entry(0)
        assert entry.cached_indicators == {1: 1, 2: 0}
        assert entry.request_indicators == {3: 1}
        assert entry.stored_max_q == 2.5

    def test_capacity_80000_discards_first(self):
        mem = ExternalMemory(80_000, catalog_size=8)
        ids = np.array([1])
        bits = np.array([1])
        for i in range(80_001):
            mem.insert(ids, bits, ids, bits, float(i))
        assert len(mem) == 80_000
        assert mem.entry(0).stored_max_q == 1.0  # entry 0 is gone
        assert mem.entry(79_999).stored_max_q == 80_000.0

    def test_fifo_order(self):
        mem = ExternalMemory(3, catalog_size=4)
        for i in range(5):
            mem.insert(np.array([1]), np.array([i % 2]), np.array([]), np.array([]), float(i))
        assert [mem.entry(i).stored_max_q for i in range(3)] == [2.0, 3.0, 4.0]

    def test_memory_insert_maps_state_indicators(self):
        led = CumulativeLedger(10)
        state = SystemState(cache=(1, 2, 3), cache_q=led.q_values((1, 2, 3)),
                            requests=batch_of(0, {3, 5}))
        mem = ExternalMemory(4, catalog_size=10)
        memory_insert(mem, state, [0, 0, 1, 1], max_q=1.5)
        entry = mem.entry(0)
        assert entry.cached_indicators == {1: 0, 2: 0, 3: 1}
        assert entry.request_indicators == {3: 1, 5: 1}
        assert entry.stored_max_q == 1.5


class TestScanAgainstBruteForce:
    def _oracle_decisions(self, memory, encoded, q_pairs, k):
        """Pure-python re-derivation of the per-candidate hypothesis
        modification, built from the scalar similarity/modify_q operations."""
        base = (q_pairs[:, 1] >= q_pairs[:, 0]).astype(int)
        cache_ids = [int(o) for o, row in zip(encoded.candidates, encoded.rows) if row[2] > 0.5]
        request_ids = [int(o) for o, row in zip(encoded.candidates, encoded.rows) if row[3] > 0.5]
        count = len(q_pairs)
        chosen = q_pairs[np.arange(count), base]
        base_joint = float(chosen.mean())

        def hypothesis_value(j, bit):
            bits = base.copy()
            bits[j] = bit
            joint = base_joint + (q_pairs[j, bit] - q_pairs[j, base[j]]) / count
            pos = {int(o): i for i, o in enumerate(encoded.candidates)}
            cached_ind = {o: int(bits[pos[o]]) for o in cache_ids}
            request_ind = {o: int(bits[pos[o]]) for o in request_ids}
            neighbors = []
            for i in range(len(memory)):
                entry = memory.entry(i)
                overlap = (set(cached_ind) & set(entry.cached_indicators)) \
                    | (set(request_ind) & set(entry.request_indicators))
                if not overlap:
                    continue
                neighbors.append((similarity(cached_ind, request_ind, entry),
                                  entry.stored_max_q))
            neighbors.sort(key=lambda p: -p[0])
            return modify_q(joint, neighbors[:k])

        out = []
        for j in range(count):
            retain = hypothesis_value(j, 1)
            evict = hypothesis_value(j, 0)
            out.append(1 if retain >= evict else 0)
        return out

    def test_vectorized_matches_oracle_all_neighbors(self):
        # k >= live entries, so top-k ties cannot make the comparison ambiguous
        rng = np.random.default_rng(33)
        net = RecurrentQNetwork(8, np.random.default_rng(3))
        for trial in range(20):
            catalog = 24
            cache = sorted(rng.choice(catalog, size=4, replace=False) + 1)
            requested = set((rng.choice(catalog, size=3, replace=False) + 1).tolist())
            encoded = encoded_for(cache, requested, catalog)
            mem = ExternalMemory(16, catalog_size=catalog)
            for _ in range(int(rng.integers(1, 9))):
                m_cache = rng.choice(catalog, size=4, replace=False) + 1
                m_req = rng.choice(catalog, size=2, replace=False) + 1
                mem.insert(m_cache, rng.integers(0, 2, 4), m_req,
                           rng.integers(0, 2, 2), float(rng.uniform(-3, 3)))
            q_pairs = rng.standard_normal((encoded.count, 2)).astype(np.float32)
            got = _modified_decisions(q_pairs, encoded, mem, net,
                                      knn_k=32, scan_recent=0, qex_mode="stored")
            want = self._oracle_decisions(mem, encoded, q_pairs, k=32)
            assert got.tolist() == want, f"trial {trial}"

    def test_top_k_selection_with_distinct_distances(self):
        # entries engineered to unique distances; k=2 must pick the two nearest
        catalog = 16
        cache = [1, 2, 3, 4]
        encoded = encoded_for(cache, set(), catalog)
        q_pairs = np.zeros((4, 2), dtype=np.float32)
        q_pairs[:, 1] = 0.01  # base action: retain everything
        mem = ExternalMemory(8, catalog_size=catalog)
        ids = np.array(cache)
        # distances vs the all-retain action: 0, 1, 2, 3 differing bits
        for flips, q_ex in [(0, 1.0), (1, 2.0), (2, 4.0), (3, 8.0)]:
            bits = np.ones(4, dtype=np.int8)
            bits[:flips] = 0
            mem.insert(ids, bits, np.array([]), np.array([]), q_ex)
        net = RecurrentQNetwork(8, np.random.default_rng(0))
        got = _modified_decisions(q_pairs, encoded, mem, net,
                                  knn_k=2, scan_recent=0, qex_mode="stored")
        oracle = self._oracle_decisions(mem, encoded, q_pairs, k=2)
        assert got.tolist() == oracle


class TestSelectAction:
    def _window(self, encoded, width=3):
        return [None] * (width - 1) + [encoded]

    def test_empty_memory_reduces_to_argmax(self):
        rng = np.random.default_rng(2)
        net = RecurrentQNetwork(8, np.random.default_rng(7))
        encoded = encoded_for([1, 2, 3], {5}, 16)
        mem = ExternalMemory(8, catalog_size=16)
        ind = emrqn_select_action(net, self._window(encoded), mem, 0.0, rng)
        pairs = net.forward_window(self._window(encoded))
        assert ind.tolist() == (pairs[:, 1] >= pairs[:, 0]).astype(int).tolist()

    def test_epsilon_one_uniform_random(self):
        net = RecurrentQNetwork(8, np.random.default_rng(1))
        encoded = encoded_for([1, 2, 3, 4], set(), 16)
        rng = np.random.default_rng(5)
        totals = np.zeros(4)
        trials = 4000
        for _ in range(trials):
            totals += emrqn_select_action(net, self._window(encoded), None, 1.0, rng)
        assert np.all(np.abs(totals / trials - 0.5) < 0.05)

    def test_extreme_stored_q_flips_near_tied_candidate(self):
        catalog = 8
        encoded = encoded_for([5], set(), catalog)
        q_pairs = np.array([[0.0, 1e-4]], dtype=np.float32)  # near-tied, retain wins raw
        mem = ExternalMemory(4, catalog_size=catalog)
        # one entry matching the evict hypothesis exactly, one the retain
        # hypothesis; the evict-aligned entry carries a much higher stored Q
        mem.insert(np.array([5]), np.array([0]), np.array([]), np.array([]), 10.0)
        mem.insert(np.array([5]), np.array([1]), np.array([]), np.array([]), 0.0)
        net = RecurrentQNetwork(8, np.random.default_rng(0))
        base = (q_pairs[:, 1] >= q_pairs[:, 0]).astype(int)
        assert base.tolist() == [1]
        got = _modified_decisions(q_pairs, encoded, mem, net,
                                  knn_k=8, scan_recent=0, qex_mode="stored")
        assert got.tolist() == [0]


class TestRecurrentNetworkGradients:
    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        net = RecurrentQNetwork(5, np.random.default_rng(4), dtype=np.float64)
        windows = []
        for _ in range(2):
            window = [None]
            for _ in range(2):
                n = int(rng.integers(1, 4))
                window.append(EncodedState(
                    candidates=np.arange(1, n + 1, dtype=np.int32),
                    rows=rng.random((n, 6))))
            windows.append(window)
        proj = rng.standard_normal((sum(w[-1].count for w in windows), 2))

        def loss():
            return float((net.forward_batch(windows) * proj).sum())

        for p in net.params().values():
            p.zero_grad()
        net.forward_batch(windows)
        net.backward_batch(proj)
        for key, p in net.params().items():
            numeric = finite_diff_grad(loss, p.value)
            assert max_rel_err(p.grad, numeric) < 1e-4, key


class TestDiscountedReturns:
    def test_two_step_closed_form(self):
        G = discounted_returns([1.0, 1.0], 0.5)
        assert G.tolist() == [1.5, 1.0]

    def test_gamma_zero_returns_rewards(self):
        r = [0.3, -0.2, 0.9]
        assert discounted_returns(r, 0.0).tolist() == r

    def test_matches_direct_summation(self):
        rng = np.random.default_rng(21)
        for _ in range(20):
            rewards = rng.standard_normal(int(rng.integers(1, 60)))
            gamma = float(rng.uniform(0.0, 1.0))
            got = discounted_returns(rewards.tolist(), gamma)
            direct = np.array([
                sum(gamma ** k * rewards[t + k] for k in range(len(rewards) - t))
                for t in range(len(rewards))
            ])
            assert np.abs(got - direct).max() <= 1e-10


class TestRunEpisode:
    def test_unit_reward_episode(self):
        # catalog of one content, one user who always requests it: every slot
        # is a retained hit with reward exactly 1
        env = CacheEnv(catalog_size=1, capacity=1)
        cat = build_catalog(1, 0.0)
        rng = np.random.default_rng(0)

        def batches(t):
            return sample_slot_requests(cat, 1, 1, 50.0, rng, slot=t)

        result = run_episode(env, RetainAll(), batches, steps=2, gamma=0.5,
                             initial_cache=[1])
        assert result.rewards == [1.0, 1.0]
        assert result.returns.tolist() == [1.5, 1.0]
        assert result.average_return == 1.25

    def test_gamma_zero_average_is_mean_reward(self):
        env = CacheEnv(catalog_size=1, capacity=1)
        cat = build_catalog(1, 0.0)
        rng = np.random.default_rng(0)

        def batches(t):
            return sample_slot_requests(cat, 1, 1, 50.0, rng, slot=t)

        result = run_episode(env, RetainAll(), batches, steps=5, gamma=0.0,
                             initial_cache=[1])
        assert result.average_return == pytest.approx(np.mean(result.rewards))

    def test_all_zero_rewards_zero_average(self):
        env = CacheEnv(catalog_size=4, capacity=2)

        def batches(t):
            return batch_of(t)  # no requests ever

        result = run_episode(env, RetainAll(), batches, steps=6, gamma=0.9,
                             initial_cache=[1, 2])
        assert result.rewards == [0.0] * 6
        assert result.average_return == 0.0

    def test_steps_must_be_positive(self):
        env = CacheEnv(4, 2)
        with pytest.raises(ValueError):
            run_episode(env, RetainAll(), lambda t: batch_of(t), 0, 0.9, [1, 2])


class TestEmrqnAgentLoop:
    def _agent(self, seed, **kw):
        defaults = dict(catalog_size=20, capacity=4, users=3, horizon=40,
                        hidden_size=10, window=3, replay_capacity=200,
                        memory_capacity=128, knn_k=8, train_every=4,
                        target_sync=10, epsilon_tau=20.0,
                        rng_init=np.random.default_rng([seed, 0]),
                        rng_explore=np.random.default_rng([seed, 1]))
        defaults.update(kw)
        return EmrqnAgent(**defaults)

    def _episode(self, agent, seed, steps=40):
        cat = build_catalog(20, 1.0)
        env = CacheEnv(20, 4)
        req = np.random.default_rng([seed, 2])

        def batches(t):
            return sample_slot_requests(cat, 3, 4, 1.0, req, slot=t)

        return run_episode(env, agent, batches, steps, 0.99, [1, 2, 3, 4])

    def test_trains_inserts_and_is_deterministic(self):
        runs = []
        for _ in range(2):
            agent = self._agent(7)
            r1 = self._episode(agent, 7)
            r2 = self._episode(agent, 8)
            runs.append((r1.rewards, r2.rewards,
                         {k: v.copy() for k, v in agent.param_arrays().items()},
                         len(agent.memory)))
        assert runs[0][0] == runs[1][0]
        assert runs[0][1] == runs[1][1]
        assert runs[0][3] == runs[1][3] == 80  # one insert per training slot
        for k in runs[0][2]:
            assert np.array_equal(runs[0][2][k], runs[1][2][k]), k

    def test_eval_mode_no_memory_writes_no_learning(self):
        agent = self._agent(9)
        self._episode(agent, 9)
        before_mem = len(agent.memory)
        before = {k: v.copy() for k, v in agent.param_arrays().items()}
        agent.set_eval(True)
        result = self._episode(agent, 10)
        assert len(agent.memory) == before_mem
        assert all(l is None for l in result.losses)
        for k, v in agent.param_arrays().items():
            assert np.array_equal(before[k], v)

    def test_reeval_mode_runs(self):
        agent = self._agent(11, qex_mode="reeval", memory_capacity=32)
        result = self._episode(agent, 11)
        assert np.isfinite(result.rewards).all()
        assert agent.memory.extra(0) is not None

    def test_modify_targets_mode_runs(self):
        agent = self._agent(12, modify_targets=True)
        result = self._episode(agent, 12)
        assert any(l is not None and np.isfinite(l) for l in result.losses)
