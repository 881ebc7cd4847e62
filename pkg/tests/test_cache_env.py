from fractions import Fraction

import numpy as np
import pytest

from edgecache.cache_env import (
    CacheEnv,
    CumulativeLedger,
    apply_update,
    candidate_set,
    compute_reward,
    serve_requests,
    threshold_rule,
    update_ledger,
)
from edgecache.workload import RequestBatch, build_catalog, sample_slot_requests


def batch_of(slot, *user_sets):
    return RequestBatch.from_user_sets(slot, list(user_sets))


def reward_oracle(d_star, d_plus, d_minus, counts, eta, lam):
    """Exact-arithmetic re-statement of the slot reward, independent of the
    implementation: Fractions, plain loops, union handled by set algebra."""
    total = sum(counts.values())
    if total == 0:
        return 0.0
    result = Fraction(0)
    eta_f = Fraction(eta)
    lam_f = Fraction(lam)
    for o in d_star:
        result += Fraction(counts.get(o, 0), total)
    for o in d_plus:
        result += eta_f * Fraction(counts.get(o, 0), total)
    for o in set(d_plus) | set(d_minus):
        result -= lam_f * Fraction(counts.get(o, 0), total)
    return float(result)


class TestLedger:
    def test_single_request_full_delta(self):
        led = CumulativeLedger(10)
        led.update(batch_of(0, {7}))
        assert led.last_delta(7) == 1.0
        assert led.q(7) == 1.0
        assert led.raw_count(7) == 1

    def test_normalization(self):
        led = CumulativeLedger(10)
        led.update(batch_of(0, {1, 2}, {1, 2}, {1}, {1}))  # counts a=4? build explicit
        # counts: 1 -> 4, 2 -> 2; rebuild with clean numbers instead
        led2 = CumulativeLedger(10)
        led2.update(batch_of(0, {1}, {1}, {1}, {1, 2}))  # counts {1:4, 2:1}? no: 1 in 4 sets, 2 in 1
        assert led2.last_delta(1) == 0.8
        assert led2.last_delta(2) == 0.2

    def test_three_to_one_split(self):
        led = CumulativeLedger(5)
        led.update(batch_of(0, {1}, {1}, {1, 2}))  # counts {1:3, 2:1}
        assert led.last_delta(1) == 0.75
        assert led.last_delta(2) == 0.25

    def test_empty_slot_leaves_ledger_unchanged(self):
        led = CumulativeLedger(5)
        led.update(batch_of(0, {1, 2}))
        q_before = led.q_array()
        led.update(batch_of(1))
        assert np.array_equal(led.q_array(), q_before)
        assert led.last_delta(1) == 0.0

    def test_delta_sums_to_one_and_q_monotone(self):
        cat = build_catalog(30, 1.0)
        rng = np.random.default_rng(5)
        led = CumulativeLedger(30)
        prev_q = led.q_array()
        for t in range(300):
            batch = sample_slot_requests(cat, 5, 6, 1.0, rng, slot=t)
            update_ledger(led, batch)
            if not batch.empty:
                s = sum(led.last_delta(o) for o in batch.distinct)
                assert abs(s - 1.0) <= 1e-9
            q = led.q_array()
            assert (q >= prev_q - 1e-15).all()
            prev_q = q


class TestServeRequests:
    def test_toy_example_split(self):
        hits, misses = serve_requests([1, 2, 3], batch_of(0, {3, 5}))
        assert hits == frozenset({3})
        assert misses == frozenset({5})

    def test_no_requests(self):
        hits, misses = serve_requests([1, 2, 3], batch_of(0))
        assert hits == frozenset() and misses == frozenset()

    def test_all_hits(self):
        hits, misses = serve_requests([1, 2, 3], batch_of(0, {1, 3}))
        assert hits == frozenset({1, 3})
        assert misses == frozenset()


class TestCandidateSet:
    def test_partial_overlap(self):
        assert candidate_set([1, 2, 3], {3, 5}) == [1, 2, 3, 5]

    def test_empty_requests(self):
        assert candidate_set([1, 2, 3], set()) == [1, 2, 3]

    def test_requests_subset_of_cache(self):
        assert candidate_set([1, 2, 3], {2}) == [1, 2, 3]

    def test_disjoint_requests_extend(self):
        assert candidate_set([1, 2, 3], {4}) == [1, 2, 3, 4]

    def test_new_requests_sorted_after_cache(self):
        assert candidate_set([9, 4, 6], {11, 2, 9}) == [9, 4, 6, 2, 11]

    def test_every_fetched_content_is_a_candidate(self):
        # brute-force rollout: misses must always be update candidates
        cat = build_catalog(25, 1.0)
        rng = np.random.default_rng(11)
        env = CacheEnv(25, 5)
        env.reset([1, 2, 3, 4, 5], sample_slot_requests(cat, 4, 5, 1.0, rng, slot=0))
        for t in range(200):
            cands = env.candidates()
            state = env.state
            misses = state.requests.distinct - set(state.cache)
            assert misses <= set(cands)
            assert len(set(cands)) == len(cands)
            env.step([1] * len(cands), sample_slot_requests(cat, 4, 5, 1.0, rng, slot=t + 1))


class TestApplyUpdate:
    def test_toy_example_refill(self):
        led = CumulativeLedger(6)
        # one prior slot: counts {4:3, 6:1} gives q(4)=0.75 the largest outside the retained set
        led.update(batch_of(0, {4}, {4}, {4, 6}))
        new = apply_update([1, 2, 3, 5], [0, 0, 1, 1], led, catalog_size=6, capacity=3)
        assert set(new) == {3, 4, 5}

    def test_retain_everything_is_identity(self):
        led = CumulativeLedger(8)
        new = apply_update([2, 5, 7], [1, 1, 1], led, 8, 3)
        assert set(new) == {2, 5, 7}

    def test_all_evicted_equal_q_takes_lowest_ids(self):
        led = CumulativeLedger(9)
        new = apply_update([7, 8, 9], [0, 0, 0], led, 9, 3)
        assert set(new) == {1, 2, 3}

    def test_over_retention_trims_by_q_then_id(self):
        led = CumulativeLedger(10)
        led.update(batch_of(0, {2}, {2}, {3}))  # q: 2 -> 2/3, 3 -> 1/3
        new = apply_update([1, 2, 3], [1, 1, 1], led, 10, 2)
        assert set(new) == {2, 3}  # content 1 has q=0; trimmed

    def test_over_retention_tie_prefers_lower_id(self):
        led = CumulativeLedger(10)
        new = apply_update([4, 9, 2], [1, 1, 1], led, 10, 2)
        assert set(new) == {2, 4}

    def test_capacity_exceeding_catalog_rejected(self):
        led = CumulativeLedger(3)
        with pytest.raises(ValueError):
            apply_update([1, 2, 3], [1, 1, 1], led, catalog_size=3, capacity=4)


class TestThresholdRule:
    def test_mean_boundary_retained(self):
        assert threshold_rule([0.2, 0.4, 0.6]) == [0, 1, 1]

    def test_all_equal_all_retained(self):
        assert threshold_rule([0.7, 0.7, 0.7, 0.7]) == [1, 1, 1, 1]

    def test_zero_one(self):
        assert threshold_rule([0.0, 1.0]) == [0, 1]

    def test_single_entry_retained(self):
        assert threshold_rule([0.3]) == [1]


class TestComputeReward:
    def test_single_retained_requested(self):
        counts = {4: 1}
        assert compute_reward({4}, set(), set(), counts, 0.5, 0.3) == 1.0

    def test_single_newly_cached_requested(self):
        counts = {4: 1}
        r = compute_reward(set(), {4}, set(), counts, eta=0.5, cost_weight=0.3)
        assert abs(r - 0.2) <= 1e-15

    def test_single_evicted_then_requested(self):
        counts = {4: 1}
        r = compute_reward(set(), set(), {4}, counts, eta=0.5, cost_weight=0.3)
        assert abs(r + 0.3) <= 1e-15

    def test_no_requests_zero_reward(self):
        assert compute_reward({1}, {2}, {3}, {}, 0.5, 0.3) == 0.0

    def test_matches_exact_oracle_on_random_scenarios(self):
        rng = np.random.default_rng(17)
        for _ in range(100):
            contents = list(range(1, 21))
            rng.shuffle(contents)
            d_star = set(contents[:5])
            d_plus = set(contents[5:9])
            d_minus = set(contents[9:12]) | set(contents[5:7])  # overlaps d_plus
            requested = rng.choice(contents, size=8, replace=False)
            counts = {int(o): int(rng.integers(1, 5)) for o in requested}
            eta = float(rng.uniform(0.05, 0.95))
            lam = float(rng.uniform(0.05, 0.95))
            got = compute_reward(d_star, d_plus, d_minus, counts, eta, lam)
            want = reward_oracle(d_star, d_plus, d_minus, counts, eta, lam)
            assert abs(got - want) <= 1e-12


class TestEnvStep:
    def _fig2_env(self):
        env = CacheEnv(catalog_size=6, capacity=3)
        env.reset([1, 2, 3], batch_of(0, {4}, {4}, {4, 6}))
        env.step([1, 1, 1, 1], batch_of(1, {3}, {5}))  # builds q(4)=0.75, q(6)=0.25
        return env

    def test_toy_example_full_step(self):
        env = CacheEnv(catalog_size=6, capacity=3)
        # slot 0 builds the request history that makes content 4 the refill pick
        env.reset([1, 2, 3], batch_of(0, {4}, {4}, {4, 6}))
        outcome0, state1 = env.step([1, 1, 1, 1, 1], batch_of(1, {3}, {5}))
        assert set(state1.cache) == {1, 2, 3}
        assert env.candidates() == [1, 2, 3, 5]
        outcome, state2 = env.step([0, 0, 1, 1], batch_of(2))
        assert set(state2.cache) == {3, 4, 5}
        assert outcome.hits == frozenset({3})
        assert outcome.misses == frozenset({5})

    def test_no_requests_retain_all_unchanged_zero_reward(self):
        env = CacheEnv(catalog_size=6, capacity=3)
        env.reset([1, 2, 3], batch_of(0))
        outcome, state = env.step([1, 1, 1], batch_of(1))
        assert set(state.cache) == {1, 2, 3}
        assert outcome.reward == 0.0
        assert outcome.d_plus == frozenset() and outcome.d_minus == frozenset()

    def test_indicator_length_mismatch_raises(self):
        env = CacheEnv(catalog_size=6, capacity=3)
        env.reset([1, 2, 3], batch_of(0, {5}))
        with pytest.raises(ValueError, match="indicators"):
            env.step([1, 1, 1], batch_of(1))

    def test_hit_rate_matches_brute_force_recount(self):
        cat = build_catalog(40, 1.1)
        rng = np.random.default_rng(23)
        policy_rng = np.random.default_rng(24)
        env = CacheEnv(40, 8)
        batch = sample_slot_requests(cat, 5, 8, 1.0, rng, slot=0)
        env.reset(list(range(1, 9)), batch)
        snapshots = []
        num = den = 0
        for t in range(1000):
            state = env.state
            snapshots.append((set(state.cache), dict(state.requests.counts)))
            cands = env.candidates()
            indicators = policy_rng.integers(0, 2, size=len(cands)).tolist()
            env.step(indicators, sample_slot_requests(cat, 5, 8, 1.0, rng, slot=t + 1))
        for cache, counts in snapshots:
            for o, c in counts.items():
                den += c
                if o in cache:
                    num += c
        assert env.hit_numerator == num
        assert env.hit_denominator == den
        assert abs(env.hit_rate - num / den) <= 1e-15

    def test_rollout_invariants(self):
        cat = build_catalog(30, 1.3)
        rng = np.random.default_rng(31)
        policy_rng = np.random.default_rng(32)
        env = CacheEnv(30, 6, eta=0.5, cost_weight=0.3)
        env.reset(list(range(1, 7)), sample_slot_requests(cat, 4, 6, 1.2, rng, slot=0))
        bound = 1.0 + env.eta + env.cost_weight
        prev_q = env.ledger.q_array()
        for t in range(500):
            state = env.state
            cands = env.candidates()
            indicators = policy_rng.integers(0, 2, size=len(cands)).tolist()
            outcome, new_state = env.step(
                indicators, sample_slot_requests(cat, 4, 6, 1.2, rng, slot=t + 1))
            assert len(new_state.cache) == 6
            assert len(set(new_state.cache)) == 6
            assert outcome.hits | outcome.misses == state.requests.distinct
            assert outcome.hits & outcome.misses == frozenset()
            assert abs(outcome.reward) <= bound + 1e-12
            q = env.ledger.q_array()
            assert (q >= prev_q - 1e-15).all()
            prev_q = q
            assert outcome.d_plus <= set(new_state.cache)
            assert outcome.d_star <= set(state.cache) & set(new_state.cache)

    def test_retain_everything_hit_only_slots(self):
        # catalog equals capacity: every request hits, retain-all never churns
        cat = build_catalog(6, 1.0)
        rng = np.random.default_rng(41)
        env = CacheEnv(6, 6)
        env.reset([1, 2, 3, 4, 5, 6], sample_slot_requests(cat, 3, 6, 1.0, rng, slot=0))
        for t in range(100):
            state = env.state
            outcome, _ = env.step([1] * 6, sample_slot_requests(cat, 3, 6, 1.0, rng, slot=t + 1))
            assert outcome.d_plus == frozenset()
            assert outcome.d_minus == frozenset()
            assert outcome.reward >= 0.0
            expected = compute_reward(outcome.d_star, set(), set(),
                                      state.requests.counts, env.eta, env.cost_weight)
            assert abs(outcome.reward - expected) <= 1e-15

    def test_step_determinism(self):
        def rollout():
            cat = build_catalog(20, 1.0)
            rng = np.random.default_rng(55)
            prng = np.random.default_rng(56)
            env = CacheEnv(20, 4)
            env.reset([1, 2, 3, 4], sample_slot_requests(cat, 3, 4, 1.0, rng, slot=0))
            trace = []
            for t in range(100):
                cands = env.candidates()
                ind = prng.integers(0, 2, size=len(cands)).tolist()
                outcome, state = env.step(ind, sample_slot_requests(cat, 3, 4, 1.0, rng, slot=t + 1))
                trace.append((tuple(state.cache), outcome.reward, tuple(sorted(outcome.d_minus))))
            return trace

        assert rollout() == rollout()

    def test_threshold_mode_exposed(self):
        env = CacheEnv(10, 3, empty_slot_mode="threshold")
        env.reset([1, 2, 3], batch_of(0))
        assert env.default_indicators() == [1, 1, 1]  # all q equal: everything retained
