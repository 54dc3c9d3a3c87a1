"""
Unit tests for expertsim.buffer.

Tests cover:
- The eviction score and its distance variants
- Access, insert, pinning and eviction against a brute-force oracle
- Warm-up fill and the no-preload policy replay
"""
import random

import numpy as np
from django.test import SimpleTestCase

from expertsim.buffer import (
    ExpertBuffer,
    Policy,
    buffer_slot_table,
    eviction_score,
    init_buffer,
    policy_sweep,
    run_policy_eval,
)
from expertsim.exceptions import CapacityError, DigestMismatchError, EvictionDeadlock
from expertsim.predictor import ActivationProfile, build_profile
from expertsim.topology import (
    Bitwidth,
    ExpertRef,
    MoEConfig,
    Stage,
    TokenTrace,
    expert_size_bytes,
    make_sample,
    non_expert_param_bytes,
)
from expertsim.toymodel import QuantPlan
from expertsim.tracegen import generate_powerlaw_trace

from .factories import DECODER_ONLY_CFG, SMALL_CFG, constant_path, repeating_trace


def dec(layer, expert):
    return ExpertRef(Stage.DECODER, layer, expert)


def enc(layer, expert):
    return ExpertRef(Stage.ENCODER, layer, expert)


class TestEvictionScore(SimpleTestCase):
    """Test the frequency / layer-distance score."""

    def test_printed_formula(self):
        """f=4, S=6, I=2, i=5: d = (6 - 5 + 2) mod 6 = 3."""
        self.assertAlmostEqual(eviction_score(4, 5, 2, 6), -4 / 3)

    def test_unused_expert_scores_zero(self):
        """f=0 gives the maximum score 0."""
        self.assertEqual(eviction_score(0, 3, 1, 6), 0.0)

    def test_current_layer_uses_full_cycle(self):
        """i = I maps d = 0 to d = S."""
        self.assertAlmostEqual(eviction_score(7, 2, 2, 6), -7 / 6)
        self.assertAlmostEqual(eviction_score(7, 2, 2, 6, distance='forward'), -7 / 6)

    def test_forward_distance(self):
        """'forward' measures (i - I) mod S."""
        self.assertAlmostEqual(eviction_score(4, 1, 2, 6), -4.0)
        self.assertAlmostEqual(eviction_score(4, 1, 2, 6, distance='forward'), -4 / 5)


class TestAccessAndInsert(SimpleTestCase):
    """Test the buffer's basic operations."""

    def setUp(self):
        self.buf = ExpertBuffer(300, decoder_moe_layers=3, experts_per_layer=4)

    def test_hit_and_miss(self):
        self.buf.insert(dec(0, 1), 100)
        self.assertTrue(self.buf.access(dec(0, 1)))
        self.assertTrue(self.buf.access(dec(0, 1)))
        self.assertFalse(self.buf.access(dec(0, 2)))
        self.assertEqual((self.buf.hits, self.buf.misses), (2, 1))
        self.assertEqual(self.buf.accesses, 3)
        self.assertNotIn(dec(0, 2), self.buf)

    def test_empty_buffer_insert_evicts_nothing(self):
        self.assertEqual(self.buf.insert(dec(1, 1), 100), [])
        self.assertEqual(self.buf.used_bytes, 100)

    def test_encoder_expert_evicted_before_used_decoder_experts(self):
        """Encoder experts have frequency 0 and go first."""
        self.buf.insert(dec(0, 0), 100)
        self.buf.insert(enc(0, 3), 100)
        self.buf.insert(dec(2, 1), 100)
        self.buf.access(dec(0, 0))
        self.buf.access(dec(2, 1))
        self.assertEqual(self.buf.insert(dec(1, 2), 100), [enc(0, 3)])

    def test_pinned_experts_survive(self):
        """Pinned residents are never chosen as victims."""
        self.buf.insert(dec(0, 0), 100)
        self.buf.insert(dec(0, 1), 100)
        self.buf.insert(dec(0, 2), 100)
        self.buf.pin(dec(0, 0))
        self.buf.pin(dec(0, 1))
        self.assertEqual(self.buf.insert(dec(1, 0), 100), [dec(0, 2)])

    def test_eviction_deadlock(self):
        """All residents pinned and no room left is a deadlock."""
        for j in range(3):
            self.buf.insert(dec(0, j), 100)
            self.buf.pin(dec(0, j))
        self.assertFalse(self.buf.can_insert(100))
        with self.assertRaises(EvictionDeadlock):
            self.buf.insert(dec(1, 0), 100)

    def test_oversized_expert_rejected(self):
        with self.assertRaises(CapacityError):
            self.buf.insert(dec(0, 0), 301)

    def test_double_insert_rejected(self):
        self.buf.insert(dec(0, 0), 100)
        with self.assertRaises(CapacityError):
            self.buf.insert(dec(0, 0), 100)

    def test_ties_go_to_lowest_index(self):
        """Equal scores evict the smallest (stage, layer, expert) first."""
        buf = ExpertBuffer(200, 3, 4, policy=Policy.LFU)
        buf.insert(dec(1, 3), 100)
        buf.insert(dec(1, 0), 100)
        self.assertEqual(buf.insert(dec(2, 2), 100), [dec(1, 0)])

    def test_classic_policies(self):
        """LRU drops the oldest access, FIFO the earliest insert, LFU the fewest accesses."""
        victims = {}
        for policy in (Policy.LRU, Policy.FIFO, Policy.LFU):
            buf = ExpertBuffer(300, 3, 4, policy=policy)
            for j in range(3):
                buf.insert(dec(0, j), 100)
            buf.access(dec(0, 0))
            buf.access(dec(0, 0))
            buf.access(dec(0, 2))
            buf.access(dec(0, 1))
            victims[policy] = buf.insert(dec(1, 0), 100)
        self.assertEqual(victims[Policy.LRU], [dec(0, 0)])
        self.assertEqual(victims[Policy.FIFO], [dec(0, 0)])
        self.assertEqual(victims[Policy.LFU], [dec(0, 1)])

    def test_negative_capacity_rejected(self):
        with self.assertRaises(CapacityError):
            ExpertBuffer(-1, 3, 4)


class TestEvictionOracle(SimpleTestCase):
    """Fuzz the buffer against an independent bookkeeping of every policy."""

    S, E = 4, 4

    def _refs(self):
        refs = [enc(0, j) for j in range(self.E)]
        refs += [dec(i, j) for i in range(self.S) for j in range(self.E)]
        return refs

    def _fuzz(self, policy, n_ops=10_000, seed=0, distance='printed', capacity=600):
        rng = random.Random(seed)
        buf = ExpertBuffer(capacity, self.S, self.E, policy=policy, seed=seed, distance=distance)
        refs = self._refs()
        sizes = {ref: rng.choice((50, 100, 150, 250)) for ref in refs}
        freq, counts, last, inserted = {}, {}, {}, {}
        clock = 0

        def score(ref):
            if policy == Policy.EDGEMOE:
                f = 0 if ref.stage == Stage.ENCODER else freq.get(ref, 0)
                if distance == 'forward':
                    d = (ref.moe_layer - buf.current_layer) % self.S
                else:
                    d = (self.S - ref.moe_layer + buf.current_layer) % self.S
                d = d or self.S
                return -f / d if f else 0.0
            if policy == Policy.LRU:
                return -last[ref]
            if policy == Policy.LFU:
                return -counts.get(ref, 0)
            return -inserted[ref]

        for _ in range(n_ops):
            op = rng.random()
            ref = rng.choice(refs)
            if op < 0.1:
                buf.set_layer(rng.randrange(self.S))
                buf.unpin_all()
            elif op < 0.2 and ref in buf:
                buf.pin(ref)
            elif op < 0.6:
                hit = buf.access(ref)
                if ref.stage == Stage.DECODER:
                    freq[ref] = freq.get(ref, 0) + 1
                counts[ref] = counts.get(ref, 0) + 1
                if hit:
                    clock += 1
                    last[ref] = clock
                self.assertEqual(hit, ref in buf)
            elif ref not in buf and buf.can_insert(sizes[ref]):
                expected, free = [], buf.free_bytes
                remaining = [r for r in buf.resident if r not in buf.pinned]
                while free < sizes[ref]:
                    victim = min(remaining, key=lambda r: (-score(r), r))
                    expected.append(victim)
                    remaining.remove(victim)
                    free += buf.resident[victim]
                evicted = buf.insert(ref, sizes[ref])
                if policy != Policy.RANDOM:
                    self.assertEqual(evicted, expected)
                clock += 1
                last[ref] = inserted[ref] = clock
            self.assertLessEqual(buf.used_bytes, buf.capacity_bytes)
            self.assertEqual(buf.used_bytes, sum(buf.resident.values()))
            self.assertEqual(buf.hits + buf.misses, buf.accesses)
        return buf

    def test_edgemoe_printed_distance(self):
        """Every edgemoe victim maximizes the score among unpinned residents."""
        self._fuzz(Policy.EDGEMOE)

    def test_edgemoe_forward_distance(self):
        self._fuzz(Policy.EDGEMOE, seed=1, distance='forward')

    def test_lru(self):
        self._fuzz(Policy.LRU, seed=2)

    def test_lfu(self):
        self._fuzz(Policy.LFU, seed=3)

    def test_fifo(self):
        self._fuzz(Policy.FIFO, seed=4)

    def test_random_is_seeded(self):
        """The random policy never exceeds the budget and is reproducible."""
        a = self._fuzz(Policy.RANDOM, n_ops=3000, seed=5)
        b = self._fuzz(Policy.RANDOM, n_ops=3000, seed=5)
        self.assertEqual(a.resident, b.resident)
        self.assertEqual(a.evictions, b.evictions)


class TestInitBuffer(SimpleTestCase):
    """Test the warm-up fill."""

    def test_encoder_experts_in_order(self):
        """Capacity for 3 of 12 encoder experts holds the first 3."""
        cfg = MoEConfig(encoder_layers=3, encoder_moe_layers=3, experts_per_layer=4)
        size = expert_size_bytes(cfg, Bitwidth.FP32)
        buf = ExpertBuffer.for_config(cfg, 3 * size)
        init_buffer(buf, cfg)
        self.assertEqual(sorted(buf.resident), [enc(0, 0), enc(0, 1), enc(0, 2)])

    def test_decoder_only_fills_by_marginal_frequency(self):
        """Without encoder MoE layers the most frequent decoder experts are loaded."""
        cfg = DECODER_ONLY_CFG
        tokens = [((1,), (2,), (3,), (0,))] * 5 + [((2,), (2,), (0,), (0,))] * 3
        profile = build_profile([TokenTrace.for_config(cfg, [make_sample([], tokens)])], h=1, alpha=0.0)
        size = expert_size_bytes(cfg, Bitwidth.FP32)
        buf = ExpertBuffer.for_config(cfg, 3 * size)
        init_buffer(buf, cfg, profile)
        # marginal counts: (1,2)=8 and (3,0)=8 tie at the top, then (0,1)=5
        self.assertEqual(sorted(buf.resident), [dec(0, 1), dec(1, 2), dec(3, 0)])

    def test_zero_capacity(self):
        buf = ExpertBuffer.for_config(SMALL_CFG, 0)
        init_buffer(buf, SMALL_CFG)
        self.assertEqual(buf.resident, {})

    def test_requires_empty_buffer(self):
        buf = ExpertBuffer.for_config(SMALL_CFG, 10 ** 6)
        buf.insert(dec(0, 0), 10)
        with self.assertRaises(CapacityError):
            init_buffer(buf, SMALL_CFG)


class TestPolicyEval(SimpleTestCase):
    """Test the no-preload replay."""

    def setUp(self):
        tokens = [((t % 4,), ((t // 2) % 4,), ((t * 3) % 4,)) for t in range(40)]
        self.trace = TokenTrace.for_config(SMALL_CFG, [make_sample([(0,)], tokens)])

    def test_room_for_everything_only_misses_first_touch(self):
        """With slots >= experts every policy misses exactly the first touches."""
        accesses = self.trace.n_tokens * SMALL_CFG.decoder_moe_layers
        first_touch = len({(layer, step) for token in self.trace.iter_tokens() for layer, step in enumerate(token)})
        expected = 1 - first_touch / accesses
        for policy in Policy:
            ratio = run_policy_eval(self.trace, SMALL_CFG, policy, SMALL_CFG.total_experts)
            self.assertAlmostEqual(ratio, expected)

    def test_zero_slots(self):
        self.assertEqual(run_policy_eval(self.trace, SMALL_CFG, Policy.EDGEMOE, 0), 0.0)

    def test_trace_for_other_config_rejected(self):
        with self.assertRaises(DigestMismatchError):
            run_policy_eval(self.trace, MoEConfig(), Policy.LRU, 4)

    def test_profile_seeds_edgemoe_frequencies(self):
        """Seeded counts keep decoder:0:0 resident through a token, turning its second use into a hit.

        Two slots, expert 0 at every layer for two tokens. Unseeded, each layer
        evicts the older resident and all 8 accesses miss. With 100 seeded uses
        of decoder:0:0 it always scores lowest, so the next token hits it.
        """
        cfg = DECODER_ONLY_CFG
        trace = repeating_trace(cfg, constant_path(cfg, 0), 2)
        marginal = np.zeros((cfg.decoder_moe_layers, cfg.experts_per_layer), dtype=np.int64)
        marginal[0, 0] = 100
        profile = ActivationProfile(cfg.digest(), cfg.experts_per_layer, cfg.routing_k, cfg.decoder_moe_layers,
                                    marginal_counts=marginal)
        plain = run_policy_eval(trace, cfg, Policy.EDGEMOE, 2, distance='printed')
        seeded = run_policy_eval(trace, cfg, Policy.EDGEMOE, 2, distance='printed', profile=profile)
        self.assertEqual(plain, 0.0)
        self.assertAlmostEqual(seeded, 1 / 8)

    def test_sweep_rows(self):
        report = policy_sweep(self.trace, SMALL_CFG, [Policy.LRU, Policy.EDGEMOE], [1, 2])
        self.assertEqual(report['tokens'], 40)
        self.assertEqual([(r['policy'], r['slots']) for r in report['results']],
                         [('lru', 1), ('edgemoe', 1), ('lru', 2), ('edgemoe', 2)])
        self.assertEqual(len(report['steps']), 4)

    def test_edgemoe_leads_on_skewed_trace(self):
        """Zipf s=1.2, E=8, S=6, 50k tokens, 10 slots, default distance: edgemoe within 0.01 of the best."""
        cfg = MoEConfig()
        trace = generate_powerlaw_trace(cfg, zipf_s=1.2, tokens=50_000, seed=0)
        ratios = {p: run_policy_eval(trace, cfg, p, 10, distance='printed') for p in Policy}
        for policy, ratio in ratios.items():
            self.assertGreaterEqual(ratios[Policy.EDGEMOE], ratio - 0.01, policy)


class TestSlotTable(SimpleTestCase):
    """Test the experts-per-budget table."""

    def test_counts_follow_bytes(self):
        cfg = MoEConfig()
        fp32 = expert_size_bytes(cfg, Bitwidth.FP32)
        plan = QuantPlan.uniform(cfg, Bitwidth.INT4, Bitwidth.INT8)
        non_expert = non_expert_param_bytes(cfg, Bitwidth.INT8)
        rows = buffer_slot_table(cfg, plan, [non_expert + 10 * fp32, 0])
        self.assertEqual(rows[0]['fp32_experts'], 10)
        self.assertEqual(rows[0]['planned_experts'], rows[0]['int4_experts'])
        self.assertEqual(rows[1]['fp32_experts'], 0)
