"""
Unit tests for expertsim.tracegen.

Tests cover:
- Power-law traces: skew, balanced marginals and determinism
- Markov traces against their generating table
- Trace statistics
"""
from dataclasses import replace

import numpy as np
from django.test import SimpleTestCase

from expertsim.exceptions import GenerationInfeasible
from expertsim.topology import MoEConfig, TokenTrace, make_sample
from expertsim.tracegen import (
    build_path_catalog,
    generate_markov_trace,
    generate_powerlaw_trace,
    trace_stats,
)

from .factories import SMALL_CFG


class TestPathCatalog(SimpleTestCase):
    """Test the rotation families."""

    def test_families_are_distinct_rotations(self):
        cfg = MoEConfig()
        families = build_path_catalog(cfg, 500, seed=0)
        self.assertEqual(len(families), 63)
        paths = [p for family in families for p in family]
        self.assertEqual(len(set(paths)), len(paths))
        for family in families:
            for layer in range(cfg.decoder_moe_layers):
                self.assertEqual(sorted(path[layer][0] for path in family), list(range(8)))

    def test_fewer_paths_than_experts(self):
        with self.assertRaises(GenerationInfeasible):
            build_path_catalog(MoEConfig(), 7, seed=0)

    def test_more_paths_than_exist(self):
        """E=2 with one decoder MoE layer has only two distinct paths."""
        cfg = replace(SMALL_CFG, experts_per_layer=2, decoder_moe_layers=1)
        with self.assertRaises(GenerationInfeasible):
            build_path_catalog(cfg, 4, seed=0)


class TestPowerlawTrace(SimpleTestCase):
    """Test power-law path traces."""

    def test_default_skew_and_balance(self):
        """Defaults at 100k tokens: top 20% of paths carry ≥ 99% of tokens, marginals within 25%."""
        cfg = MoEConfig()
        trace = generate_powerlaw_trace(cfg, tokens=100_000, seed=0)
        trace.check_against(cfg)
        stats = trace_stats(trace)
        self.assertEqual(stats.tokens, 100_000)
        self.assertGreaterEqual(stats.top_share(0.2), 0.99)
        self.assertLessEqual(stats.max_marginal_deviation(cfg.routing_k), 0.25)

    def test_every_catalog_path_observed(self):
        """The warm walk emits every catalog path at least once."""
        cfg = MoEConfig()
        stats = trace_stats(generate_powerlaw_trace(cfg, n_paths=80, tokens=5_000, seed=2))
        self.assertEqual(stats.distinct_paths, 80)

    def test_deterministic(self):
        a = generate_powerlaw_trace(SMALL_CFG, n_paths=16, tokens=300, seed=9, tokens_per_sample=50)
        b = generate_powerlaw_trace(SMALL_CFG, n_paths=16, tokens=300, seed=9, tokens_per_sample=50)
        self.assertEqual(a, b)
        self.assertEqual(len(a.samples), 6)

    def test_flat_zipf_is_near_uniform(self):
        """zipf_s = 0 weights every path equally."""
        cfg = MoEConfig()
        stats = trace_stats(generate_powerlaw_trace(cfg, zipf_s=0.0, tokens=50_000, seed=1))
        self.assertLess(stats.top_share(0.2), 0.3)

    def test_negative_exponent_rejected(self):
        with self.assertRaises(GenerationInfeasible):
            generate_powerlaw_trace(SMALL_CFG, n_paths=8, zipf_s=-1.0, tokens=10)


class TestMarkovTrace(SimpleTestCase):
    """Test Markov traces with a known table."""

    def test_table_rows_are_distributions(self):
        cfg = MoEConfig()
        _, table = generate_markov_trace(cfg, seed=0, tokens=10)
        self.assertEqual(table.transitions.shape, (cfg.decoder_moe_layers - 1, 8, 8))
        self.assertTrue(np.allclose(table.transitions.sum(axis=2), 1.0))
        self.assertAlmostEqual(float(table.initial.sum()), 1.0)

    def test_empirical_conditionals_match_table(self):
        """Counted transitions approach the table rows that generated them."""
        cfg = MoEConfig()
        trace, table = generate_markov_trace(cfg, seed=7, tokens=100_000)
        steps = np.array([[step[0] for step in token] for token in trace.iter_tokens()])
        checked = 0
        for layer in range(1, cfg.decoder_moe_layers):
            for prev in range(cfg.experts_per_layer):
                following = steps[steps[:, layer - 1] == prev, layer]
                n = len(following)
                if n < 2000:
                    continue
                empirical = np.bincount(following, minlength=8) / n
                truth = table.row(layer, prev)
                bound = max(0.05, 3 * float(np.sqrt(truth * (1 - truth) / n).sum()))
                self.assertLessEqual(float(np.abs(empirical - truth).sum()), bound)
                checked += 1
        self.assertGreater(checked, 0)

    def test_top2_steps_are_distinct(self):
        cfg = replace(SMALL_CFG, routing_k=2)
        trace, _ = generate_markov_trace(cfg, seed=1, tokens=500)
        trace.check_against(cfg)
        for token in trace.iter_tokens():
            for step in token:
                self.assertEqual(len(set(step)), 2)

    def test_deterministic(self):
        a, _ = generate_markov_trace(SMALL_CFG, seed=3, tokens=200)
        b, _ = generate_markov_trace(SMALL_CFG, seed=3, tokens=200)
        self.assertEqual(a, b)

    def test_concentration_must_be_positive(self):
        with self.assertRaises(GenerationInfeasible):
            generate_markov_trace(SMALL_CFG, tokens=10, concentration=0.0)


class TestTraceStats(SimpleTestCase):
    """Test the statistics helper on a hand-built trace."""

    def test_hand_counted(self):
        cfg = replace(SMALL_CFG, encoder_moe_layers=0, encoder_layers=0)
        tokens = [((0,), (1,), (2,))] * 3 + [((1,), (1,), (3,))]
        stats = trace_stats(TokenTrace.for_config(cfg, [make_sample([], tokens)]))
        self.assertEqual(stats.tokens, 4)
        self.assertEqual(stats.distinct_paths, 2)
        self.assertEqual(stats.path_cdf, [0.75, 1.0])
        self.assertEqual(stats.marginals[1].tolist(), [0.0, 1.0, 0.0, 0.0])
        self.assertAlmostEqual(stats.top_share(0.5), 0.75)
        # expert 1 at layer 1 runs 4x the uniform share of 1/4
        self.assertAlmostEqual(stats.max_marginal_deviation(1), 3.0)
