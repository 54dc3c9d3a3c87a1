"""
Unit tests for expertsim.toymodel.

Tests cover:
- Deterministic model construction
- Forward pass routing and plan handling
- Probe agreement and its bitwidth monotonicity
- Trace emission
"""
from dataclasses import replace

import numpy as np
from django.test import SimpleTestCase

from expertsim.exceptions import ConfigError, DigestMismatchError, PlanError
from expertsim.topology import Bitwidth, ExpertRef, MoEConfig, Stage, all_experts
from expertsim.toymodel import (
    QuantPlan,
    build_probes,
    build_toy_model,
    emit_trace,
    evaluate_agreement,
    forward,
    forward_batch,
)
from expertsim.tracegen import trace_stats

from .factories import SMALL_CFG


class TestBuildToyModel(SimpleTestCase):
    """Test seeded weight generation."""

    def test_same_config_gives_identical_weights(self):
        """Rebuilding from the same config is bit-identical."""
        a, b = build_toy_model(SMALL_CFG), build_toy_model(SMALL_CFG)
        for ref in all_experts(SMALL_CFG):
            self.assertTrue(np.array_equal(a.experts[ref][0], b.experts[ref][0]))
            self.assertTrue(np.array_equal(a.experts[ref][1], b.experts[ref][1]))
        self.assertTrue(np.array_equal(a.head, b.head))

    def test_seed_changes_weights(self):
        """A different seed changes at least one weight."""
        a = build_toy_model(SMALL_CFG)
        b = build_toy_model(replace(SMALL_CFG, seed=SMALL_CFG.seed + 1))
        self.assertFalse(np.array_equal(a.head, b.head))

    def test_expert_magnitude_grows_with_index(self):
        """With E=8, expert 7 has a larger mean |weight| than expert 0."""
        model = build_toy_model(MoEConfig())
        first = model.experts[ExpertRef(Stage.DECODER, 0, 0)]
        last = model.experts[ExpertRef(Stage.DECODER, 0, 7)]
        self.assertGreater(np.abs(last[0]).mean(), np.abs(first[0]).mean())
        self.assertGreater(np.abs(last[1]).mean(), np.abs(first[1]).mean())

    def test_invalid_config_rejected(self):
        with self.assertRaises(ConfigError):
            build_toy_model(MoEConfig(routing_k=3, experts_per_layer=2))


class TestForward(SimpleTestCase):
    """Test the forward pass."""

    def setUp(self):
        self.model = build_toy_model(SMALL_CFG)
        self.x = np.random.default_rng(7).standard_normal(SMALL_CFG.model_dim)

    def test_fp32_plan_equals_planless(self):
        """An all-FP32 plan reproduces the unquantized forward exactly."""
        plan = QuantPlan.uniform(SMALL_CFG, Bitwidth.FP32)
        logits_a, path_a = forward(self.model, None, self.x)
        logits_b, path_b = forward(self.model, plan, self.x)
        self.assertTrue(np.array_equal(logits_a, logits_b))
        self.assertEqual(path_a, path_b)

    def test_deterministic(self):
        """Same model, plan and input give identical results."""
        plan = QuantPlan.uniform(SMALL_CFG, Bitwidth.INT4)
        first = forward(self.model, plan, self.x)
        second = forward(self.model, plan, self.x)
        self.assertTrue(np.array_equal(first[0], second[0]))
        self.assertEqual(first[1], second[1])

    def test_path_is_argmax_of_router_logits(self):
        """k=1: each step is the argmax of an independently recomputed router."""
        _, path = forward(self.model, None, self.x)
        h = self.x.astype(np.float64)
        layers = [(Stage.ENCODER, i) for i in range(SMALL_CFG.encoder_moe_layers)]
        layers += [(Stage.DECODER, i) for i in range(SMALL_CFG.decoder_moe_layers)]
        self.assertEqual(len(path), len(layers))
        for (stage, layer), step in zip(layers, path):
            logits = h @ self.model.routers[(stage, layer)].astype(np.float64)
            j = int(np.argmax(logits))
            self.assertEqual(step, (j,))
            up, down = self.model.experts[ExpertRef(stage, layer, j)]
            h = h + np.maximum(h @ up, 0.0) @ down
            h = h / np.sqrt(np.mean(h ** 2))

    def test_top2_steps_are_distinct_and_ranked(self):
        """k=2 routes to two distinct experts, highest logit first."""
        cfg = replace(SMALL_CFG, routing_k=2)
        model = build_toy_model(cfg)
        _, path = forward(model, None, self.x)
        for step in path:
            self.assertEqual(len(step), 2)
            self.assertNotEqual(step[0], step[1])
        first_logits = self.x @ model.routers[(Stage.ENCODER, 0)].astype(np.float64)
        self.assertEqual(path[0], tuple(int(j) for j in np.argsort(-first_logits, kind='stable')[:2]))

    def test_dimension_mismatch(self):
        """An input of the wrong width is rejected."""
        with self.assertRaises(ValueError):
            forward(self.model, None, np.ones(SMALL_CFG.model_dim + 1))

    def test_non_finite_input(self):
        x = self.x.copy()
        x[0] = np.nan
        with self.assertRaises(ValueError):
            forward(self.model, None, x)

    def test_plans_do_not_interfere(self):
        """Interleaving two plans gives the same logits as running each alone."""
        inputs = np.random.default_rng(1).standard_normal((16, SMALL_CFG.model_dim))
        int2 = QuantPlan.uniform(SMALL_CFG, Bitwidth.INT2)
        int8 = QuantPlan.uniform(SMALL_CFG, Bitwidth.INT8, Bitwidth.INT8)
        alone = forward_batch(build_toy_model(SMALL_CFG), int2, inputs)[0]
        forward_batch(self.model, int8, inputs)
        interleaved = forward_batch(self.model, int2, inputs)[0]
        forward_batch(self.model, int8, inputs)
        self.assertTrue(np.array_equal(alone, interleaved))


class TestQuantPlan(SimpleTestCase):
    """Test plan construction and validation."""

    def test_uniform_plan_counts(self):
        plan = QuantPlan.uniform(SMALL_CFG, Bitwidth.INT4)
        plan.check_against(SMALL_CFG)
        self.assertEqual(plan.low_bit_count, SMALL_CFG.total_experts)

    def test_dict_round_trip(self):
        """to_dict/from_dict preserves the plan and its digest."""
        refs = all_experts(SMALL_CFG)
        plan = QuantPlan.from_order(SMALL_CFG, refs, 3, Bitwidth.INT2, Bitwidth.INT4, Bitwidth.INT8)
        again = QuantPlan.from_dict(plan.to_dict())
        self.assertEqual(again.digest(), plan.digest())
        self.assertEqual(again.bitwidth_for(refs[0]), Bitwidth.INT2)
        self.assertEqual(again.bitwidth_for(refs[-1]), Bitwidth.INT4)

    def test_wrong_low_bit_count_rejected(self):
        """low_bit_count must equal the number of experts at the lower bound."""
        plan = QuantPlan.uniform(SMALL_CFG, Bitwidth.INT4)
        bad = QuantPlan(plan.config_digest, plan.bitwidths, plan.non_expert_bitwidth, 1, plan.bounds)
        with self.assertRaises(PlanError):
            bad.check_against(SMALL_CFG)

    def test_missing_expert_rejected(self):
        """A plan must assign every expert."""
        plan = QuantPlan.uniform(SMALL_CFG, Bitwidth.INT4)
        bitwidths = dict(plan.bitwidths)
        bitwidths.pop(all_experts(SMALL_CFG)[0])
        bad = QuantPlan(plan.config_digest, bitwidths, plan.non_expert_bitwidth, len(bitwidths), plan.bounds)
        with self.assertRaises(PlanError):
            bad.check_against(SMALL_CFG)

    def test_other_config_rejected(self):
        with self.assertRaises(DigestMismatchError):
            QuantPlan.uniform(SMALL_CFG, Bitwidth.INT4).check_against(MoEConfig())

    def test_malformed_dict(self):
        with self.assertRaises(PlanError):
            QuantPlan.from_dict({'config_digest': 'x'})


class TestEvaluateAgreement(SimpleTestCase):
    """Test probe agreement."""

    def test_fp32_plan_agrees_fully(self):
        """The FP32 plan agrees with the reference on every probe."""
        model = build_toy_model(SMALL_CFG)
        probes = build_probes(model, 64)
        self.assertEqual(evaluate_agreement(model, QuantPlan.uniform(SMALL_CFG, Bitwidth.FP32), probes), 1.0)
        self.assertEqual(evaluate_agreement(model, None, probes), 1.0)

    def test_single_probe_is_zero_or_one(self):
        model = build_toy_model(SMALL_CFG)
        probes = build_probes(model, 1)
        self.assertIn(evaluate_agreement(model, QuantPlan.uniform(SMALL_CFG, Bitwidth.INT2), probes), (0.0, 1.0))

    def test_foreign_probes_rejected(self):
        """Probes built for another model are a digest mismatch."""
        model = build_toy_model(SMALL_CFG)
        other = build_toy_model(replace(SMALL_CFG, seed=99))
        with self.assertRaises(DigestMismatchError):
            evaluate_agreement(model, None, build_probes(other, 4))

    def test_int8_at_least_int2_default_config(self):
        """On the default config with 512 probes, INT8 agrees at least as often as INT2."""
        model = build_toy_model(MoEConfig())
        probes = build_probes(model, 512)
        int8 = evaluate_agreement(model, QuantPlan.uniform(model.cfg, Bitwidth.INT8), probes)
        int2 = evaluate_agreement(model, QuantPlan.uniform(model.cfg, Bitwidth.INT2), probes)
        self.assertGreaterEqual(int8, int2)

    def test_mean_agreement_monotone_over_seeds(self):
        """Over 10 seeds, mean agreement is ordered INT8 >= INT4 >= INT2."""
        means = {b: [] for b in (Bitwidth.INT2, Bitwidth.INT4, Bitwidth.INT8)}
        for seed in range(10):
            model = build_toy_model(MoEConfig(seed=seed))
            probes = build_probes(model, 512)
            for b in means:
                means[b].append(evaluate_agreement(model, QuantPlan.uniform(model.cfg, b), probes))
        int2, int4, int8 = (float(np.mean(means[b])) for b in (Bitwidth.INT2, Bitwidth.INT4, Bitwidth.INT8))
        self.assertGreaterEqual(int8, int4)
        self.assertGreaterEqual(int4, int2)


class TestEmitTrace(SimpleTestCase):
    """Test routing traces recorded from the toy model."""

    def test_deterministic(self):
        model = build_toy_model(SMALL_CFG)
        self.assertEqual(emit_trace(model, 3, 5, seed=4), emit_trace(model, 3, 5, seed=4))

    def test_structure(self):
        """Every token carries one step per decoder MoE layer."""
        model = build_toy_model(SMALL_CFG)
        trace = emit_trace(model, 4, 6)
        self.assertEqual(len(trace.samples), 4)
        self.assertEqual(trace.n_tokens, 24)
        trace.check_against(SMALL_CFG)
        for sample in trace.samples:
            self.assertEqual(len(sample.encoder_steps), SMALL_CFG.encoder_moe_layers)
            for token in sample.decode_tokens:
                self.assertEqual(len(token), SMALL_CFG.decoder_moe_layers)

    def test_marginals_non_degenerate_default_config(self):
        """Over 10k tokens of the default model every expert is used at every decoder layer."""
        model = build_toy_model(MoEConfig())
        stats = trace_stats(emit_trace(model, 100, 100))
        self.assertEqual(stats.tokens, 10_000)
        self.assertTrue((stats.marginals > 0).all())
