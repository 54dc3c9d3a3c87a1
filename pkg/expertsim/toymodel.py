# This file contains the deterministic toy MoE network that stands in for a
# real model: it supplies an accuracy signal for bitwidth planning and
# router-correlated activation traces.

import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .exceptions import DigestMismatchError, PlanError
from .quantizer import fake_quantize
from .topology import Bitwidth, ExpertRef, MoEConfig, Stage, TokenTrace, all_experts, ensure_valid, make_sample

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class QuantPlan:
    """Per-expert bitwidths plus the bitwidth of every non-expert weight."""

    config_digest: str
    bitwidths: Mapping
    non_expert_bitwidth: Bitwidth
    low_bit_count: int
    bounds: tuple
    tolerable_loss: Optional[float] = None
    measured_loss: Optional[float] = None

    @classmethod
    def uniform(cls, cfg: MoEConfig, b: Bitwidth, non_expert: Bitwidth = Bitwidth.FP32) -> 'QuantPlan':
        refs = all_experts(cfg)
        return cls(cfg.digest(), {ref: b for ref in refs}, non_expert, len(refs), (b, b))

    @classmethod
    def from_order(cls, cfg, order, k, low, high, non_expert=Bitwidth.FP32, **extra) -> 'QuantPlan':
        """The k first experts of ``order`` at ``low``, everything else at ``high``."""
        bitwidths = {ref: high for ref in order}
        for ref in order[:k]:
            bitwidths[ref] = low
        return cls(cfg.digest(), bitwidths, non_expert, k, (low, high), **extra)

    def bitwidth_for(self, ref: ExpertRef) -> Bitwidth:
        return self.bitwidths[ref]

    def with_non_expert(self, b: Bitwidth) -> 'QuantPlan':
        return QuantPlan(self.config_digest, self.bitwidths, b, self.low_bit_count, self.bounds,
                         self.tolerable_loss, self.measured_loss)

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(include_results=False), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:16]

    def check_against(self, cfg: MoEConfig) -> None:
        if self.config_digest != cfg.digest():
            raise DigestMismatchError('plan', cfg.digest(), self.config_digest)
        refs = all_experts(cfg)
        if set(self.bitwidths) != set(refs) or len(self.bitwidths) != len(refs):
            raise PlanError('plan does not assign every expert of the config exactly once')
        low = self.bounds[0]
        counted = sum(1 for b in self.bitwidths.values() if b == low)
        if counted != self.low_bit_count:
            raise PlanError(f'low_bit_count {self.low_bit_count} but {counted} experts at {low.name}')

    def to_dict(self, include_results=True) -> dict:
        data = {
            'config_digest': self.config_digest,
            'bounds': [self.bounds[0].name, self.bounds[1].name],
            'low_bit_count': self.low_bit_count,
            'non_expert_bitwidth': self.non_expert_bitwidth.name,
            'experts': {ref.key(): b.name for ref, b in sorted(self.bitwidths.items())},
        }
        if include_results:
            data['tolerable_loss'] = self.tolerable_loss
            data['measured_loss'] = self.measured_loss
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'QuantPlan':
        try:
            return cls(
                config_digest=data['config_digest'],
                bitwidths={ExpertRef.from_key(k): Bitwidth.parse(v) for k, v in data['experts'].items()},
                non_expert_bitwidth=Bitwidth.parse(data['non_expert_bitwidth']),
                low_bit_count=int(data['low_bit_count']),
                bounds=tuple(Bitwidth.parse(b) for b in data['bounds']),
                tolerable_loss=data.get('tolerable_loss'),
                measured_loss=data.get('measured_loss'),
            )
        except (KeyError, ValueError, TypeError) as e:
            raise PlanError(f'malformed plan: {e}') from e


@dataclass(eq=False)
class ToyMoEModel:
    cfg: MoEConfig
    routers: dict
    experts: dict
    head: np.ndarray
    # memo of fake-quantized weights keyed by (name, bitwidth); results never depend on it
    _memo: dict = field(default_factory=dict, repr=False)

    @property
    def digest(self) -> str:
        return self.cfg.digest()

    def moe_layers(self) -> list:
        return [(stage, i) for stage in (Stage.ENCODER, Stage.DECODER) for i in range(self.cfg.moe_layers(stage))]

    def expert_weights(self, ref: ExpertRef, b: Bitwidth = Bitwidth.FP32) -> tuple:
        if b == Bitwidth.FP32:
            return self.experts[ref]
        key = (ref, b)
        if key not in self._memo:
            up, down = self.experts[ref]
            self._memo[key] = (fake_quantize(up, b), fake_quantize(down, b))
        return self._memo[key]

    def router_weights(self, stage: Stage, layer: int, b: Bitwidth = Bitwidth.FP32) -> np.ndarray:
        return self._non_expert(('router', stage, layer), self.routers[(stage, layer)], b)

    def head_weights(self, b: Bitwidth = Bitwidth.FP32) -> np.ndarray:
        return self._non_expert(('head',), self.head, b)

    def _non_expert(self, name, weights, b):
        if b == Bitwidth.FP32:
            return weights
        key = (name, b)
        if key not in self._memo:
            self._memo[key] = fake_quantize(weights, b)
        return self._memo[key]


def build_toy_model(cfg: MoEConfig) -> ToyMoEModel:
    """Draw every weight from a generator seeded by cfg.seed.

    Expert j's matrices are scaled by 0.5 + j/E so experts differ in how much
    quantization error they inject.
    """
    ensure_valid(cfg)
    rng = np.random.default_rng(cfg.seed)
    d, h, E = cfg.model_dim, cfg.ffn_hidden_dim, cfg.experts_per_layer
    routers, experts = {}, {}
    for stage in (Stage.ENCODER, Stage.DECODER):
        for layer in range(cfg.moe_layers(stage)):
            routers[(stage, layer)] = (rng.standard_normal((d, E)) / np.sqrt(d)).astype(np.float32)
            for j in range(E):
                scale = 0.5 + j / E
                up = rng.standard_normal((d, h)) * scale / np.sqrt(d)
                down = rng.standard_normal((h, d)) * scale / np.sqrt(h)
                experts[ExpertRef(stage, layer, j)] = (up.astype(np.float32), down.astype(np.float32))
    head = (rng.standard_normal((d, cfg.head_classes)) / np.sqrt(d)).astype(np.float32)
    return ToyMoEModel(cfg=cfg, routers=routers, experts=experts, head=head)


def rms_norm(x: np.ndarray) -> np.ndarray:
    rms = np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True))
    return x / np.where(rms > 0, rms, 1.0)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def route(logits: np.ndarray, k: int) -> np.ndarray:
    """Top-k expert indices per row, highest logit first, ties to the lower index."""
    return np.argsort(-logits, axis=1, kind='stable')[:, :k]


def _expert_bitwidth(plan, ref):
    return Bitwidth.FP32 if plan is None else plan.bitwidth_for(ref)


def run_layers(model: ToyMoEModel, plan: Optional[QuantPlan], hidden: np.ndarray, layers) -> tuple:
    """Run a batch of hidden states through the given MoE layers.

    Returns the new hidden states and the routed experts, shape (batch, len(layers), k).
    """
    cfg = model.cfg
    k = cfg.routing_k
    non_expert = Bitwidth.FP32 if plan is None else plan.non_expert_bitwidth
    h = np.asarray(hidden, dtype=np.float64)
    paths = np.zeros((h.shape[0], len(layers), k), dtype=np.int64)
    for pos, (stage, layer) in enumerate(layers):
        logits = h @ model.router_weights(stage, layer, non_expert)
        chosen = route(logits, k)
        paths[:, pos, :] = chosen
        if k == 1:
            weights = np.ones((h.shape[0], 1))
        else:
            weights = _softmax(np.take_along_axis(logits, chosen, axis=1))
        mixed = np.zeros_like(h)
        for j in np.unique(chosen):
            ref = ExpertRef(stage, layer, int(j))
            rows, slot = np.nonzero(chosen == j)
            up, down = model.expert_weights(ref, _expert_bitwidth(plan, ref))
            out = np.maximum(h[rows] @ up, 0.0) @ down
            mixed[rows] += weights[rows, slot][:, None] * out
        h = rms_norm(h + mixed)
    return h, paths


def forward_batch(model: ToyMoEModel, plan: Optional[QuantPlan], inputs: np.ndarray) -> tuple:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.cfg.model_dim:
        raise ValueError(f'expected inputs of width {model.cfg.model_dim}, got shape {x.shape}')
    if not np.isfinite(x).all():
        raise ValueError('inputs must be finite')
    h, paths = run_layers(model, plan, x, model.moe_layers())
    non_expert = Bitwidth.FP32 if plan is None else plan.non_expert_bitwidth
    return h @ model.head_weights(non_expert), paths


def forward(model: ToyMoEModel, plan: Optional[QuantPlan], x) -> tuple:
    """Single-input forward: (logits, path) where path holds one step per MoE layer."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError('forward takes one d-vector; use forward_batch for batches')
    logits, paths = forward_batch(model, plan, x[None, :])
    return logits[0], [tuple(int(j) for j in step) for step in paths[0]]


@dataclass(frozen=True)
class ProbeSet:
    inputs: np.ndarray
    reference_labels: np.ndarray
    model_digest: str
    seed: int

    @property
    def digest(self) -> str:
        return f'{self.model_digest}-{len(self.inputs)}-{self.seed}'


def build_probes(model: ToyMoEModel, n: int, seed: int = 1) -> ProbeSet:
    if n < 1:
        raise ValueError('a probe set needs at least one input')
    rng = np.random.default_rng(seed)
    inputs = rng.standard_normal((n, model.cfg.model_dim))
    logits, _ = forward_batch(model, None, inputs)
    return ProbeSet(inputs, np.argmax(logits, axis=1), model.digest, seed)


def evaluate_agreement(model: ToyMoEModel, plan: Optional[QuantPlan], probes: ProbeSet) -> float:
    """Fraction of probes whose head argmax under ``plan`` matches the FP32 reference."""
    if probes.model_digest != model.digest:
        raise DigestMismatchError('probe set', model.digest, probes.model_digest)
    if plan is not None and plan.config_digest != model.digest:
        raise DigestMismatchError('plan', model.digest, plan.config_digest)
    logits, _ = forward_batch(model, plan, probes.inputs)
    return float(np.mean(np.argmax(logits, axis=1) == probes.reference_labels))


def emit_trace(model: ToyMoEModel, n_samples: int, tokens_per_sample: int, seed: Optional[int] = None) -> TokenTrace:
    """Record the routing of seeded random inputs through the FP32 model.

    Each sample runs the encoder MoE layers once; decoder token t+1 starts
    from token t's hidden output plus fresh noise, so consecutive tokens and
    consecutive layers stay correlated.
    """
    cfg = model.cfg
    rng = np.random.default_rng(cfg.seed + 1 if seed is None else seed)
    d = cfg.model_dim
    encoder_layers = [(Stage.ENCODER, i) for i in range(cfg.encoder_moe_layers)]
    decoder_layers = [(Stage.DECODER, i) for i in range(cfg.decoder_moe_layers)]

    h, encoder_paths = run_layers(model, None, rms_norm(rng.standard_normal((n_samples, d))), encoder_layers)
    tokens = [[] for _ in range(n_samples)]
    for _ in range(tokens_per_sample):
        h, paths = run_layers(model, None, rms_norm(h + rng.standard_normal((n_samples, d))), decoder_layers)
        for s in range(n_samples):
            tokens[s].append(paths[s])
    samples = [make_sample(encoder_paths[s], tokens[s]) for s in range(n_samples)]
    logger.debug('emitted %d samples x %d tokens', n_samples, tokens_per_sample)
    return TokenTrace.for_config(cfg, samples)
