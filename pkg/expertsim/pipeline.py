# This file contains the discrete-event simulator of the expert loading and
# compute pipeline. One simpy Resource models the compute unit, another the
# storage I/O channel; a loader process drains a FIFO Store of load jobs.

import csv
import enum
import json
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import simpy
from django.conf import settings

from .buffer import ExpertBuffer, Policy, init_buffer
from .exceptions import BudgetInfeasible, ConfigError, DigestMismatchError, PlanError
from .predictor import HistoryKey, preload_candidates
from .topology import (
    Bitwidth,
    ExpertRef,
    MoEConfig,
    Stage,
    TokenTrace,
    all_experts,
    expert_size_bytes,
    non_expert_param_bytes,
)
from .toymodel import QuantPlan
from .utils import StepLog

logger = logging.getLogger(__name__)

# Load cost presets
COST_PRESETS_PATH = os.path.join(os.path.dirname(__file__), 'data', 'cost_presets.json')
try:
    with open(COST_PRESETS_PATH, 'r', encoding='utf-8') as f:
        COST_PRESETS = json.load(f)
except Exception:
    COST_PRESETS = {}


@dataclass(frozen=True)
class CostModel:
    io_bandwidth: float
    io_request_latency: float = 0.0
    attn_compute: float = 0.0
    expert_compute: float = 0.0
    dequant_factor: float = 0.027
    non_expert_resident_bytes: Optional[int] = None
    name: str = 'custom'

    def __post_init__(self):
        problems = []
        if not self.io_bandwidth > 0:
            problems.append('io_bandwidth must be > 0')
        for name in ('io_request_latency', 'attn_compute', 'expert_compute', 'dequant_factor'):
            if getattr(self, name) < 0:
                problems.append(f'{name} must be ≥ 0')
        if self.non_expert_resident_bytes is not None and self.non_expert_resident_bytes < 0:
            problems.append('non_expert_resident_bytes must be ≥ 0')
        if problems:
            raise ConfigError(problems)

    @classmethod
    def preset(cls, name: Optional[str] = None, **overrides) -> 'CostModel':
        name = name or settings.EDGEMOE_DEFAULT_COST
        if name not in COST_PRESETS:
            raise ConfigError([f'unknown cost preset {name!r}; known: {", ".join(sorted(COST_PRESETS))}'])
        values = {k: v for k, v in COST_PRESETS[name].items() if k != 'description'}
        values.setdefault('dequant_factor', settings.EDGEMOE_DEQUANT_FACTOR)
        values.update(overrides)
        return cls(name=name, **values)

    def load_seconds(self, size_bytes: int) -> float:
        return self.io_request_latency + size_bytes / self.io_bandwidth

    def dequant_seconds(self, size_bytes: int, b: Bitwidth) -> float:
        return self.dequant_factor * self.load_seconds(size_bytes) if b.bits < 32 else 0.0

    def calibrated(self, cfg: MoEConfig, ratio: float) -> 'CostModel':
        """Rescale compute so on-demand FP32 decoding takes ``ratio`` x the IO-free time."""
        if ratio <= 1:
            raise ConfigError(['load/compute ratio must be > 1'])
        k = cfg.routing_k
        load = self.load_seconds(expert_size_bytes(cfg, Bitwidth.FP32))
        target = k * load / (ratio - 1)
        current = self.attn_compute + k * self.expert_compute
        if current > 0:
            factor = target / current
            return replace(self, attn_compute=self.attn_compute * factor, expert_compute=self.expert_compute * factor)
        return replace(self, attn_compute=target / 2, expert_compute=target / (2 * k))


class EngineKind(str, enum.Enum):
    IO_FREE = 'io-free'
    IO_EXP = 'io-exp'
    IO_QEXP = 'io-qexp'
    EDGEMOE = 'edgemoe'


@dataclass(frozen=True)
class EngineSpec:
    kind: EngineKind
    bitwidth: Optional[Bitwidth] = None
    plan: Optional[QuantPlan] = None
    profile: object = None
    preload_m: int = 1
    policy: str = Policy.EDGEMOE.value
    distance: Optional[str] = None
    seed: int = 0
    # (history key, m) -> expert refs; replaces the profile lookup when set
    predictor: Optional[Callable] = None

    @classmethod
    def io_free(cls) -> 'EngineSpec':
        return cls(EngineKind.IO_FREE, bitwidth=Bitwidth.FP32)

    @classmethod
    def io_exp(cls, bitwidth: Bitwidth = Bitwidth.FP32, plan: Optional[QuantPlan] = None) -> 'EngineSpec':
        return cls(EngineKind.IO_EXP, bitwidth=None if plan is not None else bitwidth, plan=plan)

    @classmethod
    def io_qexp(cls, bitwidth: Bitwidth = Bitwidth.INT4) -> 'EngineSpec':
        return cls(EngineKind.IO_QEXP, bitwidth=bitwidth)

    @classmethod
    def edgemoe(cls, plan: QuantPlan, profile=None, preload_m: int = 1, **kwargs) -> 'EngineSpec':
        return cls(EngineKind.EDGEMOE, plan=plan, profile=profile, preload_m=preload_m, **kwargs)

    @property
    def name(self) -> str:
        if self.kind in (EngineKind.IO_EXP, EngineKind.IO_QEXP):
            return f'{self.kind.value}[{self.bitwidth.name if self.plan is None else "plan"}]'
        return self.kind.value

    def bitwidth_for(self, ref: ExpertRef) -> Bitwidth:
        if self.plan is not None:
            return self.plan.bitwidth_for(ref)
        return self.bitwidth or Bitwidth.FP32


@dataclass(frozen=True)
class EventRecord:
    time: float
    resource: str
    event: str
    expert: str
    duration: float


@dataclass
class SimReport:
    engine: str
    tpot_seconds: float
    per_sample_seconds: list
    hit_ratio: float
    prediction_accuracy: Optional[float]
    io_stall_seconds: float
    peak_resident_bytes: int
    budget_bytes: Optional[int]
    tokens: int
    samples: int
    total_seconds: float
    compute_busy_seconds: float
    decode_seconds: float
    demand_loads: int
    preloads_issued: int
    preloads_used: int
    bytes_loaded: int
    token_seconds: list = field(default_factory=list, repr=False)
    events: list = field(default_factory=list, repr=False)
    steps: list = field(default_factory=list)

    def to_dict(self) -> dict:
        token = np.asarray(self.token_seconds) if self.token_seconds else np.zeros(1)
        return {
            'engine': self.engine,
            'tpot_seconds': self.tpot_seconds,
            'token_seconds_p50': float(np.percentile(token, 50)),
            'token_seconds_p95': float(np.percentile(token, 95)),
            'per_sample_seconds': self.per_sample_seconds,
            'hit_ratio': self.hit_ratio,
            'prediction_accuracy': self.prediction_accuracy,
            'io_stall_seconds': self.io_stall_seconds,
            'peak_resident_bytes': self.peak_resident_bytes,
            'budget_bytes': self.budget_bytes,
            'tokens': self.tokens,
            'samples': self.samples,
            'total_seconds': self.total_seconds,
            'compute_busy_seconds': self.compute_busy_seconds,
            'decode_seconds': self.decode_seconds,
            'demand_loads': self.demand_loads,
            'preloads_issued': self.preloads_issued,
            'preloads_used': self.preloads_used,
            'bytes_loaded': self.bytes_loaded,
            'steps': list(self.steps),
        }


@dataclass
class LoadJob:
    ref: ExpertRef
    kind: str
    load_seconds: float
    arrived: simpy.Event


def required_budget_bytes(cfg: MoEConfig, engine: EngineSpec, non_expert_bytes: int) -> int:
    """Smallest budget holding the non-expert weights plus one layer's worth of the largest experts."""
    largest = max(expert_size_bytes(cfg, engine.bitwidth_for(ref)) for ref in all_experts(cfg))
    return non_expert_bytes + cfg.routing_k * largest


def non_expert_bytes_for(cfg: MoEConfig, engine: EngineSpec, cost: CostModel) -> int:
    if cost.non_expert_resident_bytes is not None:
        return cost.non_expert_resident_bytes
    b = engine.plan.non_expert_bitwidth if engine.plan is not None else Bitwidth.FP32
    return non_expert_param_bytes(cfg, b)


class PipelineSimulator:
    """Replays a trace through one engine and reports latency and memory.

    Demand loads are queued as soon as a layer's router resolves. Preloads for
    the next MoE layer follow them on the same FIFO loader and are admitted
    only when they would finish before that layer's router resolves and the
    buffer can make room without touching pinned experts. A loaded quantized
    expert is dequantized on the compute unit right before its first use.
    """

    def __init__(self, trace: TokenTrace, cfg: MoEConfig, engine: EngineSpec, cost: CostModel,
                 budget_bytes: Optional[int] = None, record_events: bool = False):
        trace.check_against(cfg)
        self.trace, self.cfg, self.engine, self.cost = trace, cfg, engine, cost
        self.record_events = record_events
        self.steps = StepLog()
        if engine.plan is not None:
            engine.plan.check_against(cfg)
        if engine.kind == EngineKind.EDGEMOE:
            if engine.plan is None or (engine.profile is None and engine.predictor is None):
                raise PlanError('the edgemoe engine needs a quantization plan and an activation profile')
            if engine.profile is not None and engine.profile.config_digest != cfg.digest():
                raise DigestMismatchError('profile', cfg.digest(), engine.profile.config_digest)

        self.non_expert_bytes = non_expert_bytes_for(cfg, engine, cost)
        self.budget_bytes = budget_bytes
        self.buffer = None
        if engine.kind != EngineKind.IO_FREE:
            required = required_budget_bytes(cfg, engine, self.non_expert_bytes)
            if budget_bytes is None:
                if engine.kind == EngineKind.EDGEMOE:
                    raise BudgetInfeasible('budget infeasible: the edgemoe engine needs a memory budget')
                self.budget_bytes = required
            elif budget_bytes < required:
                raise BudgetInfeasible(
                    f'budget infeasible: {budget_bytes} bytes < {required} bytes '
                    f'(non-expert {self.non_expert_bytes} + {cfg.routing_k} largest experts)')
        if engine.kind == EngineKind.EDGEMOE:
            self.buffer = ExpertBuffer.for_config(
                cfg, self.budget_bytes - self.non_expert_bytes,
                policy=engine.policy, seed=engine.seed, distance=engine.distance)
            if engine.profile is not None:
                self.buffer.frequencies.seed(engine.profile.marginal_counts)
        self._sizes = {ref: expert_size_bytes(cfg, engine.bitwidth_for(ref)) for ref in all_experts(cfg)}
        self.history = engine.profile.history if engine.profile is not None else settings.EDGEMOE_PREDICTOR_HISTORY

    # Helper: event log
    def _log(self, start, resource, event, refs, duration):
        if self.record_events:
            label = ' '.join(ref.key() for ref in refs) if refs else ''
            self.events.append(EventRecord(start, resource, event, label, duration))

    def run(self) -> SimReport:
        env = self.env = simpy.Environment()
        self.compute = simpy.Resource(env, capacity=1)
        self.io = simpy.Resource(env, capacity=1)
        self.load_queue = simpy.Store(env)
        self.events = []
        self.token_seconds = []
        self.per_sample_seconds = []
        self.compute_busy = 0.0
        self.io_stall = 0.0
        self.io_free_at = 0.0
        self.peak_scratch = 0
        self.demand_loads = self.preloads_issued = self.preloads_used = self.preloads_skipped = 0
        self.bytes_loaded = 0
        self.scratch_misses = 0
        self.predicted_hits = self.predicted_total = 0
        self._pending_prediction = None
        self._inflight = {}
        self._preloaded = set()
        # loaded experts whose dequantization has not been charged yet
        self._undequantized = {}

        if self.buffer is not None:
            init_buffer(self.buffer, self.cfg, self.engine.profile, lambda ref: self._sizes[ref])
            self.steps.info('buffer warmed with %d experts', len(self.buffer.resident))
        if self.engine.kind != EngineKind.IO_FREE:
            env.process(self._loader())
        main = env.process(self._run_trace())
        env.run(until=main)
        return self._report(env.now)

    def _loader(self):
        while True:
            job = yield self.load_queue.get()
            with self.io.request() as req:
                yield req
                start = self.env.now
                yield self.env.timeout(job.load_seconds)
                self._log(start, 'io', job.kind, [job.ref], job.load_seconds)
            job.arrived.succeed()

    def _run_trace(self):
        env = self.env
        for sample in self.trace.samples:
            sample_start = env.now
            n_enc = len(sample.encoder_steps)
            for i, step in enumerate(sample.encoder_steps):
                upcoming = HistoryKey(0) if i == n_enc - 1 and sample.decode_tokens else None
                yield from self._layer(Stage.ENCODER, i, step, upcoming)
            for t, token in enumerate(sample.decode_tokens):
                token_start = env.now
                for layer, step in enumerate(token):
                    if layer + 1 < len(token):
                        upcoming = HistoryKey.from_token(layer + 1, token, self.history)
                    else:
                        upcoming = HistoryKey(0) if t + 1 < len(sample.decode_tokens) else None
                    yield from self._layer(Stage.DECODER, layer, step, upcoming)
                self.token_seconds.append(env.now - token_start)
            self.per_sample_seconds.append(env.now - sample_start)

    def _compute(self, event, seconds, refs=None):
        with self.compute.request() as req:
            yield req
            start = self.env.now
            yield self.env.timeout(seconds)
        self.compute_busy += seconds
        self._log(start, 'compute', event, refs, seconds)

    def _layer(self, stage, layer, step, upcoming):
        yield from self._compute('attn', self.cost.attn_compute)
        router_at = self.env.now
        refs = [ExpertRef(stage, layer, j) for j in step]
        if stage == Stage.DECODER:
            self._score_prediction(refs)
        if self.engine.kind == EngineKind.EDGEMOE:
            waits, ready_at = self._acquire_buffered(stage, layer, refs, router_at)
            if upcoming is not None:
                dequant = sum(self._undequantized.get(ref, 0.0) for ref in refs)
                deadline = ((ready_at + dequant) + len(refs) * self.cost.expert_compute) + self.cost.attn_compute
                self._preload(upcoming, deadline)
        elif self.engine.kind == EngineKind.IO_FREE:
            waits = []
        else:
            waits = self._acquire_scratch(refs)
        if waits:
            yield self.env.all_of(waits)
        self.io_stall += self.env.now - router_at
        dequant = [ref for ref in refs if ref in self._undequantized]
        if dequant:
            seconds = sum(self._undequantized.pop(ref) for ref in dequant)
            if seconds > 0:
                yield from self._compute('dequant', seconds, dequant)
        yield from self._compute('expert', len(refs) * self.cost.expert_compute, refs)

    def _score_prediction(self, refs):
        if self._pending_prediction is None:
            return
        self.predicted_hits += len(set(refs) & self._pending_prediction)
        self.predicted_total += len(refs)
        self._pending_prediction = None

    def _enqueue(self, ref, kind):
        size = self._sizes[ref]
        load = self.cost.load_seconds(size)
        finish = self._finish_time(load)
        self.io_free_at = finish
        arrived = self.env.event()
        self.load_queue.put(LoadJob(ref, kind, load, arrived))
        self._undequantized[ref] = self.cost.dequant_seconds(size, self.engine.bitwidth_for(ref))
        self._inflight[ref] = (arrived, finish)
        self.bytes_loaded += size
        if kind == 'demand':
            self.demand_loads += 1
        return arrived, finish

    def _finish_time(self, load):
        # same float operation as the loader's timeout
        return max(self.env.now, self.io_free_at) + load

    def _acquire_scratch(self, refs):
        self.scratch_misses += len(refs)
        scratch = sum(self._sizes[ref] for ref in refs)
        self.peak_scratch = max(self.peak_scratch, scratch)
        return [self._enqueue(ref, 'demand')[0] for ref in refs]

    def _acquire_buffered(self, stage, layer, refs, router_at):
        buf = self.buffer
        if stage == Stage.DECODER:
            buf.set_layer(layer)
        buf.unpin_all()
        for ref in refs:
            if ref in buf:
                buf.pin(ref)
        waits, ready_at = [], router_at
        for ref in refs:
            if buf.access(ref):
                arrived, finish = self._inflight.get(ref, (None, router_at))
                if arrived is not None and not arrived.processed:
                    waits.append(arrived)
                    ready_at = max(ready_at, finish)
                if ref in self._preloaded:
                    self.preloads_used += 1
                    self._preloaded.discard(ref)
                continue
            self._evicted(buf.insert(ref, self._sizes[ref]))
            buf.pin(ref)
            arrived, finish = self._enqueue(ref, 'demand')
            waits.append(arrived)
            ready_at = max(ready_at, finish)
        return waits, ready_at

    def _evicted(self, victims):
        for victim in victims:
            self._preloaded.discard(victim)
            self._undequantized.pop(victim, None)

    def _candidates(self, upcoming):
        if self.engine.predictor is not None:
            return list(self.engine.predictor(upcoming, self.engine.preload_m))
        return preload_candidates(self.engine.profile, upcoming, self.engine.preload_m)

    def _preload(self, upcoming, deadline):
        buf = self.buffer
        candidates = self._candidates(upcoming)
        self._pending_prediction = set(candidates)
        for ref in candidates:
            if ref in buf:
                buf.pin(ref)
                continue
            size = self._sizes[ref]
            load = self.cost.load_seconds(size)
            finish = self._finish_time(load)
            if finish > deadline or not buf.can_insert(size):
                self.preloads_skipped += 1
                continue
            self._evicted(buf.insert(ref, size))
            buf.pin(ref)
            self._enqueue(ref, 'preload')
            self._preloaded.add(ref)
            self.preloads_issued += 1

    def _report(self, total_seconds) -> SimReport:
        engine = self.engine
        tokens = len(self.token_seconds)
        decode = float(sum(self.token_seconds))
        if engine.kind == EngineKind.EDGEMOE:
            hit_ratio = self.buffer.hit_ratio
            peak = self.non_expert_bytes + self.buffer.peak_bytes
        elif engine.kind == EngineKind.IO_FREE:
            hit_ratio = 1.0
            peak = non_expert_param_bytes(self.cfg, Bitwidth.FP32) + sum(self._sizes.values())
        else:
            hit_ratio = 0.0
            peak = self.non_expert_bytes + self.peak_scratch
        accuracy = self.predicted_hits / self.predicted_total if self.predicted_total else None
        if engine.kind == EngineKind.EDGEMOE:
            self.steps.info('%d demand loads, %d preloads issued (%d used, %d skipped)', self.demand_loads,
                            self.preloads_issued, self.preloads_used, self.preloads_skipped)
        if self.io_stall > 0:
            self.steps.info('compute stalled %.6fs waiting for expert loads', self.io_stall)
        return SimReport(
            engine=engine.name,
            tpot_seconds=decode / tokens if tokens else 0.0,
            per_sample_seconds=self.per_sample_seconds,
            hit_ratio=hit_ratio,
            prediction_accuracy=accuracy,
            io_stall_seconds=self.io_stall,
            peak_resident_bytes=peak,
            budget_bytes=None if engine.kind == EngineKind.IO_FREE else self.budget_bytes,
            tokens=tokens,
            samples=len(self.trace.samples),
            total_seconds=total_seconds,
            compute_busy_seconds=self.compute_busy,
            decode_seconds=decode,
            demand_loads=self.demand_loads,
            preloads_issued=self.preloads_issued,
            preloads_used=self.preloads_used,
            bytes_loaded=self.bytes_loaded,
            token_seconds=self.token_seconds,
            events=self.events,
            steps=self.steps,
        )


def simulate(trace: TokenTrace, cfg: MoEConfig, engine: EngineSpec, cost: CostModel,
             budget_bytes: Optional[int] = None, record_events: bool = False) -> SimReport:
    report = PipelineSimulator(trace, cfg, engine, cost, budget_bytes, record_events).run()
    logger.info('%s: tpot %.3e s over %d tokens, hit ratio %.3f', report.engine, report.tpot_seconds,
                report.tokens, report.hit_ratio)
    return report


def compare_engines(trace: TokenTrace, cfg: MoEConfig, engines, cost: CostModel,
                    budget_bytes: Optional[int] = None) -> dict:
    """Simulate every engine on the same inputs; speedups are relative TPOT.

    A budget that cannot hold the non-expert weights, or that leaves any
    budgeted engine infeasible, fails the whole comparison.
    """
    if budget_bytes is not None:
        for engine in engines:
            non_expert = non_expert_bytes_for(cfg, engine, cost)
            if budget_bytes < non_expert:
                raise BudgetInfeasible(
                    f'budget infeasible: {budget_bytes} bytes < {non_expert} non-expert bytes ({engine.name})')
    reports = [simulate(trace, cfg, engine, cost, budget_bytes) for engine in engines]

    def baseline(prefix):
        return next((r.tpot_seconds for r in reports if r.engine.startswith(prefix)), None)

    io_exp, io_free = baseline(EngineKind.IO_EXP.value), baseline(EngineKind.IO_FREE.value)
    rows = []
    for report in reports:
        row = report.to_dict()
        row['speedup_vs_io_exp'] = io_exp / report.tpot_seconds if io_exp and report.tpot_seconds else None
        row['speedup_vs_io_free'] = io_free / report.tpot_seconds if io_free and report.tpot_seconds else None
        rows.append(row)
    return {'budget_bytes': budget_bytes, 'engines': rows}


def check_event_log(events) -> list:
    """Overlapping intervals on a single resource, as human-readable violations."""
    violations = []
    by_resource = {}
    for record in events:
        by_resource.setdefault(record.resource, []).append(record)
    for resource, records in sorted(by_resource.items()):
        records.sort(key=lambda r: (r.time, r.time + r.duration))
        busy_until = float('-inf')
        for r in records:
            if r.time < busy_until - 1e-12:
                violations.append(f'{resource}: {r.event} {r.expert} at {r.time:.9f} overlaps until {busy_until:.9f}')
            busy_until = max(busy_until, r.time + r.duration)
    return violations


def write_event_log(events, path) -> None:
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(['time', 'resource', 'event', 'expert', 'duration'])
        for r in sorted(events, key=lambda r: (r.time, r.resource)):
            writer.writerow([f'{r.time:.12g}', r.resource, r.event, r.expert, f'{r.duration:.12g}'])
