# This file contains the offline bitwidth planner: per-expert importance
# heatmap, uniform bitwidth sweep, bound bracketing and the bisection on the
# number of low-bitwidth experts.

import logging
from dataclasses import dataclass
from typing import Mapping, Optional

from django.conf import settings

from .exceptions import PlanError
from .tasks import accuracy_cache_key
from .topology import (
    BITWIDTH_LADDER,
    Bitwidth,
    ExpertRef,
    MoEConfig,
    all_experts,
    expert_size_bytes,
    non_expert_param_bytes,
)
from .toymodel import ProbeSet, QuantPlan, ToyMoEModel, evaluate_agreement
from .utils import StepLog, cache_get, cache_set, dump_json, load_json

logger = logging.getLogger(__name__)

NON_EXPERT_LADDER = (Bitwidth.INT4, Bitwidth.INT8, Bitwidth.FP16, Bitwidth.FP32)
PLAN_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ImportanceHeatmap:
    losses: Mapping
    low: Bitwidth
    high: Bitwidth

    def ranking(self) -> list:
        """Experts from least to most important; negative losses count as 0."""
        return sorted(self.losses, key=lambda ref: (max(self.losses[ref], 0.0), ref))

    def to_dict(self) -> dict:
        return {
            'probe_low': self.low.name,
            'probe_high': self.high.name,
            'losses': {ref.key(): loss for ref, loss in sorted(self.losses.items())},
        }


@dataclass(frozen=True)
class SweepResult:
    losses: Mapping

    def loss(self, b: Bitwidth) -> float:
        return self.losses[b]

    def to_dict(self) -> dict:
        return {b.name: loss for b, loss in sorted(self.losses.items(), key=lambda item: item[0].bits)}


# Helper: accuracy measurement with the plan-accuracy cache
def measure_accuracy(model: ToyMoEModel, probes: ProbeSet, plan: QuantPlan) -> float:
    key = accuracy_cache_key(model.digest, probes.digest, plan.digest())
    cached = cache_get(key)
    if cached is not None:
        return cached
    accuracy = evaluate_agreement(model, plan, probes)
    cache_set(key, accuracy)
    return accuracy


def measured_loss(model: ToyMoEModel, probes: ProbeSet, plan: QuantPlan) -> float:
    return 1.0 - measure_accuracy(model, probes, plan)


def _dispatch_celery(model, probes, plans):
    from celery import group

    from .tasks import measure_plan_task

    cfg_dict = model.cfg.to_dict()
    job = group(
        measure_plan_task.s(cfg_dict, plan.to_dict(), len(probes.inputs), probes.seed) for plan in plans
    )
    return job.apply_async().get()


def measure_many(model: ToyMoEModel, probes: ProbeSet, plans: list) -> list:
    """Measure several plans, fanning out to Celery when the planner dispatch setting asks for it."""
    if getattr(settings, 'EDGEMOE_PLANNER_DISPATCH', 'local') == 'celery' and plans:
        try:
            return [float(a) for a in _dispatch_celery(model, probes, plans)]
        except Exception as e:
            # broker or worker unavailable; fall back to in-process evaluation
            logger.warning('celery dispatch failed (%s); measuring in-process', e)
    return [measure_accuracy(model, probes, plan) for plan in plans]


def profile_importance(model: ToyMoEModel, probes: ProbeSet, low: Bitwidth = Bitwidth.INT2,
                       high: Bitwidth = Bitwidth.INT4) -> ImportanceHeatmap:
    cfg = model.cfg
    base_plan = QuantPlan.uniform(cfg, high)
    refs = all_experts(cfg)
    single = []
    for ref in refs:
        bitwidths = dict(base_plan.bitwidths)
        bitwidths[ref] = low
        single.append(QuantPlan(cfg.digest(), bitwidths, Bitwidth.FP32, 1, (low, high)))
    base, *accuracies = measure_many(model, probes, [base_plan] + single)
    return ImportanceHeatmap({ref: base - acc for ref, acc in zip(refs, accuracies)}, low, high)


def uniform_sweep(model: ToyMoEModel, probes: ProbeSet, bitwidths=BITWIDTH_LADDER) -> SweepResult:
    plans = [QuantPlan.uniform(model.cfg, b) for b in bitwidths]
    accuracies = measure_many(model, probes, plans)
    return SweepResult({b: 1.0 - acc for b, acc in zip(bitwidths, accuracies)})


def bracket_bounds(sweep: SweepResult, tolerable_loss: float) -> tuple:
    """The adjacent ladder pair (low, high) with loss(low) > P >= loss(high)."""
    rungs = [b for b in BITWIDTH_LADDER if b in sweep.losses]
    for low, high in zip(rungs, rungs[1:]):
        if sweep.loss(low) > tolerable_loss >= sweep.loss(high):
            return low, high
    return Bitwidth.INT8, Bitwidth.FP32


def plan_for_k(cfg: MoEConfig, heatmap: ImportanceHeatmap, k: int, low: Bitwidth, high: Bitwidth,
               non_expert: Bitwidth = Bitwidth.FP32) -> QuantPlan:
    return QuantPlan.from_order(cfg, heatmap.ranking(), k, low, high, non_expert)


def select_bitwidths(model: ToyMoEModel, probes: ProbeSet, heatmap: ImportanceHeatmap, sweep: SweepResult,
                     tolerable_loss: float, steps: Optional[StepLog] = None) -> QuantPlan:
    if not 0.0 <= tolerable_loss < 1.0:
        raise PlanError(f'tolerable loss {tolerable_loss} outside [0, 1)')
    steps = steps if steps is not None else StepLog()
    cfg = model.cfg
    total = cfg.total_experts
    P = tolerable_loss

    if Bitwidth.INT2 in sweep.losses and sweep.loss(Bitwidth.INT2) <= P:
        low, high, k = Bitwidth.INT2, Bitwidth.INT4, total
        steps.info('uniform INT2 loss %.4f already within %.4f; all experts at INT2', sweep.loss(low), P)
    else:
        low, high = bracket_bounds(sweep, P)
        steps.info('bounds %s/%s (uniform losses %.4f / %.4f)', low.name, high.name,
                   sweep.losses.get(low, float('nan')), sweep.losses.get(high, float('nan')))
        lo, hi = 0, total
        while hi - lo > 1:
            mid = (lo + hi) // 2
            loss = measured_loss(model, probes, plan_for_k(cfg, heatmap, mid, low, high))
            if loss <= P:
                lo = mid
            else:
                hi = mid
            logger.debug('bisection K=%d loss=%.4f -> [%d, %d]', mid, loss, lo, hi)
        k = lo
        steps.info('bisection settled on K=%d of %d experts at %s', k, total, low.name)

    plan = plan_for_k(cfg, heatmap, k, low, high)
    non_expert = Bitwidth.FP32
    for candidate in NON_EXPERT_LADDER:
        uniform_high = QuantPlan.uniform(cfg, high, candidate)
        if measured_loss(model, probes, uniform_high) <= P and \
                measured_loss(model, probes, plan.with_non_expert(candidate)) <= P:
            non_expert = candidate
            break
    plan = plan.with_non_expert(non_expert)
    loss = measured_loss(model, probes, plan)
    steps.info('non-expert weights at %s; measured loss %.4f', non_expert.name, loss)
    return QuantPlan(plan.config_digest, plan.bitwidths, plan.non_expert_bitwidth, plan.low_bit_count,
                     plan.bounds, tolerable_loss=P, measured_loss=loss)


def plan_storage_breakdown(plan: QuantPlan, cfg: MoEConfig) -> dict:
    expert_bytes = sum(expert_size_bytes(cfg, b) for b in plan.bitwidths.values())
    non_expert = non_expert_param_bytes(cfg, plan.non_expert_bitwidth)
    return {'expert_bytes': expert_bytes, 'non_expert_bytes': non_expert, 'total_bytes': expert_bytes + non_expert}


def plan_storage_bytes(plan: QuantPlan, cfg: MoEConfig) -> int:
    return plan_storage_breakdown(plan, cfg)['total_bytes']


def storage_report(plan: QuantPlan, cfg: MoEConfig) -> dict:
    """Model size under the IO-free (FP32), INT4-expert and planned layouts."""
    io_free = plan_storage_bytes(QuantPlan.uniform(cfg, Bitwidth.FP32), cfg)
    io_qexp = plan_storage_bytes(QuantPlan.uniform(cfg, Bitwidth.INT4), cfg)
    planned = plan_storage_bytes(plan, cfg)
    return {
        'io_free_bytes': io_free,
        'io_qexp_bytes': io_qexp,
        'plan_bytes': planned,
        'plan_vs_io_free': planned / io_free,
    }


def plan_report(plan: QuantPlan, cfg: MoEConfig, sweep: Optional[SweepResult] = None, steps=None) -> dict:
    report = {'version': PLAN_FORMAT_VERSION, 'plan': plan.to_dict(), 'storage': plan_storage_breakdown(plan, cfg),
              'storage_comparison': storage_report(plan, cfg)}
    if sweep is not None:
        report['uniform_sweep'] = sweep.to_dict()
    if steps is not None:
        report['steps'] = list(steps)
    return report


def save_plan(plan: QuantPlan, cfg: MoEConfig, path, timestamp=True, **extra) -> None:
    dump_json(plan_report(plan, cfg, **extra), path, timestamp=timestamp)


def load_plan(path, cfg: Optional[MoEConfig] = None) -> QuantPlan:
    data = load_json(path)
    if not isinstance(data, dict) or data.get('version') != PLAN_FORMAT_VERSION:
        raise PlanError(f'{path}: unsupported plan file version')
    plan = QuantPlan.from_dict(data.get('plan') or {})
    if cfg is not None:
        plan.check_against(cfg)
    return plan


def save_heatmap(heatmap: ImportanceHeatmap, path, timestamp=True) -> None:
    dump_json(heatmap.to_dict(), path, timestamp=timestamp)


def heatmap_from_dict(data: dict) -> ImportanceHeatmap:
    return ImportanceHeatmap(
        {ExpertRef.from_key(k): float(v) for k, v in data['losses'].items()},
        Bitwidth.parse(data['probe_low']),
        Bitwidth.parse(data['probe_high']),
    )
