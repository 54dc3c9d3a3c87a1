# This file contains the byte-budgeted expert buffer: residency, pinning,
# hit/miss accounting, the frequency/layer-distance eviction score and the
# classic policies it is compared against.

import enum
import logging
from typing import Callable, Optional, Union

import numpy as np
from django.conf import settings

from .exceptions import CapacityError, EvictionDeadlock
from .topology import Bitwidth, ExpertRef, MoEConfig, Stage, TokenTrace, expert_size_bytes, non_expert_param_bytes
from .utils import StepLog

logger = logging.getLogger(__name__)


class Policy(str, enum.Enum):
    EDGEMOE = 'edgemoe'
    LRU = 'lru'
    LFU = 'lfu'
    FIFO = 'fifo'
    RANDOM = 'random'


DISTANCES = ('printed', 'forward')


def eviction_score(f: float, i: int, current: int, S: int, distance: str = 'printed') -> float:
    """-f / d with d the cyclic distance between layer i and the current layer; higher is evicted sooner.

    'printed' uses d = (S - i + I) mod S, 'forward' uses d = (i - I) mod S; d = 0 maps to S.
    """
    if distance == 'forward':
        d = (i - current) % S
    else:
        d = (S - i + current) % S
    if d == 0:
        d = S
    return -f / d if f else 0.0


class FrequencyTable:
    """Activation counts for decoder experts; encoder experts always read 0."""

    def __init__(self, decoder_moe_layers: int, experts_per_layer: int):
        self.counts = np.zeros((decoder_moe_layers, experts_per_layer), dtype=np.float64)

    def get(self, ref: ExpertRef) -> float:
        if ref.stage == Stage.ENCODER:
            return 0.0
        return float(self.counts[ref.moe_layer, ref.expert])

    def bump(self, ref: ExpertRef) -> None:
        if ref.stage == Stage.DECODER:
            self.counts[ref.moe_layer, ref.expert] += 1

    def seed(self, marginal_counts) -> None:
        self.counts += np.asarray(marginal_counts, dtype=np.float64)


class ExpertBuffer:
    """Expert cache holding at most ``capacity_bytes`` of expert weights.

    Pinned experts (the current layer's and in-flight preloads) are never
    chosen as eviction victims.
    """

    def __init__(self, capacity_bytes: int, decoder_moe_layers: int, experts_per_layer: int,
                 policy: Union[Policy, str] = Policy.EDGEMOE, seed: int = 0, distance: Optional[str] = None):
        if capacity_bytes < 0:
            raise CapacityError('capacity must be ≥ 0 bytes')
        self.capacity_bytes = int(capacity_bytes)
        self.policy = Policy(policy)
        self.distance = distance or settings.EDGEMOE_EVICTION_DISTANCE
        if self.distance not in DISTANCES:
            raise ValueError(f'unknown distance {self.distance!r}')
        self.decoder_moe_layers = decoder_moe_layers
        self.frequencies = FrequencyTable(decoder_moe_layers, experts_per_layer)
        self.resident = {}
        self.pinned = set()
        self.used_bytes = 0
        self.peak_bytes = 0
        self.current_layer = 0
        self.hits = 0
        self.misses = 0
        self.evictions = []
        self._clock = 0
        self._last_access = {}
        self._access_count = {}
        self._inserted_at = {}
        self._rng = np.random.default_rng(seed)

    @classmethod
    def for_config(cls, cfg: MoEConfig, capacity_bytes: int, **kwargs) -> 'ExpertBuffer':
        return cls(capacity_bytes, cfg.decoder_moe_layers, cfg.experts_per_layer, **kwargs)

    @property
    def free_bytes(self) -> int:
        return self.capacity_bytes - self.used_bytes

    @property
    def accesses(self) -> int:
        return self.hits + self.misses

    @property
    def hit_ratio(self) -> float:
        return self.hits / self.accesses if self.accesses else 0.0

    def __contains__(self, ref) -> bool:
        return ref in self.resident

    def _tick(self) -> int:
        self._clock += 1
        return self._clock

    def set_layer(self, layer: int) -> None:
        self.current_layer = layer

    def access(self, ref: ExpertRef) -> bool:
        """Record an access; True on a hit. Never inserts."""
        self.frequencies.bump(ref)
        self._access_count[ref] = self._access_count.get(ref, 0) + 1
        if ref in self.resident:
            self.hits += 1
            self._last_access[ref] = self._tick()
            return True
        self.misses += 1
        return False

    def pin(self, ref: ExpertRef) -> None:
        self.pinned.add(ref)

    def unpin_all(self) -> None:
        self.pinned.clear()

    def score(self, ref: ExpertRef) -> float:
        """Policy score of a resident expert; the maximum is evicted first."""
        if self.policy == Policy.EDGEMOE:
            return eviction_score(self.frequencies.get(ref), ref.moe_layer, self.current_layer,
                                  self.decoder_moe_layers, self.distance)
        if self.policy == Policy.LRU:
            return -self._last_access[ref]
        if self.policy == Policy.LFU:
            return -self._access_count.get(ref, 0)
        if self.policy == Policy.FIFO:
            return -self._inserted_at[ref]
        return 0.0

    def candidates(self) -> list:
        return sorted(ref for ref in self.resident if ref not in self.pinned)

    def choose_victim(self) -> ExpertRef:
        candidates = self.candidates()
        if not candidates:
            raise EvictionDeadlock('eviction deadlock: every resident expert is pinned')
        if self.policy == Policy.RANDOM:
            return candidates[int(self._rng.integers(len(candidates)))]
        # max score, ties to the smallest (stage, layer, expert)
        return min(candidates, key=lambda ref: (-self.score(ref), ref))

    def evictable_bytes(self) -> int:
        return sum(size for ref, size in self.resident.items() if ref not in self.pinned)

    def can_insert(self, size_bytes: int) -> bool:
        return size_bytes <= self.free_bytes + self.evictable_bytes()

    def evict(self, ref: ExpertRef) -> None:
        size = self.resident.pop(ref)
        self.used_bytes -= size
        self.pinned.discard(ref)
        self._last_access.pop(ref, None)
        self._inserted_at.pop(ref, None)
        self.evictions.append(ref)

    def insert(self, ref: ExpertRef, size_bytes: int) -> list:
        """Make ``ref`` resident, evicting by policy until it fits; returns the evicted experts."""
        if size_bytes > self.capacity_bytes:
            raise CapacityError(f'{ref} needs {size_bytes} bytes, capacity is {self.capacity_bytes}')
        if ref in self.resident:
            raise CapacityError(f'{ref} is already resident')
        evicted = []
        while self.free_bytes < size_bytes:
            victim = self.choose_victim()
            self.evict(victim)
            evicted.append(victim)
        self.resident[ref] = size_bytes
        self.used_bytes += size_bytes
        self.peak_bytes = max(self.peak_bytes, self.used_bytes)
        tick = self._tick()
        self._inserted_at[ref] = tick
        self._last_access[ref] = tick
        return evicted


def init_buffer(buf: ExpertBuffer, cfg: MoEConfig, profile=None, size_of: Union[int, Callable] = None) -> None:
    """Warm the buffer: encoder experts in (layer, expert) order, or for a model
    without encoder MoE layers, the decoder experts with the highest marginal frequency.
    """
    if buf.resident:
        raise CapacityError('init_buffer expects an empty buffer')
    if size_of is None:
        size_of = expert_size_bytes(cfg, Bitwidth.FP32)
    sizer = size_of if callable(size_of) else (lambda ref: size_of)

    if cfg.encoder_moe_layers > 0:
        order = [ExpertRef(Stage.ENCODER, i, j)
                 for i in range(cfg.encoder_moe_layers) for j in range(cfg.experts_per_layer)]
    elif profile is not None:
        order = sorted(
            (ExpertRef(Stage.DECODER, i, j)
             for i in range(cfg.decoder_moe_layers) for j in range(cfg.experts_per_layer)),
            key=lambda ref: (-profile.marginal_counts[ref.moe_layer, ref.expert], ref),
        )
    else:
        order = []
    for ref in order:
        size = sizer(ref)
        if size > buf.free_bytes:
            break
        buf.insert(ref, size)
    logger.debug('buffer warmed with %d experts (%d bytes)', len(buf.resident), buf.used_bytes)


def replay_decoder_steps(buf: ExpertBuffer, trace: TokenTrace, size: int) -> None:
    """Access every decoder activation in order, inserting misses; no preloading."""
    for token in trace.iter_tokens():
        for layer, step in enumerate(token):
            buf.set_layer(layer)
            buf.unpin_all()
            refs = [ExpertRef(Stage.DECODER, layer, j) for j in step]
            for ref in refs:
                if ref in buf:
                    buf.pin(ref)
            for ref in refs:
                if not buf.access(ref) and buf.can_insert(size):
                    buf.insert(ref, size)
                    buf.pin(ref)


def run_policy_eval(trace: TokenTrace, cfg: MoEConfig, policy: Union[Policy, str], slots: int, seed: int = 0,
                    distance: Optional[str] = None, profile=None) -> float:
    """Hit ratio of ``policy`` with room for ``slots`` FP32 experts, replaying the decoder steps."""
    trace.check_against(cfg)
    size = expert_size_bytes(cfg, Bitwidth.FP32)
    buf = ExpertBuffer.for_config(cfg, slots * size, policy=policy, seed=seed, distance=distance)
    if profile is not None:
        buf.frequencies.seed(profile.marginal_counts)
    replay_decoder_steps(buf, trace, size)
    return buf.hit_ratio


def policy_sweep(trace: TokenTrace, cfg: MoEConfig, policies, slot_counts, seed: int = 0,
                 distance: Optional[str] = None, profile=None) -> dict:
    """Hit ratio for every (policy, slots) pair; ``profile`` seeds the edgemoe frequencies."""
    steps = StepLog()
    rows = []
    for slots in slot_counts:
        for policy in policies:
            ratio = run_policy_eval(trace, cfg, policy, slots, seed=seed, distance=distance, profile=profile)
            rows.append({'policy': Policy(policy).value, 'slots': slots, 'hit_ratio': ratio})
            steps.info('%s with %d slots: hit ratio %.4f', Policy(policy).value, slots, ratio)
    return {'tokens': trace.n_tokens, 'results': rows, 'steps': steps}


def buffer_slot_table(cfg: MoEConfig, plan, budgets_bytes) -> list:
    """How many experts fit in each memory budget once non-expert weights are resident."""
    fp32 = expert_size_bytes(cfg, Bitwidth.FP32)
    int4 = expert_size_bytes(cfg, Bitwidth.INT4)
    non_expert = non_expert_param_bytes(cfg, plan.non_expert_bitwidth if plan is not None else Bitwidth.FP32)
    if plan is not None:
        mean_planned = sum(expert_size_bytes(cfg, b) for b in plan.bitwidths.values()) / len(plan.bitwidths)
    rows = []
    for budget in budgets_bytes:
        free = max(budget - non_expert, 0)
        row = {
            'budget_bytes': budget,
            'non_expert_bytes': non_expert,
            'fp32_experts': free // fp32,
            'int4_experts': free // int4,
        }
        if plan is not None:
            row['planned_experts'] = int(free // mean_planned)
        rows.append(row)
    return rows
