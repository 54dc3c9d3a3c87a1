# This file contains the statistical activation profile: counts of which
# decoder expert follows the experts activated at the previous MoE layers,
# queried to choose experts worth preloading.

import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
from django.conf import settings

from .exceptions import DigestMismatchError, ProfileError
from .topology import ExpertRef, MoEConfig, Stage, TokenTrace
from .utils import dump_json, load_json

logger = logging.getLogger(__name__)

PROFILE_VERSION = 1


@dataclass(frozen=True)
class HistoryKey:
    """Predicts decoder MoE layer ``layer`` from the (sorted) steps of the layers before it."""

    layer: int
    history: tuple = ()

    @classmethod
    def from_token(cls, layer: int, token_steps, h: int) -> 'HistoryKey':
        start = max(0, layer - h)
        return cls(layer, tuple(tuple(sorted(token_steps[n])) for n in range(start, layer)))

    def encode(self) -> list:
        return [self.layer, [list(step) for step in self.history]]

    @classmethod
    def decode(cls, raw) -> 'HistoryKey':
        layer, history = raw
        return cls(int(layer), tuple(tuple(int(j) for j in step) for step in history))


@dataclass
class ActivationProfile:
    config_digest: str
    experts_per_layer: int
    routing_k: int
    decoder_moe_layers: int
    history: int = 2
    alpha: float = 0.5
    min_count: int = 1
    counts: dict = field(default_factory=dict)
    marginal_counts: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.marginal_counts is None:
            self.marginal_counts = np.zeros((self.decoder_moe_layers, self.experts_per_layer), dtype=np.int64)

    def observations(self, key: HistoryKey) -> int:
        """Number of tokens seen with this key."""
        counts = self.counts.get(key)
        return 0 if counts is None else int(counts.sum()) // self.routing_k

    def _smoothed(self, counts: np.ndarray) -> np.ndarray:
        E = self.experts_per_layer
        total = counts.sum()
        denom = total + self.alpha * E
        if denom == 0:
            return np.full(E, 1.0 / E)
        return (counts + self.alpha) / denom

    def probabilities(self, key: HistoryKey) -> np.ndarray:
        counts = self.counts.get(key)
        if counts is None:
            raise KeyError(key)
        return self._smoothed(counts)

    def marginal(self, layer: int) -> np.ndarray:
        return self._smoothed(self.marginal_counts[layer])

    @property
    def n_tokens(self) -> int:
        if self.decoder_moe_layers == 0:
            return 0
        return int(self.marginal_counts[0].sum()) // self.routing_k


def _ranked(probs: np.ndarray) -> list:
    order = sorted(range(len(probs)), key=lambda j: (-probs[j], j))
    return [(j, float(probs[j])) for j in order]


def build_profile(traces: Iterable[TokenTrace], h: Optional[int] = None, alpha: Optional[float] = None,
                  min_count: Optional[int] = None) -> ActivationProfile:
    """Count decoder-layer transitions over one or more traces of the same config."""
    h = settings.EDGEMOE_PREDICTOR_HISTORY if h is None else h
    alpha = settings.EDGEMOE_PREDICTOR_ALPHA if alpha is None else alpha
    min_count = settings.EDGEMOE_PREDICTOR_MIN_COUNT if min_count is None else min_count
    if h < 1:
        raise ProfileError('history window must be ≥ 1')
    if alpha < 0:
        raise ProfileError('smoothing alpha must be ≥ 0')

    profile = None
    for trace in traces:
        if profile is None:
            profile = ActivationProfile(trace.config_digest, trace.experts_per_layer, trace.routing_k,
                                        trace.decoder_moe_layers, h, alpha, min_count)
        elif trace.config_digest != profile.config_digest:
            raise DigestMismatchError('trace', profile.config_digest, trace.config_digest)
        _count_trace(profile, trace)
    if profile is None or profile.n_tokens == 0:
        raise ProfileError('cannot build a profile from an empty trace')
    logger.info('profile built from %d tokens, %d history keys', profile.n_tokens, len(profile.counts))
    return profile


def _count_trace(profile: ActivationProfile, trace: TokenTrace) -> None:
    E = profile.experts_per_layer
    for token in trace.iter_tokens():
        for layer, step in enumerate(token):
            for j in step:
                profile.marginal_counts[layer, j] += 1
            if layer == 0:
                continue
            key = HistoryKey.from_token(layer, token, profile.history)
            counts = profile.counts.get(key)
            if counts is None:
                counts = profile.counts[key] = np.zeros(E, dtype=np.int64)
            for j in step:
                counts[j] += 1


def predict(profile: ActivationProfile, history: HistoryKey) -> list:
    """Ranked (expert, probability) pairs; unseen or sparse keys use the layer marginal."""
    if not 0 <= history.layer < profile.decoder_moe_layers:
        raise ProfileError(f'layer {history.layer} outside [0, {profile.decoder_moe_layers})')
    if history.history and history in profile.counts and profile.observations(history) >= profile.min_count:
        return _ranked(profile.probabilities(history))
    return _ranked(profile.marginal(history.layer))


def preload_candidates(profile: ActivationProfile, history: HistoryKey, m: int) -> list:
    if not 1 <= m <= profile.experts_per_layer:
        raise ProfileError(f'preload count {m} outside [1, {profile.experts_per_layer}]')
    return [ExpertRef(Stage.DECODER, history.layer, j) for j, _ in predict(profile, history)[:m]]


def merge_profiles(*profiles: ActivationProfile) -> ActivationProfile:
    """Add the counts of profiles built over the same config and history window."""
    if not profiles:
        raise ProfileError('nothing to merge')
    first = profiles[0]
    merged = ActivationProfile(first.config_digest, first.experts_per_layer, first.routing_k,
                               first.decoder_moe_layers, first.history, first.alpha, first.min_count)
    for p in profiles:
        if p.config_digest != first.config_digest:
            raise DigestMismatchError('profile', first.config_digest, p.config_digest)
        if p.history != first.history:
            raise ProfileError(f'cannot merge history windows {first.history} and {p.history}')
        merged.marginal_counts += p.marginal_counts
        for key, counts in p.counts.items():
            if key in merged.counts:
                merged.counts[key] = merged.counts[key] + counts
            else:
                merged.counts[key] = counts.copy()
    return merged


def profile_to_dict(profile: ActivationProfile) -> dict:
    entries = sorted((key.encode(), counts.tolist()) for key, counts in profile.counts.items())
    return {
        'version': PROFILE_VERSION,
        'config_digest': profile.config_digest,
        'experts_per_layer': profile.experts_per_layer,
        'routing_k': profile.routing_k,
        'decoder_moe_layers': profile.decoder_moe_layers,
        'history': profile.history,
        'alpha': profile.alpha,
        'min_count': profile.min_count,
        'entries': [{'key': key, 'counts': counts} for key, counts in entries],
        'marginals': profile.marginal_counts.tolist(),
    }


def profile_from_dict(data: dict) -> ActivationProfile:
    if data.get('version') != PROFILE_VERSION:
        raise ProfileError(f'unsupported profile version {data.get("version")!r}')
    try:
        profile = ActivationProfile(
            config_digest=data['config_digest'],
            experts_per_layer=int(data['experts_per_layer']),
            routing_k=int(data['routing_k']),
            decoder_moe_layers=int(data['decoder_moe_layers']),
            history=int(data['history']),
            alpha=float(data['alpha']),
            min_count=int(data['min_count']),
            marginal_counts=np.asarray(data['marginals'], dtype=np.int64),
        )
        for entry in data['entries']:
            profile.counts[HistoryKey.decode(entry['key'])] = np.asarray(entry['counts'], dtype=np.int64)
    except (KeyError, TypeError, ValueError) as e:
        raise ProfileError(f'malformed profile: {e}') from e
    return profile


def save_profile(profile: ActivationProfile, path, timestamp=True) -> None:
    dump_json(profile_to_dict(profile), path, timestamp=timestamp)


def load_profile(path, cfg: Optional[MoEConfig] = None) -> ActivationProfile:
    profile = profile_from_dict(load_json(path))
    if cfg is not None:
        if profile.experts_per_layer != cfg.experts_per_layer:
            raise ProfileError(
                f'profile built for E={profile.experts_per_layer}, config has E={cfg.experts_per_layer}')
        if profile.config_digest != cfg.digest():
            raise DigestMismatchError('profile', cfg.digest(), profile.config_digest)
    return profile
