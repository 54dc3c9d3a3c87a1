# This file contains the synthetic trace generators (power-law activation
# paths with balanced marginals, Markov traces with a known conditional
# table) and the trace statistics used to check them.

import collections
import logging
import math
from dataclasses import dataclass

import numpy as np

from .exceptions import GenerationInfeasible
from .topology import MoEConfig, TokenTrace, make_sample

logger = logging.getLogger(__name__)

DEFAULT_ZIPF_S = 3.5
DEFAULT_N_PATHS = 500
DEFAULT_TOKENS_PER_SAMPLE = 100
DEFAULT_CONCENTRATION = 0.3


def _encoder_steps(rng, cfg: MoEConfig):
    return [rng.choice(cfg.experts_per_layer, cfg.routing_k, replace=False) for _ in range(cfg.encoder_moe_layers)]


def _assemble(cfg: MoEConfig, rng, paths, tokens_per_sample) -> TokenTrace:
    samples = []
    for start in range(0, len(paths), tokens_per_sample):
        samples.append(make_sample(_encoder_steps(rng, cfg), paths[start:start + tokens_per_sample]))
    return TokenTrace.for_config(cfg, samples)


def _rotate(path, c, E):
    return tuple(tuple((j + c) % E for j in step) for step in path)


def _distinct_paths(cfg: MoEConfig) -> int:
    per_step = math.perm(cfg.experts_per_layer, cfg.routing_k)
    return per_step ** cfg.decoder_moe_layers


def build_path_catalog(cfg: MoEConfig, n_paths: int, seed: int) -> list:
    """Families of E paths, each family one random path under the E expert rotations.

    Every expert appears equally often in every layer of a family, so any
    weighting that is uniform within families keeps the per-layer marginals
    uniform. The catalog is rounded up to whole families.
    """
    E = cfg.experts_per_layer
    if n_paths < E:
        raise GenerationInfeasible(f'{n_paths} paths cannot balance {E} experts per layer')
    n_families = math.ceil(n_paths / E)
    if n_families * E > _distinct_paths(cfg):
        raise GenerationInfeasible(f'{n_families * E} distinct paths requested, only {_distinct_paths(cfg)} exist')
    rng = np.random.default_rng(seed)
    seen = set()
    families = []
    attempts = 0
    while len(families) < n_families:
        attempts += 1
        if attempts > 100 * n_families:
            raise GenerationInfeasible('could not draw enough distinct path families')
        base = tuple(tuple(int(j) for j in rng.choice(E, cfg.routing_k, replace=False))
                     for _ in range(cfg.decoder_moe_layers))
        members = [_rotate(base, c, E) for c in range(E)]
        canonical = min(members)
        if canonical in seen:
            continue
        seen.add(canonical)
        families.append(members)
    return families


def generate_powerlaw_trace(cfg: MoEConfig, n_paths: int = DEFAULT_N_PATHS, zipf_s: float = DEFAULT_ZIPF_S,
                            tokens: int = 100_000, seed: int = 0,
                            tokens_per_sample: int = DEFAULT_TOKENS_PER_SAMPLE) -> TokenTrace:
    """Decoder paths drawn from a catalog with family r weighted by r**-zipf_s.

    Every catalog path is emitted once before sampling starts (when the
    token count allows), so the tail of the distribution is observed.
    """
    if zipf_s < 0:
        raise GenerationInfeasible('zipf_s must be ≥ 0')
    families = build_path_catalog(cfg, n_paths, seed)
    catalog = [path for family in families for path in family]
    E = cfg.experts_per_layer
    family_weight = np.arange(1, len(families) + 1, dtype=np.float64) ** -zipf_s
    probs = np.repeat(family_weight / E, E)
    probs /= probs.sum()

    rng = np.random.default_rng([seed, 1])
    if tokens >= len(catalog):
        order = np.concatenate([rng.permutation(len(catalog)),
                                rng.choice(len(catalog), size=tokens - len(catalog), p=probs)])
    else:
        order = rng.choice(len(catalog), size=tokens, p=probs)
    logger.info('power-law trace: %d catalog paths in %d families, zipf_s=%.2f, %d tokens',
                len(catalog), len(families), zipf_s, tokens)
    return _assemble(cfg, rng, [catalog[i] for i in order], tokens_per_sample)


@dataclass(frozen=True)
class MarkovTable:
    """First-order ground truth: layer 0 draws from ``initial``; layer n draws from
    ``transitions[n-1][e]`` where e is the first expert of layer n-1's step."""

    initial: np.ndarray
    transitions: np.ndarray
    concentration: float

    def row(self, layer: int, previous_expert: int) -> np.ndarray:
        return self.transitions[layer - 1, previous_expert]

    def to_dict(self) -> dict:
        return {
            'keyed_on': 'first expert of the previous decoder MoE layer',
            'concentration': self.concentration,
            'initial': self.initial.tolist(),
            'transitions': self.transitions.tolist(),
        }


def _draw_steps(rng, probs: np.ndarray, k: int) -> np.ndarray:
    # Gumbel top-k: sequential sampling without replacement, first pick ~ probs
    with np.errstate(divide='ignore'):
        scores = np.log(probs) + rng.gumbel(size=probs.shape)
    return np.argsort(-scores, axis=1, kind='stable')[:, :k]


def generate_markov_trace(cfg: MoEConfig, seed: int = 0, tokens: int = 200_000,
                          concentration: float = DEFAULT_CONCENTRATION,
                          tokens_per_sample: int = DEFAULT_TOKENS_PER_SAMPLE) -> tuple:
    if concentration <= 0:
        raise GenerationInfeasible('concentration must be > 0')
    E, S, k = cfg.experts_per_layer, cfg.decoder_moe_layers, cfg.routing_k
    rng = np.random.default_rng(seed)
    alpha = np.full(E, concentration)
    table = MarkovTable(
        initial=rng.dirichlet(alpha),
        transitions=rng.dirichlet(alpha, size=(max(S - 1, 0), E)),
        concentration=concentration,
    )
    steps = np.zeros((tokens, S, k), dtype=np.int64)
    steps[:, 0] = _draw_steps(rng, np.broadcast_to(table.initial, (tokens, E)), k)
    for n in range(1, S):
        steps[:, n] = _draw_steps(rng, table.transitions[n - 1][steps[:, n - 1, 0]], k)
    trace = _assemble(cfg, rng, steps, tokens_per_sample)
    return trace, table


@dataclass(frozen=True)
class TraceStats:
    tokens: int
    marginals: np.ndarray
    path_cdf: list
    distinct_paths: int

    def top_share(self, fraction: float) -> float:
        """Share of tokens carried by the most frequent ``fraction`` of distinct paths."""
        if not self.path_cdf:
            return 0.0
        n = max(1, math.ceil(fraction * self.distinct_paths))
        return self.path_cdf[n - 1]

    def max_marginal_deviation(self, routing_k: int) -> float:
        """Largest relative deviation of a per-layer expert frequency from uniform."""
        E = self.marginals.shape[1]
        uniform = routing_k / E
        return float(np.abs(self.marginals - uniform).max() / uniform)

    def to_dict(self) -> dict:
        return {
            'tokens': self.tokens,
            'distinct_paths': self.distinct_paths,
            'marginals': self.marginals.tolist(),
            'path_cdf': self.path_cdf,
        }


def trace_stats(trace: TokenTrace) -> TraceStats:
    counts = np.zeros((trace.decoder_moe_layers, trace.experts_per_layer), dtype=np.int64)
    paths = collections.Counter()
    for token in trace.iter_tokens():
        paths[token] += 1
        for layer, step in enumerate(token):
            for j in step:
                counts[layer, j] += 1
    n = trace.n_tokens
    marginals = counts / n if n else counts.astype(np.float64)
    frequencies = sorted(paths.values(), reverse=True)
    cdf = (np.cumsum(frequencies) / n).tolist() if n else []
    if cdf:
        cdf[-1] = 1.0
    return TraceStats(tokens=n, marginals=marginals, path_cdf=cdf, distinct_paths=len(paths))
