# This file contains the core domain types shared by every expertsim module:
# model topology, expert identity, bitwidths, activation traces and the
# JSON Lines trace format.

import enum
import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator, Optional, Sequence

from .exceptions import ConfigError, DigestMismatchError, TraceFormatError

TRACE_FORMAT = 'expertsim-trace'
TRACE_VERSION = 1


class Bitwidth(enum.Enum):
    INT2 = 2
    INT4 = 4
    INT8 = 8
    FP16 = 16
    FP32 = 32

    @property
    def bits(self) -> int:
        return self.value

    @property
    def is_integer(self) -> bool:
        return self.value <= 8

    @property
    def qmax(self) -> int:
        # symmetric range, INT2 -> {-1, 0, 1}
        return 2 ** (self.value - 1) - 1

    @classmethod
    def parse(cls, value) -> 'Bitwidth':
        if isinstance(value, Bitwidth):
            return value
        try:
            return cls[str(value).upper()]
        except KeyError:
            raise ValueError(f'unknown bitwidth {value!r}') from None


# Ordered ladder used by the planner when bracketing bounds.
BITWIDTH_LADDER = (Bitwidth.INT2, Bitwidth.INT4, Bitwidth.INT8, Bitwidth.FP16, Bitwidth.FP32)


class Stage(enum.IntEnum):
    ENCODER = 0
    DECODER = 1

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value) -> 'Stage':
        if isinstance(value, Stage):
            return value
        return cls[str(value).upper()]


@dataclass(frozen=True, order=True)
class ExpertRef:
    """One expert, addressed as (stage, MoE layer index, expert index).

    Ordering is (stage, moe_layer, expert) with encoder before decoder, which
    is the tie-break used by the planner and the buffer.
    """

    stage: Stage
    moe_layer: int
    expert: int

    def key(self) -> str:
        return f'{self.stage.label}:{self.moe_layer}:{self.expert}'

    @classmethod
    def from_key(cls, key: str) -> 'ExpertRef':
        stage, layer, expert = key.split(':')
        return cls(Stage.parse(stage), int(layer), int(expert))

    def __str__(self):
        return self.key()


@dataclass(frozen=True)
class MoEConfig:
    encoder_layers: int = 12
    encoder_moe_layers: int = 6
    decoder_layers: int = 12
    decoder_moe_layers: int = 6
    experts_per_layer: int = 8
    routing_k: int = 1
    model_dim: int = 32
    ffn_hidden_dim: int = 64
    seed: int = 0
    head_classes: int = 16

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'MoEConfig':
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([f'unknown field {name!r}' for name in unknown])
        return cls(**data)

    def digest(self) -> str:
        return config_digest(self)

    def moe_layers(self, stage: Stage) -> int:
        return self.encoder_moe_layers if stage == Stage.ENCODER else self.decoder_moe_layers

    @property
    def total_experts(self) -> int:
        return (self.encoder_moe_layers + self.decoder_moe_layers) * self.experts_per_layer


# Helper: canonical digest of a config (sorted-key JSON, sha256, 16 hex chars)
def config_digest(cfg: MoEConfig) -> str:
    canonical = json.dumps(cfg.to_dict(), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:16]


def validate_config(cfg: MoEConfig) -> list:
    """Return the list of violated topology invariants (empty when valid)."""
    from .forms import MoEConfigForm, form_errors

    form = MoEConfigForm(data=cfg.to_dict())
    if form.is_valid():
        return []
    return form_errors(form)


def ensure_valid(cfg: MoEConfig) -> MoEConfig:
    violations = validate_config(cfg)
    if violations:
        raise ConfigError(violations)
    return cfg


def load_config(path) -> MoEConfig:
    with open(path, 'r', encoding='utf-8') as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError([f'{path}: {e.msg} (line {e.lineno})']) from e
    if not isinstance(data, dict):
        raise ConfigError([f'{path}: expected a JSON object'])
    return config_from_dict(data)


def config_from_dict(data: dict) -> MoEConfig:
    """Build a config from raw JSON values; omitted fields take the toy defaults."""
    from .forms import MoEConfigForm

    merged = MoEConfig.from_dict(data).to_dict()
    form = MoEConfigForm(data=merged)
    if not form.is_valid():
        raise ConfigError([msg for errors in form.errors.values() for msg in errors])
    return MoEConfig(**form.cleaned_data)


def all_experts(cfg: MoEConfig) -> list:
    refs = []
    for stage in (Stage.ENCODER, Stage.DECODER):
        for layer in range(cfg.moe_layers(stage)):
            refs.extend(ExpertRef(stage, layer, j) for j in range(cfg.experts_per_layer))
    return refs


# Helper: size accounting
# One matrix costs ceil(rows*cols*bits/8) bytes of weights plus one FP16 scale per row.
def matrix_bytes(rows: int, cols: int, b: Bitwidth) -> int:
    return math.ceil(rows * cols * b.bits / 8) + 2 * rows


def expert_size_bytes(cfg: MoEConfig, b: Bitwidth) -> int:
    d, h = cfg.model_dim, cfg.ffn_hidden_dim
    return matrix_bytes(d, h, b) + matrix_bytes(h, d, b)


def non_expert_param_bytes(cfg: MoEConfig, b: Bitwidth) -> int:
    """Bytes of every weight that is not an expert: attention, dense FFNs, routers and head."""
    d, h, E = cfg.model_dim, cfg.ffn_hidden_dim, cfg.experts_per_layer
    layers = cfg.encoder_layers + cfg.decoder_layers
    moe_layers = cfg.encoder_moe_layers + cfg.decoder_moe_layers
    attention = layers * 4 * matrix_bytes(d, d, b)
    dense_ffn = (layers - moe_layers) * (matrix_bytes(d, h, b) + matrix_bytes(h, d, b))
    routers = moe_layers * matrix_bytes(d, E, b)
    head = matrix_bytes(d, cfg.head_classes, b)
    return attention + dense_ffn + routers + head


# Activation steps are plain tuples of expert indices, in router order.
def check_step(step: Sequence[int], cfg_or_k, experts_per_layer: Optional[int] = None) -> Optional[str]:
    if isinstance(cfg_or_k, MoEConfig):
        k, E = cfg_or_k.routing_k, cfg_or_k.experts_per_layer
    else:
        k, E = cfg_or_k, experts_per_layer
    if len(step) != k:
        return f'step {list(step)} has {len(step)} experts, expected {k}'
    if len(set(step)) != len(step):
        return f'step {list(step)} repeats an expert'
    for j in step:
        if not isinstance(j, int) or isinstance(j, bool) or not 0 <= j < E:
            return f'expert index {j!r} outside [0, {E})'
    return None


@dataclass(frozen=True)
class TraceSample:
    encoder_steps: tuple
    decode_tokens: tuple


@dataclass(frozen=True)
class TokenTrace:
    config_digest: str
    routing_k: int
    encoder_moe_layers: int
    decoder_moe_layers: int
    experts_per_layer: int
    samples: tuple

    @classmethod
    def for_config(cls, cfg: MoEConfig, samples) -> 'TokenTrace':
        return cls(
            config_digest=cfg.digest(),
            routing_k=cfg.routing_k,
            encoder_moe_layers=cfg.encoder_moe_layers,
            decoder_moe_layers=cfg.decoder_moe_layers,
            experts_per_layer=cfg.experts_per_layer,
            samples=tuple(samples),
        )

    @property
    def n_tokens(self) -> int:
        return sum(len(s.decode_tokens) for s in self.samples)

    def iter_tokens(self) -> Iterator[tuple]:
        for sample in self.samples:
            yield from sample.decode_tokens

    def check_against(self, cfg: MoEConfig) -> None:
        expected = cfg.digest()
        if self.config_digest != expected:
            raise DigestMismatchError('trace', expected, self.config_digest)

    def header(self) -> dict:
        return {
            'format': TRACE_FORMAT,
            'version': TRACE_VERSION,
            'config_digest': self.config_digest,
            'routing_k': self.routing_k,
            'encoder_moe_layers': self.encoder_moe_layers,
            'decoder_moe_layers': self.decoder_moe_layers,
            'experts_per_layer': self.experts_per_layer,
        }


def make_sample(encoder_steps, decode_tokens) -> TraceSample:
    return TraceSample(
        encoder_steps=tuple(tuple(int(j) for j in step) for step in encoder_steps),
        decode_tokens=tuple(tuple(tuple(int(j) for j in step) for step in token) for token in decode_tokens),
    )


# Trace file layout (JSON Lines):
#   line 1: header record
#   then per sample: {"sample": n, "encoder": [[...], ...]} followed by one
#   {"token": [[...], ...]} line per decoded token.
def write_trace(trace: TokenTrace, path) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        f.write(json.dumps(trace.header(), sort_keys=True) + '\n')
        for n, sample in enumerate(trace.samples):
            f.write(json.dumps({'sample': n, 'encoder': [list(s) for s in sample.encoder_steps]}) + '\n')
            for token in sample.decode_tokens:
                f.write(json.dumps({'token': [list(s) for s in token]}) + '\n')


def _parse_steps(lineno, raw, expected_len, k, E, what):
    if not isinstance(raw, list) or len(raw) != expected_len:
        raise TraceFormatError(lineno, f'{what} must list {expected_len} steps')
    steps = []
    for step in raw:
        if not isinstance(step, list):
            raise TraceFormatError(lineno, f'{what} step is not a list')
        problem = check_step(step, k, E)
        if problem:
            raise TraceFormatError(lineno, problem)
        steps.append(tuple(step))
    return tuple(steps)


def read_trace(path, cfg: Optional[MoEConfig] = None) -> TokenTrace:
    """Read a JSONL trace; with cfg given, the header digest must match it."""
    samples = []
    header = None
    encoder_steps = None
    tokens: list = []
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise TraceFormatError(lineno, f'invalid JSON ({e.msg})') from e
            if not isinstance(record, dict):
                raise TraceFormatError(lineno, 'record is not an object')
            if header is None:
                if record.get('format') != TRACE_FORMAT:
                    raise TraceFormatError(lineno, 'missing trace header')
                if record.get('version') != TRACE_VERSION:
                    raise TraceFormatError(lineno, f'unsupported trace version {record.get("version")!r}')
                try:
                    header = {key: record[key] for key in TokenTrace.__dataclass_fields__ if key != 'samples'}
                except KeyError as e:
                    raise TraceFormatError(lineno, f'header lacks {e.args[0]}') from None
                if cfg is not None and header['config_digest'] != cfg.digest():
                    raise DigestMismatchError('trace', cfg.digest(), header['config_digest'])
                k, E = header['routing_k'], header['experts_per_layer']
                continue
            if 'sample' in record:
                if encoder_steps is not None:
                    samples.append(TraceSample(encoder_steps, tuple(tokens)))
                encoder_steps = _parse_steps(
                    lineno, record.get('encoder'), header['encoder_moe_layers'], k, E, 'encoder')
                tokens = []
            elif 'token' in record:
                if encoder_steps is None:
                    raise TraceFormatError(lineno, 'token record before any sample record')
                tokens.append(_parse_steps(lineno, record['token'], header['decoder_moe_layers'], k, E, 'token'))
            else:
                raise TraceFormatError(lineno, 'unknown record type')
    if header is None:
        raise TraceFormatError(1, 'empty trace file')
    if encoder_steps is not None:
        samples.append(TraceSample(encoder_steps, tuple(tokens)))
    return TokenTrace(samples=tuple(samples), **header)


def trace_path_for_truth(path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + '.truth.json')
