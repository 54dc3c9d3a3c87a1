"""Channel-wise symmetric linear quantization of expert weight matrices.

Each output channel (matrix row) gets one FP16 scale, ``max|w| / qmax``, and
integer codes in ``[-qmax, qmax]`` with ``qmax = 2**(bits-1) - 1``. Rounding is
half away from zero. FP16/FP32 requests store the weights unquantized at that
precision.
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .exceptions import QuantizationError
from .topology import Bitwidth, MoEConfig, matrix_bytes

FP16_TINY = np.float16(np.finfo(np.float16).smallest_subnormal)


@dataclass(frozen=True)
class QuantizedChannel:
    codes: np.ndarray
    scale: float
    bitwidth: Bitwidth


@dataclass(frozen=True)
class QuantizedMatrix:
    """One quantized matrix: a code grid plus one scale per row, or raw values for FP16/FP32."""

    bitwidth: Bitwidth
    shape: tuple
    codes: Optional[np.ndarray] = None
    scales: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None

    @property
    def channels(self) -> list:
        if self.codes is None:
            raise QuantizationError(f'{self.bitwidth.name} matrix is stored unquantized')
        return [QuantizedChannel(self.codes[r], float(self.scales[r]), self.bitwidth) for r in range(self.shape[0])]

    @property
    def nbytes(self) -> int:
        return matrix_bytes(self.shape[0], self.shape[1], self.bitwidth)

    def dequantize(self) -> np.ndarray:
        if self.values is not None:
            return self.values
        return self.codes.astype(np.float64) * self.scales.astype(np.float64)[:, None]


@dataclass(frozen=True)
class QuantizedExpert:
    up: QuantizedMatrix
    down: QuantizedMatrix

    @property
    def bitwidth(self) -> Bitwidth:
        return self.up.bitwidth

    @property
    def nbytes(self) -> int:
        return self.up.nbytes + self.down.nbytes

    def dequantize(self) -> tuple:
        return self.up.dequantize(), self.down.dequantize()


def _require_integer(b: Bitwidth):
    if not b.is_integer:
        raise QuantizationError(f'{b.name} is not a quantizing bitwidth')


def _row_scales(peak: np.ndarray, qmax: int) -> np.ndarray:
    with np.errstate(over='ignore'):
        scales = (peak / qmax).astype(np.float16)
    if np.isinf(scales).any():
        raise QuantizationError('channel magnitude overflows the FP16 scale')
    # a non-zero channel must never get the all-zero sentinel
    return np.where((scales == 0) & (peak > 0), FP16_TINY, scales)


def quantize_rows(weights, b: Bitwidth) -> QuantizedMatrix:
    """Quantize every row of a 2-D array independently."""
    _require_integer(b)
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] == 0:
        raise QuantizationError(f'expected a non-empty 2-D matrix, got shape {w.shape}')
    if not np.isfinite(w).all():
        raise QuantizationError('weights must be finite')
    qmax = b.qmax
    scales = _row_scales(np.abs(w).max(axis=1), qmax)
    s = scales.astype(np.float64)
    ratio = w / np.where(s > 0, s, 1.0)[:, None]
    codes = np.sign(ratio) * np.floor(np.abs(ratio) + 0.5)
    codes = np.clip(codes, -qmax, qmax)
    codes[s == 0] = 0
    return QuantizedMatrix(bitwidth=b, shape=w.shape, codes=codes.astype(np.int8), scales=scales)


def quantize_channel(weights: Sequence[float], b: Bitwidth) -> QuantizedChannel:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise QuantizationError('a channel is a non-empty vector')
    return quantize_rows(w[None, :], b).channels[0]


def dequantize_channel(qc: QuantizedChannel) -> np.ndarray:
    return np.asarray(qc.codes, dtype=np.float64) * float(qc.scale)


def quantize_matrix(weights, b: Bitwidth) -> QuantizedMatrix:
    if b.is_integer:
        return quantize_rows(weights, b)
    w = np.asarray(weights)
    dtype = np.float16 if b == Bitwidth.FP16 else np.float32
    return QuantizedMatrix(bitwidth=b, shape=w.shape, values=w.astype(dtype, copy=False))


def quantize_expert(weights, b: Bitwidth, cfg: Optional[MoEConfig] = None) -> QuantizedExpert:
    """Quantize an expert given as (up, down) = (d x h, h x d) matrices."""
    up, down = (np.asarray(m) for m in weights)
    if cfg is not None:
        expected = ((cfg.model_dim, cfg.ffn_hidden_dim), (cfg.ffn_hidden_dim, cfg.model_dim))
        if (up.shape, down.shape) != expected:
            raise QuantizationError(f'expert shapes {up.shape}, {down.shape} do not match config {expected}')
    elif up.ndim != 2 or down.shape != up.shape[::-1]:
        raise QuantizationError(f'expert shapes {up.shape}, {down.shape} are not a d x h / h x d pair')
    return QuantizedExpert(quantize_matrix(up, b), quantize_matrix(down, b))


def dequantize_expert(qe: QuantizedExpert) -> tuple:
    return qe.dequantize()


def fake_quantize(weights, b: Bitwidth) -> np.ndarray:
    """quantize -> dequantize, as seen by a forward pass at bitwidth b."""
    if b == Bitwidth.FP32:
        return np.asarray(weights)
    return np.asarray(quantize_matrix(weights, b).dequantize(), dtype=np.float64)
