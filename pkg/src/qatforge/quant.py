"""Symmetric dynamic quantization without a zero point.

The scale of each channel is ``max|x| / qmax`` where ``qmax`` is 127 for int8
and 7 for int4; codes are ``x / scale`` rounded and clamped to
``[-qmax, qmax]``, and dequantization multiplies the codes back by the scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np

from .tensor import ShapeError, int_matmul, matmul, reduce_abs_max

QMAX = {4: 7, 8: 127}
ROUNDING_MODES = ("nearest", "truncate")
PATHS = ("native", "fake", "float")
GRANULARITIES = ("tensor", "row")


class QuantError(ValueError):
    """Invalid quantization input or configuration."""


def qmax_for(bits: int) -> int:
    try:
        return QMAX[bits]
    except KeyError:
        raise QuantError(f"unsupported bit width {bits}; expected 4 or 8") from None


@dataclass(frozen=True)
class QuantSpec:
    """Precision directive for one matmul layer.

    ``None`` bit widths mean the operand stays float32. ``activation_granularity``
    chooses one activation scale for the whole tensor or one per row (token).
    """

    weight_bits: Optional[int] = None
    activation_bits: Optional[int] = None
    path: str = "float"
    rounding: str = "nearest"
    activation_granularity: str = "tensor"

    def __post_init__(self):
        if self.path not in PATHS:
            raise QuantError(f"unknown path {self.path!r}")
        if self.rounding not in ROUNDING_MODES:
            raise QuantError(f"unknown rounding mode {self.rounding!r}")
        if self.activation_granularity not in GRANULARITIES:
            raise QuantError(f"unknown activation granularity {self.activation_granularity!r}")
        for bits in (self.weight_bits, self.activation_bits):
            if bits is not None:
                qmax_for(bits)
        is_float = self.weight_bits is None and self.activation_bits is None
        if (self.path == "float") != is_float:
            raise QuantError("path='float' exactly when both bit widths are None")
        if self.path != "float" and self.weight_bits is None:
            raise QuantError("quantized paths require weight_bits")

    @property
    def is_float(self) -> bool:
        return self.path == "float"

    def to_dict(self) -> dict:
        return {
            "weight_bits": self.weight_bits,
            "activation_bits": self.activation_bits,
            "path": self.path,
            "rounding": self.rounding,
            "activation_granularity": self.activation_granularity,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantSpec":
        return cls(**d)


FLOAT = QuantSpec()
I8W = QuantSpec(weight_bits=8, path="native")
I4W = QuantSpec(weight_bits=4, path="native")
I8WA = QuantSpec(weight_bits=8, activation_bits=8, path="native")
I4WI8A = QuantSpec(weight_bits=4, activation_bits=8, path="native")
I4WA = QuantSpec(weight_bits=4, activation_bits=4, path="native")
FAKE_I4W = QuantSpec(weight_bits=4, path="fake")

# Precision configurations in table order.
CONFIGS: dict[str, QuantSpec] = {
    "Float": FLOAT,
    "I8W": I8W,
    "I4W": I4W,
    "I8WA": I8WA,
    "I4WI8A": I4WI8A,
    "I4WA": I4WA,
    "FakeI4W": FAKE_I4W,
}


def spec_from_name(name: str) -> QuantSpec:
    try:
        return CONFIGS[name]
    except KeyError:
        raise QuantError(f"unknown precision config {name!r}; choose from {', '.join(CONFIGS)}") from None


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    """Integer codes plus per-channel scales.

    ``axis`` is the channel axis the scales index, or ``None`` for a single
    per-tensor scale.
    """

    codes: np.ndarray
    scales: np.ndarray
    axis: Optional[int]
    bits: int
    qmax: int = field(init=False, repr=False)

    def __post_init__(self):
        qmax = qmax_for(self.bits)
        object.__setattr__(self, "qmax", qmax)
        codes = np.asarray(self.codes)
        scales = np.asarray(self.scales, dtype=np.float32).reshape(-1)
        if codes.dtype != np.int8:
            raise QuantError(f"codes must be int8, got {codes.dtype}")
        if codes.size and (codes.min() < -qmax or codes.max() > qmax):
            raise QuantError(f"codes outside [-{qmax}, {qmax}] for int{self.bits}")
        if not (np.all(np.isfinite(scales)) and np.all(scales > 0)):
            raise QuantError("scales must be positive and finite")
        axis = self.axis
        if axis is None:
            expected = 1
        else:
            if not -codes.ndim <= axis < codes.ndim:
                raise QuantError(f"quant axis {axis} out of range for shape {codes.shape}")
            axis = axis % codes.ndim
            expected = codes.shape[axis]
        if scales.size != expected:
            raise QuantError(f"expected {expected} scales, got {scales.size}")
        codes.flags.writeable = False
        scales.flags.writeable = False
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "axis", axis)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.codes.shape

    def broadcast_scales(self) -> np.ndarray:
        """Scales reshaped to broadcast against ``codes``."""
        if self.axis is None:
            return self.scales.reshape(())
        shape = [1] * self.codes.ndim
        shape[self.axis] = self.scales.size
        return self.scales.reshape(shape)


def compute_scales(t: np.ndarray, axis: Optional[int], bits: int) -> np.ndarray:
    """Per-channel scale ``max|t| / qmax`` over every axis except ``axis``.

    Channels whose maximum is zero get scale 1.0 so their codes are zero.
    """
    qmax = qmax_for(bits)
    t = np.asarray(t, dtype=np.float32)
    if not np.all(np.isfinite(t)):
        raise QuantError("cannot compute scales of a tensor with NaN/Inf")
    if axis is None:
        reduce_axes = None
    else:
        if not -t.ndim <= axis < t.ndim:
            raise QuantError(f"axis {axis} out of range for shape {t.shape}")
        axis %= t.ndim
        reduce_axes = tuple(ax for ax in range(t.ndim) if ax != axis)
    maxima = np.asarray(reduce_abs_max(t, reduce_axes), dtype=np.float32).reshape(-1)
    scales = maxima / np.float32(qmax)
    scales[maxima == 0] = 1.0
    return scales


@numba.njit(cache=True)
def _quantize_kernel(t3, scales, qmax, truncate, out3):
    # t3 is (outer, channels, inner); one scale per channel
    P, C, R = t3.shape
    for p in range(P):
        for c in range(C):
            s = scales[c]
            for r in range(R):
                v = t3[p, c, r] / s
                w = np.trunc(v)
                if not truncate:
                    # half away from zero; v - trunc(v) is exact for |v| < 2**23
                    f = v - w
                    if f >= 0.5:
                        w += 1
                    elif f <= -0.5:
                        w -= 1
                # saturating cast
                if w > qmax:
                    w = qmax
                elif w < -qmax:
                    w = -qmax
                out3[p, c, r] = np.int8(w)
    return out3


def quantize(
    t: np.ndarray,
    scales: np.ndarray,
    axis: Optional[int],
    bits: int,
    rounding: str = "nearest",
) -> QuantizedTensor:
    qmax = qmax_for(bits)
    if rounding not in ROUNDING_MODES:
        raise QuantError(f"unknown rounding mode {rounding!r}")
    t = np.asarray(t, dtype=np.float32)
    scales = np.asarray(scales, dtype=np.float32).reshape(-1)
    if not (np.all(np.isfinite(scales)) and np.all(scales > 0)):
        raise QuantError("scales must be positive and finite")
    if not np.all(np.isfinite(t)):
        raise QuantError("cannot quantize a tensor with NaN/Inf")
    if axis is None:
        if scales.size != 1:
            raise QuantError(f"per-tensor quantization takes one scale, got {scales.size}")
        t3 = t.reshape(1, 1, -1)
    else:
        axis %= t.ndim
        if scales.size != t.shape[axis]:
            raise QuantError(f"expected {t.shape[axis]} scales along axis {axis}, got {scales.size}")
        t3 = t.reshape(math.prod(t.shape[:axis]), t.shape[axis], -1)
    t3 = np.ascontiguousarray(t3)
    codes = np.empty(t3.shape, dtype=np.int8)
    _quantize_kernel(t3, scales, np.float32(qmax), rounding == "truncate", codes)
    return QuantizedTensor(codes.reshape(t.shape), scales, axis, bits)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    return q.codes.astype(np.float32) * q.broadcast_scales()


def quantize_dynamic(t: np.ndarray, axis: Optional[int], bits: int, rounding: str = "nearest") -> QuantizedTensor:
    """Quantize with scales computed from ``t`` itself."""
    return quantize(t, compute_scales(t, axis, bits), axis, bits, rounding)


def fake_quant(t: np.ndarray, axis: Optional[int], bits: int, rounding: str = "nearest") -> np.ndarray:
    """Quantize then dequantize, staying in float32."""
    return dequantize(quantize_dynamic(t, axis, bits, rounding))


def pack_int4(codes) -> bytes:
    """Pack int4 codes two per byte, first code in the low nibble."""
    c = np.asarray(codes).reshape(-1)
    if c.size and (c.min() < -7 or c.max() > 7):
        raise QuantError("int4 codes must lie in [-7, 7]")
    nib = (c.astype(np.int16) & 0xF).astype(np.uint8)
    if nib.size % 2:
        nib = np.append(nib, np.uint8(0))
    return (nib[0::2] | (nib[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_int4(data: bytes, count: int) -> np.ndarray:
    """Inverse of :func:`pack_int4`; returns ``count`` int8 codes."""
    raw = np.frombuffer(data, dtype=np.uint8)
    if raw.size != (count + 1) // 2:
        raise QuantError(f"{count} int4 codes need {(count + 1) // 2} bytes, got {raw.size}")
    nib = np.empty(raw.size * 2, dtype=np.uint8)
    nib[0::2] = raw & 0xF
    nib[1::2] = raw >> 4
    if count % 2 and nib[-1] != 0:
        raise QuantError("nonzero padding nibble in packed int4 data")
    nib = nib[:count]
    if np.any(nib == 8):
        raise QuantError("packed int4 data contains the excluded code -8")
    return (nib.astype(np.int8) ^ 8) - 8


def _check_matmul_operands(qa: QuantizedTensor, qb: QuantizedTensor) -> int:
    if qa.codes.ndim != 2 or qb.codes.ndim != 2:
        raise ShapeError(f"quantized matmul takes 2-D operands, got {qa.shape} and {qb.shape}")
    if qa.shape[1] != qb.shape[0]:
        raise ShapeError(f"quantized matmul inner dimensions differ: {qa.shape} x {qb.shape}")
    if qa.axis not in (None, 0):
        raise QuantError("left operand scales must be per-tensor or per-row; axis 1 is contracted")
    if qb.axis not in (None, 1):
        raise QuantError("right operand scales must be per-tensor or per-column; axis 0 is contracted")
    return qa.shape[1] * qa.qmax * qb.qmax


def _rescale(acc: np.ndarray, qa: QuantizedTensor, qb: QuantizedTensor) -> np.ndarray:
    sa = qa.scales.reshape(-1, 1) if qa.axis == 0 else qa.scales.reshape(())
    sb = qb.scales.reshape(1, -1) if qb.axis == 1 else qb.scales.reshape(())
    return (acc * sa) * sb


def quantized_matmul_native(qa: QuantizedTensor, qb: QuantizedTensor) -> np.ndarray:
    """Integer GEMM with int32 accumulation, rescaled to float32."""
    bound = _check_matmul_operands(qa, qb)
    if bound >= 2**31:
        raise QuantError(f"int32 accumulator may overflow: K*qmax_a*qmax_b = {bound} >= 2^31")
    acc = int_matmul(qa.codes, qb.codes)
    return _rescale(acc.astype(np.float32), qa, qb)


def quantized_matmul_emulated(qa: QuantizedTensor, qb: QuantizedTensor) -> np.ndarray:
    """Same product with codes held and accumulated in float32.

    Exact (hence equal to the native path) while every partial sum stays
    below 2**24.
    """
    bound = _check_matmul_operands(qa, qb)
    if bound >= 2**24:
        raise QuantError(f"float32 emulation inexact: K*qmax_a*qmax_b = {bound} >= 2^24")
    acc = matmul(qa.codes.astype(np.float32), qb.codes.astype(np.float32))
    return _rescale(acc, qa, qb)


def max_exact_k(bits_a: int, bits_b: int, limit: int = 2**24) -> int:
    """Largest contraction length whose worst-case sum stays below ``limit``."""
    return math.ceil(limit / (qmax_for(bits_a) * qmax_for(bits_b))) - 1
