"""Bit-faithful emulation of the seven supported numeric formats.

Floating formats are emulated by rounding base-precision values to a
(exponent_bits, mantissa_bits) grid with round-to-nearest, ties-to-even,
including subnormals. Block floating point shares one 8-bit exponent per
block of 10 channel values. INT8 is symmetric per-tensor with zero_point
fixed at 0 so that 0.0 quantizes exactly.

All functions here are pure; arrays are never mutated in place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

__all__ = [
    "FormatSpec",
    "FORMATS",
    "ACT_FORMATS",
    "IntQuantParams",
    "CalibrationRequiredError",
    "round_float",
    "saturate_float",
    "quantize_tensor",
    "quantize_block_fp",
    "quantize_int8",
    "dequantize_int8",
    "fake_quantize_int8",
    "calibrate_int8",
    "bits_per_value",
    "max_finite",
]


class CalibrationRequiredError(RuntimeError):
    """Raised when an integer-format operation runs without calibrated scales."""


@dataclass(frozen=True)
class FormatSpec:
    """One numeric format row: name, kind, bit layout and accumulation format.

    ``accumulation`` names the format used for sums and activation
    functions (the ACT side of the precision contract). ``storage_bits``
    is the per-value storage cost for fixed-width formats; block-floating
    cost depends on tensor shape, see :func:`bits_per_value`.
    """

    name: str
    kind: str  # "floating" | "block-floating" | "integer"
    exponent_bits: int
    mantissa_bits: int
    accumulation: str
    block_size: int | None = None
    storage_bits: int | None = None

    @property
    def is_integer(self) -> bool:
        return self.kind == "integer"

    @property
    def is_block(self) -> bool:
        return self.kind == "block-floating"


FORMATS: dict[str, FormatSpec] = {
    "FP32": FormatSpec("FP32", "floating", 8, 23, "FP32", storage_bits=32),
    "TF32": FormatSpec("TF32", "floating", 8, 10, "FP32", storage_bits=19),
    "bfloat16": FormatSpec("bfloat16", "floating", 8, 7, "FP32", storage_bits=16),
    "BFP16": FormatSpec("BFP16", "block-floating", 8, 7, "FP32", block_size=10),
    "FP16.16": FormatSpec("FP16.16", "floating", 5, 10, "FP16", storage_bits=16),
    "FP16.32": FormatSpec("FP16.32", "floating", 5, 10, "FP32", storage_bits=16),
    "INT8": FormatSpec("INT8", "integer", 0, 8, "INT8", storage_bits=8),
}

# Formats that may appear on the accumulation side only.
ACT_FORMATS: dict[str, FormatSpec] = {
    "FP32": FORMATS["FP32"],
    "FP16": FormatSpec("FP16", "floating", 5, 10, "FP16", storage_bits=16),
    "INT8": FORMATS["INT8"],
}


@dataclass(frozen=True)
class IntQuantParams:
    """Symmetric per-tensor quantization parameters; zero_point is always 0."""

    scale: float
    zero_point: int = 0
    degenerate: bool = False  # set when the tensor was all zero at calibration

    def __post_init__(self):
        if self.zero_point != 0:
            raise ValueError("zero_point must be 0")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")


def max_finite(exponent_bits: int, mantissa_bits: int) -> float:
    """Largest finite magnitude of the (E, M) floating format."""
    emax = (1 << (exponent_bits - 1)) - 1
    return (2.0 - 2.0 ** (-mantissa_bits)) * 2.0 ** emax


def _round_float_core(x, exponent_bits, mantissa_bits, saturate):
    x64 = np.asarray(x, dtype=np.float64)
    scalar = x64.ndim == 0
    x64 = np.atleast_1d(x64)

    bias = (1 << (exponent_bits - 1)) - 1
    emax = bias
    emin = 1 - bias
    limit = max_finite(exponent_bits, mantissa_bits)

    finite = np.isfinite(x64)
    xa = np.abs(np.where(finite, x64, 0.0))

    _, e = np.frexp(xa)
    eu = e - 1  # xa in [2**eu, 2**(eu+1))

    # Anything at or beyond 2**(emax+1) rounds away from max finite.
    blown = finite & (eu > emax)

    # Grid spacing of the nearest representables; clamped for subnormals.
    q = np.maximum(eu - mantissa_bits, emin - mantissa_bits)
    q = np.minimum(q, emax - mantissa_bits + 1)  # keep ldexp in range for blown lanes
    big = np.ldexp(1.0, q + 52)
    y = (xa + big) - big  # exact RNE to multiples of 2**q via float64 hardware
    y = np.where(y > limit, np.inf, y)
    y = np.where(blown, np.inf, y)

    if saturate:
        y = np.minimum(y, limit)

    out = np.copysign(y, x64)
    out = np.where(finite, out, x64)  # propagate NaN and (unless saturating) inf
    if saturate:
        inf_in = np.isinf(x64)
        out = np.where(inf_in, np.copysign(limit, x64), out)
    return out[0] if scalar else out


def round_float(x, exponent_bits: int, mantissa_bits: int):
    """Round to the nearest representable value, ties to even.

    Overflow goes to signed infinity, values below half the smallest
    subnormal go to signed zero, NaN propagates. Idempotent and monotone.
    """
    return _round_float_core(x, exponent_bits, mantissa_bits, saturate=False)


def saturate_float(x, exponent_bits: int, mantissa_bits: int):
    """Like :func:`round_float` but overflow clamps to the largest finite value.

    Used for accumulator-to-ACT conversion, where hardware saturates
    instead of producing infinities. NaN still propagates.
    """
    return _round_float_core(x, exponent_bits, mantissa_bits, saturate=True)


def round_to_format(x, fmt: FormatSpec):
    if fmt.kind != "floating":
        raise ValueError(f"round_to_format needs a floating format, got {fmt.name}")
    return round_float(x, fmt.exponent_bits, fmt.mantissa_bits)


def quantize_block_fp(t, channel_axis: int = 0, block_size: int = 10, mantissa_bits: int = 7):
    """Block floating point: blocks of ``block_size`` along the channel axis
    share one exponent equal to the largest element exponent in the block.

    Each element keeps sign plus ``mantissa_bits`` of magnitude aligned to
    the shared exponent (round to nearest even, magnitudes clamped to the
    mantissa range so the shared exponent is stable under requantization).
    Elements much smaller than the block maximum flush to zero. A trailing
    block shorter than ``block_size`` still carries a full exponent.
    """
    arr = np.asarray(t)
    out_dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float64
    x = np.moveaxis(arr.astype(np.float64), channel_axis, -1)
    channels = x.shape[-1]
    nblocks = -(-channels // block_size)
    pad = nblocks * block_size - channels
    if pad:
        x = np.concatenate([x, np.zeros(x.shape[:-1] + (pad,))], axis=-1)
    blocks = x.reshape(x.shape[:-1] + (nblocks, block_size))

    peak = np.max(np.abs(blocks), axis=-1, keepdims=True)
    _, e = np.frexp(peak)
    scale = np.ldexp(1.0, e - mantissa_bits)  # grid = 2**(block_exp - (M-1))
    n = np.rint(blocks / scale)
    top = float((1 << mantissa_bits) - 1)
    n = np.clip(n, -top, top)
    q = n * scale

    q = q.reshape(x.shape)
    if pad:
        q = q[..., :channels]
    return np.moveaxis(q, -1, channel_axis).astype(out_dtype)


def quantize_int8(t, p: IntQuantParams) -> np.ndarray:
    """q = clamp(round_half_even(x / scale), -127, +127) as int8."""
    q = np.rint(np.asarray(t, dtype=np.float64) / p.scale)
    return np.clip(q, -127, 127).astype(np.int8)


def dequantize_int8(q, p: IntQuantParams) -> np.ndarray:
    return (np.asarray(q, dtype=np.float64) * p.scale).astype(np.float32)


def fake_quantize_int8(t, p: IntQuantParams) -> np.ndarray:
    """Round-trip through the int8 grid, keeping the float dtype."""
    return dequantize_int8(quantize_int8(t, p), p)


_TINY_NORMAL = float(np.finfo(np.float32).tiny)


def _scale_from_max_abs(peak: float) -> IntQuantParams:
    if peak == 0.0:
        return IntQuantParams(scale=_TINY_NORMAL, degenerate=True)
    return IntQuantParams(scale=float(peak) / 127.0)


def calibrate_int8(params, clips, config) -> dict[str, IntQuantParams]:
    """Calibrate symmetric int8 scales for weights and activation sites.

    Weight scales are max-abs / 127 per tensor. Activation-site scales are
    the max-abs seen at each site over a teacher-forced forward pass of
    every calibration clip (features, codes), divided by 127. All
    zero points are 0. An all-zero tensor gets the smallest positive
    normal as a sentinel scale and is flagged ``degenerate``.
    """
    if not clips:
        raise ValueError("calibration requires at least one clip")

    scales: dict[str, IntQuantParams] = {}
    for name, tensor in params.items():
        if name.endswith(".bias"):
            continue  # biases fold into the integer accumulator
        scales["weight:" + name] = _scale_from_max_abs(float(np.max(np.abs(tensor))))

    from . import model  # local import: calibration drives a model forward

    site_peaks: dict[str, float] = {}
    for features, codes in clips:
        model.record_activation_ranges(params, features, codes, config, site_peaks)
    for site, peak in site_peaks.items():
        scales["site:" + site] = _scale_from_max_abs(peak)
    return scales


def _block_count(shape, channel_axis: int, block_size: int) -> int:
    channels = shape[channel_axis]
    fibers = 1
    for i, n in enumerate(shape):
        if i != channel_axis:
            fibers *= n
    return fibers * (-(-channels // block_size))


def default_channel_axis(shape) -> int:
    """Input-channel axis convention: axis 1 for matrices and conv weights."""
    return 1 if len(shape) >= 2 else 0


def bits_per_value(fmt: FormatSpec, shape=None, channel_axis: int | None = None) -> Fraction:
    """Storage cost per value, exact.

    Fixed-width formats ignore the shape. Block floating point charges
    8 bits per element plus 8 bits of shared exponent per block, so a
    partial trailing block costs extra. One-dimensional tensors (biases)
    are not block-formatted; they stay in the 32-bit accumulation format.
    """
    if not fmt.is_block:
        return Fraction(fmt.storage_bits)
    if shape is None:
        raise ValueError("block-floating storage cost depends on the tensor shape")
    if len(shape) < 2:
        return Fraction(32)
    axis = default_channel_axis(shape) if channel_axis is None else channel_axis
    numel = int(np.prod(shape))
    blocks = _block_count(shape, axis, fmt.block_size)
    return Fraction(8 * numel + 8 * blocks, numel)


def quantize_tensor(t, fmt: FormatSpec, *, int_params: IntQuantParams | None = None,
                    channel_axis: int | None = None):
    """Express a tensor in the given format (element values, shape preserved).

    Floating kinds round elementwise; block-floating dispatches to
    :func:`quantize_block_fp`; integer kinds need calibrated ``int_params``
    and return the dequantized grid values.
    """
    arr = np.asarray(t)
    if fmt.kind == "floating":
        out = round_to_format(arr.astype(np.float64), fmt)
        return out.astype(arr.dtype) if arr.dtype in (np.float32, np.float64) else out
    if fmt.is_block:
        if arr.ndim < 2:
            return arr  # 1-D tensors ride in the accumulation format
        axis = default_channel_axis(arr.shape) if channel_axis is None else channel_axis
        return quantize_block_fp(arr, axis, fmt.block_size, fmt.mantissa_bits)
    if int_params is None:
        raise CalibrationRequiredError(
            f"format {fmt.name} requires calibrated quantization parameters")
    return fake_quantize_int8(arr, int_params).astype(arr.dtype, copy=False)
