"""1-D convolution primitives under the INP/ACT precision contract.

Multiplication operands are converted to the INP format; dot-product
reductions run in a wide accumulator (float64, or int64 on the integer
path) and the result is converted once to the ACT format, saturating at
the format maximum. Elementwise ops (adds, gating, nonlinearities) round
their result to ACT after each op. On the integer path, activations are
requantized at calibrated sites instead, and biases fold into the
accumulator at the combined input*weight scale.

Training gradients (`conv1d_backward`, `conv_transpose1d_backward`)
bypass quantization entirely and run in base precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    ACT_FORMATS,
    FORMATS,
    CalibrationRequiredError,
    FormatSpec,
    IntQuantParams,
    quantize_int8,
    quantize_tensor,
    saturate_float,
)

__all__ = [
    "PrecisionContext",
    "context_for",
    "conv1d",
    "conv_transpose1d",
    "gated_unit",
    "relu",
    "add",
    "softmax_probs",
    "softmax_sample",
    "conv1d_backward",
    "conv_transpose1d_backward",
]


@dataclass(frozen=True)
class PrecisionContext:
    """INP format for multiplies, ACT format for sums and nonlinearities.

    Integer contexts carry the calibrated scales ("weight:<name>" and
    "site:<name>" keys); without them any integer operation raises
    :class:`CalibrationRequiredError`. Integer accumulators are 64-bit.
    """

    inp: FormatSpec
    act: FormatSpec
    int8_scales: dict[str, IntQuantParams] | None = None

    @property
    def is_integer(self) -> bool:
        return self.inp.is_integer

    def weight_params(self, name: str) -> IntQuantParams:
        return self._lookup("weight:" + name)

    def site_params(self, name: str) -> IntQuantParams:
        return self._lookup("site:" + name)

    def _lookup(self, key: str) -> IntQuantParams:
        if self.int8_scales is None or key not in self.int8_scales:
            raise CalibrationRequiredError(
                f"integer context needs calibrated scales (missing {key!r})")
        return self.int8_scales[key]


def context_for(format_name: str, int8_scales=None) -> PrecisionContext:
    fmt = FORMATS[format_name]
    return PrecisionContext(inp=fmt, act=ACT_FORMATS[fmt.accumulation],
                            int8_scales=int8_scales)


FP32_CTX = context_for("FP32")


def _to_act(x, ctx: PrecisionContext) -> np.ndarray:
    """Convert wide-accumulator values to ACT, saturating at format max."""
    y = saturate_float(np.asarray(x, dtype=np.float64),
                       ctx.act.exponent_bits, ctx.act.mantissa_bits)
    return np.asarray(y, dtype=np.float32)


def _check_conv_shapes(input, weight, dilation):
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    if input.ndim != 2 or weight.ndim != 3:
        raise ValueError("expected input [C, T] and weight [out, in, k]")
    if input.shape[0] != weight.shape[1]:
        raise ValueError(
            f"input channels {input.shape[0]} do not match weight in-channels {weight.shape[1]}")


def conv1d(input, weight, bias=None, dilation: int = 1, ctx: PrecisionContext = FP32_CTX,
           *, in_site: str | None = None, w_name: str | None = None,
           out_site: str | None = None):
    """Causal dilated 1-D convolution, output length equals input length.

    Left-pads (k-1)*dilation zeros. Operands convert to INP before each
    multiply; products are summed in a wide accumulator and converted to
    ACT; bias is added in ACT.

    ``in_site`` / ``w_name`` / ``out_site`` name the calibrated scale
    entries used on the integer path; other formats ignore them.
    """
    input = np.asarray(input)
    weight = np.asarray(weight)
    _check_conv_shapes(input, weight, dilation)
    k = weight.shape[2]
    t_len = input.shape[1]
    pad = (k - 1) * dilation

    if ctx.is_integer:
        in_p = ctx.site_params(in_site or "input")
        w_p = ctx.weight_params(w_name or "weight")
        qx = quantize_int8(input, in_p).astype(np.int64)
        qw = quantize_int8(weight, w_p).astype(np.int64)
        qx = np.pad(qx, ((0, 0), (pad, 0)))
        acc = np.zeros((weight.shape[0], t_len), dtype=np.int64)
        for j in range(k):
            acc += qw[:, :, j] @ qx[:, j * dilation:j * dilation + t_len]
        combined = in_p.scale * w_p.scale
        if bias is not None:
            acc += np.rint(np.asarray(bias, dtype=np.float64) / combined).astype(np.int64)[:, None]
        real = acc.astype(np.float64) * combined
        if out_site is not None:
            return _site_quantize(real, ctx, out_site)
        return real.astype(np.float32)

    xq = quantize_tensor(input, ctx.inp, channel_axis=0).astype(np.float64)
    wq = quantize_tensor(weight, ctx.inp, channel_axis=1).astype(np.float64)
    xq = np.pad(xq, ((0, 0), (pad, 0)))
    acc = np.zeros((weight.shape[0], t_len), dtype=np.float64)
    for j in range(k):
        acc += wq[:, :, j] @ xq[:, j * dilation:j * dilation + t_len]
    out = _to_act(acc, ctx)
    if bias is not None:
        b = _to_act(bias, ctx)
        out = _to_act(out.astype(np.float64) + b[:, None].astype(np.float64), ctx)
    return out


def conv_transpose1d(features, weight, bias=None, stride: int = 200,
                     ctx: PrecisionContext = FP32_CTX, *,
                     in_site: str | None = None, w_name: str | None = None,
                     out_site: str | None = None):
    """Transposed 1-D convolution with centered trimming.

    ``weight`` is [in, out, kernel]. The raw output of length
    (T-1)*stride + kernel is trimmed by (kernel - stride)/2 on each side
    so each input frame conditions exactly ``stride`` output samples.
    """
    features = np.asarray(features)
    weight = np.asarray(weight)
    if features.ndim != 2 or features.shape[1] < 1:
        raise ValueError("features must be [bands, T] with T >= 1")
    if features.shape[0] != weight.shape[0]:
        raise ValueError("feature bands do not match upsampler in-channels")
    kernel = weight.shape[2]
    if (kernel - stride) % 2 != 0:
        raise ValueError("kernel - stride must be even for centered trimming")
    trim = (kernel - stride) // 2
    t_in = features.shape[1]
    raw_len = (t_in - 1) * stride + kernel

    if ctx.is_integer:
        in_p = ctx.site_params(in_site or "input")
        w_p = ctx.weight_params(w_name or "weight")
        qf = quantize_int8(features, in_p).astype(np.int64)
        qw = quantize_int8(weight, w_p).astype(np.int64)
        contrib = _transpose_contrib(qw, qf)  # [out, t, kernel]
        acc = np.zeros((weight.shape[1], raw_len), dtype=np.int64)
        for t in range(t_in):
            acc[:, t * stride:t * stride + kernel] += contrib[:, t, :]
        combined = in_p.scale * w_p.scale
        if bias is not None:
            acc += np.rint(np.asarray(bias, dtype=np.float64) / combined).astype(np.int64)[:, None]
        real = acc.astype(np.float64) * combined
        real = real[:, trim:raw_len - trim]
        if out_site is not None:
            return _site_quantize(real, ctx, out_site)
        return real.astype(np.float32)

    fq = quantize_tensor(features, ctx.inp, channel_axis=0).astype(np.float64)
    wq = quantize_tensor(weight, ctx.inp, channel_axis=0).astype(np.float64)
    contrib = _transpose_contrib(wq, fq)
    acc = np.zeros((weight.shape[1], raw_len), dtype=np.float64)
    for t in range(t_in):
        acc[:, t * stride:t * stride + kernel] += contrib[:, t, :]
    acc = acc[:, trim:raw_len - trim]
    out = _to_act(acc, ctx)
    if bias is not None:
        b = _to_act(bias, ctx)
        out = _to_act(out.astype(np.float64) + b[:, None].astype(np.float64), ctx)
    return out


def _transpose_contrib(weight, features):
    """contrib[o, t, k] = sum_i weight[i, o, k] * features[i, t], via one GEMM."""
    n_in, n_out, kernel = weight.shape
    t_in = features.shape[1]
    flat = features.T @ weight.reshape(n_in, n_out * kernel)  # [t, out*k]
    return flat.reshape(t_in, n_out, kernel).transpose(1, 0, 2)


def _site_quantize(x, ctx: PrecisionContext, site: str):
    p = ctx.site_params(site)
    q = quantize_int8(x, p)
    return (q.astype(np.float64) * p.scale).astype(np.float32)


def add(a, b, ctx: PrecisionContext = FP32_CTX):
    """Elementwise add, result rounded to ACT (real-valued on integer paths)."""
    s = np.asarray(a, dtype=np.float64) + np.asarray(b, dtype=np.float64)
    if ctx.is_integer:
        return s.astype(np.float32)
    return _to_act(s, ctx)


def relu(x, ctx: PrecisionContext = FP32_CTX, *, site: str | None = None):
    y = np.maximum(np.asarray(x, dtype=np.float64), 0.0)
    if ctx.is_integer:
        return _site_quantize(y, ctx, site) if site else y.astype(np.float32)
    return _to_act(y, ctx)  # exact: relu introduces no new values


def gated_unit(pre_activation, ctx: PrecisionContext = FP32_CTX, *, site: str | None = None):
    """tanh/sigmoid gate: split channels in half, return tanh(a) * sigmoid(b).

    Nonlinearities are evaluated in base precision and the results rounded
    to ACT, then the product is rounded to ACT again. Integer contexts
    evaluate in real arithmetic and requantize at the named site.
    """
    x = np.asarray(pre_activation, dtype=np.float64)
    if x.shape[0] % 2 != 0:
        raise ValueError(f"gated unit needs an even channel count, got {x.shape[0]}")
    half = x.shape[0] // 2
    a, b = x[:half], x[half:]
    with np.errstate(over="ignore"):  # exp overflow yields the correct limit 0
        sig = 1.0 / (1.0 + np.exp(-b))
    if ctx.is_integer:
        z = np.tanh(a) * sig
        return _site_quantize(z, ctx, site) if site else z.astype(np.float32)
    t = _to_act(np.tanh(a), ctx).astype(np.float64)
    s = _to_act(sig, ctx).astype(np.float64)
    return _to_act(t * s, ctx)


def softmax_probs(logits, ctx: PrecisionContext = FP32_CTX) -> np.ndarray:
    """Numerically stable softmax evaluated under the ACT format.

    Integer contexts compute in base precision on the dequantized logits;
    an integer softmax is not part of the contract.
    """
    x = np.asarray(logits, dtype=np.float64)
    if not np.any(x > -np.inf):
        raise ValueError("softmax over logits that are all -inf")
    if ctx.is_integer:
        e = np.exp(x - np.max(x))
        return e / e.sum()
    shifted = _to_act(x - np.max(x), ctx).astype(np.float64)
    e = _to_act(np.exp(shifted), ctx).astype(np.float64)
    total = _to_act(np.sum(e), ctx)
    return np.asarray(_to_act(e / float(total), ctx), dtype=np.float64)


def softmax_sample(logits, rng: np.random.Generator, ctx: PrecisionContext = FP32_CTX) -> int:
    """Categorical draw from softmax(logits); deterministic per rng state."""
    p = softmax_probs(logits, ctx)
    total = p.sum()
    if not np.isfinite(total) or total <= 0:
        raise ValueError("softmax probabilities do not normalize")
    cdf = np.cumsum(p / total)
    return int(np.searchsorted(cdf, rng.random(), side="right").clip(0, len(cdf) - 1))


# ---------------------------------------------------------------------------
# Reverse-mode gradients, base precision only.


def conv1d_forward_train(input, weight, bias=None, dilation: int = 1):
    """Plain causal dilated conv used by the training path, no quantization."""
    input = np.asarray(input)
    weight = np.asarray(weight)
    _check_conv_shapes(input, weight, dilation)
    k = weight.shape[2]
    t_len = input.shape[1]
    xpad = np.pad(input, ((0, 0), ((k - 1) * dilation, 0)))
    out = np.zeros((weight.shape[0], t_len), dtype=np.result_type(input, weight))
    for j in range(k):
        out += weight[:, :, j] @ xpad[:, j * dilation:j * dilation + t_len]
    if bias is not None:
        out = out + np.asarray(bias)[:, None]
    return out


def conv1d_backward(input, weight, grad_output, dilation: int = 1):
    """Gradients of the causal dilated conv w.r.t. input, weight and bias."""
    input = np.asarray(input)
    weight = np.asarray(weight)
    grad_output = np.asarray(grad_output)
    _check_conv_shapes(input, weight, dilation)
    if grad_output.shape != (weight.shape[0], input.shape[1]):
        raise ValueError("grad_output shape does not match the forward output")
    k = weight.shape[2]
    t_len = input.shape[1]
    pad = (k - 1) * dilation
    xpad = np.pad(input, ((0, 0), (pad, 0)))

    grad_xpad = np.zeros_like(xpad, dtype=np.result_type(grad_output, weight))
    grad_w = np.zeros_like(weight, dtype=grad_xpad.dtype)
    for j in range(k):
        sl = slice(j * dilation, j * dilation + t_len)
        grad_xpad[:, sl] += weight[:, :, j].T @ grad_output
        grad_w[:, :, j] = grad_output @ xpad[:, sl].T
    grad_input = grad_xpad[:, pad:]
    grad_bias = grad_output.sum(axis=1)
    return grad_input, grad_w, grad_bias


def conv_transpose1d_forward_train(features, weight, bias=None, stride: int = 200):
    features = np.asarray(features)
    weight = np.asarray(weight)
    kernel = weight.shape[2]
    trim = (kernel - stride) // 2
    t_in = features.shape[1]
    raw_len = (t_in - 1) * stride + kernel
    contrib = _transpose_contrib(weight, features)
    out = np.zeros((weight.shape[1], raw_len), dtype=contrib.dtype)
    for t in range(t_in):
        out[:, t * stride:t * stride + kernel] += contrib[:, t, :]
    out = out[:, trim:raw_len - trim]
    if bias is not None:
        out = out + np.asarray(bias)[:, None]
    return out


def conv_transpose1d_backward(features, weight, grad_output, stride: int = 200):
    """Gradients of the trimmed transposed conv w.r.t. features, weight, bias."""
    features = np.asarray(features)
    weight = np.asarray(weight)
    grad_output = np.asarray(grad_output)
    kernel = weight.shape[2]
    trim = (kernel - stride) // 2
    t_in = features.shape[1]
    raw_len = (t_in - 1) * stride + kernel
    grad_raw = np.zeros((weight.shape[1], raw_len), dtype=grad_output.dtype)
    grad_raw[:, trim:raw_len - trim] = grad_output
    # grad_contrib[t, o*k] mirrors _transpose_contrib's GEMM layout
    n_out = weight.shape[1]
    grad_contrib = np.empty((t_in, n_out, kernel), dtype=grad_output.dtype)
    for t in range(t_in):
        grad_contrib[t] = grad_raw[:, t * stride:t * stride + kernel]
    flat = grad_contrib.reshape(t_in, n_out * kernel)
    grad_w = (features @ flat).reshape(weight.shape)
    grad_f = (weight.reshape(weight.shape[0], -1) @ flat.T)
    grad_bias = grad_output.sum(axis=1)
    return grad_f, grad_w, grad_bias
