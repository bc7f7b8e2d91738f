"""The gated dilated-convolution vocoder: construction, accounting,
teacher-forced forward, training-path gradients, and fast autoregressive
generation with per-layer ring buffers.

Parameters live in a flat dict of named float32 tensors. Convolution
weights are [out, in, kernel]; the feature upsampler is a transposed conv
with weight [in, out, kernel]. Residual convolutions exist for every layer
except the last (its gated output only feeds the skip path), which is what
the reference parameter table counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from . import audio_io, kernels
from .kernels import PrecisionContext, FP32_CTX
from .numerics import quantize_int8, quantize_tensor

__all__ = [
    "ModelConfig",
    "desk_config",
    "param_shapes",
    "build",
    "count_parameters",
    "count_ops",
    "forward_teacher_forced",
    "generate",
    "GenerationState",
    "record_activation_ranges",
    "upsample_features",
]

Parameters = dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. Defaults are the full-size model."""

    skip_channels: int = 240      # s
    residual_channels: int = 120  # r
    audio_channels: int = 256     # a
    layers: int = 16              # L
    dilation_cycle: int = 8       # D
    mel_bins: int = 80
    upsample_kernel: int = 800
    upsample_stride: int = 200
    sample_rate: int = 16000

    def __post_init__(self):
        for name in ("skip_channels", "residual_channels", "audio_channels",
                     "layers", "dilation_cycle", "mel_bins"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.audio_channels & (self.audio_channels - 1):
            raise ValueError("audio_channels must be a power of two")
        if self.upsample_kernel % self.upsample_stride != 0:
            raise ValueError("upsample kernel must be a multiple of the stride")
        if (self.upsample_kernel - self.upsample_stride) % 2 != 0:
            raise ValueError("upsample kernel - stride must be even")

    def dilation(self, layer: int) -> int:
        return 2 ** (layer % self.dilation_cycle)

    @property
    def dilations(self) -> list[int]:
        return [self.dilation(i) for i in range(self.layers)]

    @property
    def receptive_field(self) -> int:
        return 1 + sum(self.dilations)  # kernel 2 everywhere

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: int(v) for k, v in d.items() if k in cls.__dataclass_fields__})


def desk_config(**overrides) -> ModelConfig:
    """Small instance for desk-scale runs and tests."""
    base = dict(skip_channels=32, residual_channels=16, audio_channels=256,
                layers=4, dilation_cycle=2)
    base.update(overrides)
    return ModelConfig(**base)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    s, r, a = cfg.skip_channels, cfg.residual_channels, cfg.audio_channels
    m = cfg.mel_bins
    shapes: dict[str, tuple[int, ...]] = {
        "embedding": (a, r),
        "upsample.weight": (m, m, cfg.upsample_kernel),
        "upsample.bias": (m,),
    }
    for i in range(cfg.layers):
        shapes[f"layer{i}.dilation.weight"] = (2 * r, r, 2)
        shapes[f"layer{i}.dilation.bias"] = (2 * r,)
        shapes[f"layer{i}.conditional.weight"] = (2 * r, m, 1)
        shapes[f"layer{i}.conditional.bias"] = (2 * r,)
        if i < cfg.layers - 1:
            shapes[f"layer{i}.residual.weight"] = (r, r, 1)
            shapes[f"layer{i}.residual.bias"] = (r,)
        shapes[f"layer{i}.skip.weight"] = (s, r, 1)
        shapes[f"layer{i}.skip.bias"] = (s,)
    shapes["out.weight"] = (a, s, 1)
    shapes["end.weight"] = (a, a, 1)
    return shapes


def _fan_in(name: str, shape: tuple[int, ...], cfg: ModelConfig) -> int:
    if name == "embedding":
        return cfg.residual_channels
    if name == "upsample.weight":
        return cfg.mel_bins * (cfg.upsample_kernel // cfg.upsample_stride)
    return shape[1] * shape[2]  # conv [out, in, k]


def build(cfg: ModelConfig, init_seed: int = 0) -> Parameters:
    """Fresh parameters: weights uniform(-k, k) with k = sqrt(1/fan_in),
    biases zero. Deterministic per seed."""
    rng = np.random.default_rng(init_seed)
    params: Parameters = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            k = (1.0 / _fan_in(name, shape, cfg)) ** 0.5
            params[name] = rng.uniform(-k, k, size=shape).astype(np.float32)
    return params


# ---------------------------------------------------------------------------
# Accounting


@dataclass(frozen=True)
class LayerCount:
    name: str
    layer_type: str
    per_layer: int
    repeats: int

    @property
    def total(self) -> int:
        return self.per_layer * self.repeats


def count_parameters(cfg: ModelConfig) -> list[LayerCount]:
    s, r, a, m = (cfg.skip_channels, cfg.residual_channels,
                  cfg.audio_channels, cfg.mel_bins)
    L = cfg.layers
    return [
        LayerCount("Embedding", "Embedding", a * r, 1),
        LayerCount("Feature Upsample", "ConvTranspose1d",
                   m * m * cfg.upsample_kernel + m, 1),
        LayerCount("Dilation", "Dilated Conv1d", 2 * r * r * 2 + 2 * r, L),
        LayerCount("Conditional", "Conv1d", 2 * r * m + 2 * r, L),
        LayerCount("Residual", "Conv1d", r * r + r, L - 1),
        LayerCount("Skip", "Conv1d", s * r + s, L),
        LayerCount("Out", "Conv1d", a * s, 1),
        LayerCount("End", "Conv1d", a * a, 1),
    ]


def total_parameters(cfg: ModelConfig) -> int:
    return sum(row.total for row in count_parameters(cfg))


@dataclass(frozen=True)
class OpsCount:
    name: str
    per_layer_gops: float | None  # GOP per second of audio; None for zero-op rows
    repeats: int

    @property
    def total_gops(self) -> float | None:
        return None if self.per_layer_gops is None else self.per_layer_gops * self.repeats


def layer_macs_per_sample(cfg: ModelConfig) -> dict[str, int]:
    """Multiply-accumulate counts per generated sample, by layer group.

    The upsampler amortizes to in*out*kernel/stride per sample; the
    embedding is a table lookup and counts zero.
    """
    s, r, a, m = (cfg.skip_channels, cfg.residual_channels,
                  cfg.audio_channels, cfg.mel_bins)
    return {
        "embedding": 0,
        "upsample": m * m * (cfg.upsample_kernel // cfg.upsample_stride),
        "dilation": 2 * r * r * 2,
        "conditional": 2 * r * m,
        "residual": r * r,
        "skip": s * r,
        "out": a * s,
        "end": a * a,
    }


def group_repeats(cfg: ModelConfig) -> dict[str, int]:
    L = cfg.layers
    return {"embedding": 1, "upsample": 1, "dilation": L, "conditional": L,
            "residual": L - 1, "skip": L, "out": 1, "end": 1}


def count_ops(cfg: ModelConfig) -> list[OpsCount]:
    """GOP per second of synthesized audio; multiply-adds count as 2 ops."""
    macs = layer_macs_per_sample(cfg)
    reps = group_repeats(cfg)
    to_gops = 2 * cfg.sample_rate / 1e9
    labels = {"embedding": "Embedding", "upsample": "Feature Upsample",
              "dilation": "Dilation", "conditional": "Conditional",
              "residual": "Residual", "skip": "Skip", "out": "Out", "end": "End"}
    rows = []
    for key, label in labels.items():
        g = None if macs[key] == 0 else macs[key] * to_gops
        rows.append(OpsCount(label, g, reps[key]))
    return rows


def total_gops(cfg: ModelConfig) -> float:
    return sum(row.total_gops or 0.0 for row in count_ops(cfg))


# ---------------------------------------------------------------------------
# Emulated forward (precision-contract path)


def _features_array(features) -> np.ndarray:
    """Accept a FeatureMatrix or a [frames, bands] array; return [bands, frames]."""
    if isinstance(features, audio_io.FeatureMatrix):
        return np.asarray(features.data, dtype=np.float32).T
    arr = np.asarray(features, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError("features must be 2-D [frames, bands]")
    return arr.T


def upsample_features(params: Parameters, features, cfg: ModelConfig,
                      ctx: PrecisionContext = FP32_CTX, recorder=None):
    feats = _features_array(features)
    if feats.shape[0] != cfg.mel_bins:
        raise ValueError(f"expected {cfg.mel_bins} feature bands, got {feats.shape[0]}")
    _note(recorder, "features", feats)
    up = kernels.conv_transpose1d(
        feats, params["upsample.weight"], params["upsample.bias"],
        stride=cfg.upsample_stride, ctx=ctx,
        in_site="features", w_name="upsample.weight")
    _note(recorder, "upsample_out", up)
    return up


def _note(recorder, site: str, tensor):
    if recorder is not None:
        peak = float(np.max(np.abs(tensor))) if np.size(tensor) else 0.0
        recorder[site] = max(recorder.get(site, 0.0), peak)


def _check_codes(codes, cfg: ModelConfig) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    if codes.ndim != 1:
        raise ValueError("codes must be a 1-D sequence")
    if codes.size and (codes.min() < 0 or codes.max() >= cfg.audio_channels):
        raise ValueError(f"codes must lie in [0, {cfg.audio_channels})")
    return codes


def forward_teacher_forced(params: Parameters, features, codes, cfg: ModelConfig,
                           ctx: PrecisionContext = FP32_CTX, recorder=None) -> np.ndarray:
    """Logits [audio_channels, T] with ground-truth codes as autoregressive
    input (the code at t-1 embeds into the step-t input; step 0 sees the
    silence code). All convolutions follow the precision context."""
    codes = _check_codes(codes, cfg)
    t_len = codes.size
    up = upsample_features(params, features, cfg, ctx, recorder)
    if up.shape[1] < t_len:
        raise ValueError(
            f"upsampled features cover {up.shape[1]} samples, need {t_len}")
    up = up[:, :t_len]

    prev = np.concatenate([[audio_io.SILENCE_CODE % cfg.audio_channels], codes[:-1]])
    x = params["embedding"][prev].T.astype(np.float32)

    skip_sum = np.zeros((cfg.skip_channels, t_len), dtype=np.float32)
    for i in range(cfg.layers):
        _note(recorder, f"layer{i}_in", x)
        pre = kernels.conv1d(
            x, params[f"layer{i}.dilation.weight"], params[f"layer{i}.dilation.bias"],
            dilation=cfg.dilation(i), ctx=ctx,
            in_site=f"layer{i}_in", w_name=f"layer{i}.dilation.weight")
        cond = kernels.conv1d(
            up, params[f"layer{i}.conditional.weight"], params[f"layer{i}.conditional.bias"],
            ctx=ctx, in_site="upsample_out", w_name=f"layer{i}.conditional.weight")
        pre = kernels.add(pre, cond, ctx)
        _note(recorder, f"layer{i}_gate_pre", pre)
        z = kernels.gated_unit(pre, ctx, site=f"layer{i}_gate")
        _note(recorder, f"layer{i}_gate", z)
        skip_sum = kernels.add(skip_sum, kernels.conv1d(
            z, params[f"layer{i}.skip.weight"], params[f"layer{i}.skip.bias"],
            ctx=ctx, in_site=f"layer{i}_gate", w_name=f"layer{i}.skip.weight"), ctx)
        if i < cfg.layers - 1:
            res = kernels.conv1d(
                z, params[f"layer{i}.residual.weight"], params[f"layer{i}.residual.bias"],
                ctx=ctx, in_site=f"layer{i}_gate", w_name=f"layer{i}.residual.weight")
            x = kernels.add(x, res, ctx)

    h = kernels.relu(skip_sum, ctx, site="skip_relu")
    _note(recorder, "skip_relu", h)
    h = kernels.conv1d(h, params["out.weight"], ctx=ctx,
                       in_site="skip_relu", w_name="out.weight")
    h = kernels.relu(h, ctx, site="out_relu")
    _note(recorder, "out_relu", h)
    logits = kernels.conv1d(h, params["end.weight"], ctx=ctx,
                            in_site="out_relu", w_name="end.weight", out_site="logits")
    _note(recorder, "logits", logits)
    return logits


def record_activation_ranges(params: Parameters, features, codes, cfg: ModelConfig,
                             peaks: dict[str, float]) -> None:
    """Teacher-forced full-precision pass that tallies max-abs per site."""
    codes = np.asarray(codes, dtype=np.int64)
    forward_teacher_forced(params, features, codes, cfg, FP32_CTX, recorder=peaks)


# ---------------------------------------------------------------------------
# Fast autoregressive generation


@dataclass
class GenerationState:
    """Per-layer ring buffers of past layer inputs plus sampling state."""

    buffers: list[np.ndarray]   # layer i: [dilation_i, r]
    prev_code: np.int64
    step: int
    rng: np.random.Generator

    @classmethod
    def fresh(cls, cfg: ModelConfig, seed: int) -> "GenerationState":
        bufs = [np.zeros((cfg.dilation(i), cfg.residual_channels), dtype=np.float32)
                for i in range(cfg.layers)]
        silence = np.int64(audio_io.SILENCE_CODE % cfg.audio_channels)
        return cls(buffers=bufs, prev_code=silence, step=0,
                   rng=np.random.default_rng(seed))


class _StepConv:
    """Single-timestep view of conv1d with pre-quantized weights.

    Reproduces the vectorized kernel arithmetic exactly: same operand
    quantization, same tap order, same wide-accumulate-then-ACT rounding.
    """

    def __init__(self, weight, bias, ctx: PrecisionContext,
                 in_site: str, w_name: str, out_site: str | None = None):
        self.ctx = ctx
        self.out_site = out_site
        self.in_site = in_site
        self.bias = bias
        if ctx.is_integer:
            self.in_p = ctx.site_params(in_site)
            w_p = ctx.weight_params(w_name)
            self.qw = quantize_int8(weight, w_p).astype(np.int64)
            self.combined = self.in_p.scale * w_p.scale
            self.qb = (np.rint(np.asarray(bias, dtype=np.float64) / self.combined)
                       .astype(np.int64) if bias is not None else None)
        else:
            self.wq = quantize_tensor(weight, ctx.inp, channel_axis=1).astype(np.float64)

    def __call__(self, *taps: np.ndarray) -> np.ndarray:
        """taps are the input vectors for kernel positions 0..k-1 (oldest first)."""
        ctx = self.ctx
        if ctx.is_integer:
            acc = np.zeros(self.qw.shape[0], dtype=np.int64)
            for j, x in enumerate(taps):
                qx = quantize_int8(x, self.in_p).astype(np.int64)
                acc += self.qw[:, :, j] @ qx
            if self.qb is not None:
                acc += self.qb
            real = acc.astype(np.float64) * self.combined
            if self.out_site is not None:
                return kernels._site_quantize(real, ctx, self.out_site)
            return real.astype(np.float32)
        acc = np.zeros(self.wq.shape[0], dtype=np.float64)
        for j, x in enumerate(taps):
            xq = quantize_tensor(x[:, None], ctx.inp, channel_axis=0)[:, 0]
            acc += self.wq[:, :, j] @ xq.astype(np.float64)
        out = kernels._to_act(acc, ctx)
        if self.bias is not None:
            b = kernels._to_act(self.bias, ctx)
            out = kernels._to_act(out.astype(np.float64) + b.astype(np.float64), ctx)
        return out


def generate(params: Parameters, features, cfg: ModelConfig, seed: int = 0,
             ctx: PrecisionContext = FP32_CTX,
             return_logits: bool = False):
    """Autoregressive synthesis of stride*frames samples.

    Returns (codes, AudioClip); with ``return_logits`` also the per-step
    logits matrix for equivalence checks against the teacher-forced path.
    """
    up = upsample_features(params, features, cfg, ctx)
    n_samples = up.shape[1]
    state = GenerationState.fresh(cfg, seed)

    convs = {}
    for i in range(cfg.layers):
        convs[f"dil{i}"] = _StepConv(params[f"layer{i}.dilation.weight"],
                                     params[f"layer{i}.dilation.bias"], ctx,
                                     f"layer{i}_in", f"layer{i}.dilation.weight")
        convs[f"skip{i}"] = _StepConv(params[f"layer{i}.skip.weight"],
                                      params[f"layer{i}.skip.bias"], ctx,
                                      f"layer{i}_gate", f"layer{i}.skip.weight")
        if i < cfg.layers - 1:
            convs[f"res{i}"] = _StepConv(params[f"layer{i}.residual.weight"],
                                         params[f"layer{i}.residual.bias"], ctx,
                                         f"layer{i}_gate", f"layer{i}.residual.weight")
    convs["out"] = _StepConv(params["out.weight"], None, ctx, "skip_relu", "out.weight")
    convs["end"] = _StepConv(params["end.weight"], None, ctx, "out_relu", "end.weight",
                             out_site="logits")

    # The conditional convs are kernel-1 over precomputed features, so their
    # whole time range can be evaluated up front with identical arithmetic.
    cond = [kernels.conv1d(up, params[f"layer{i}.conditional.weight"],
                           params[f"layer{i}.conditional.bias"], ctx=ctx,
                           in_site="upsample_out", w_name=f"layer{i}.conditional.weight")
            for i in range(cfg.layers)]

    codes = np.empty(n_samples, dtype=np.int64)
    logit_rows = np.empty((cfg.audio_channels, n_samples), dtype=np.float32) \
        if return_logits else None

    for t in range(n_samples):
        x = params["embedding"][state.prev_code].astype(np.float32)
        skip_sum = np.zeros(cfg.skip_channels, dtype=np.float32)
        for i in range(cfg.layers):
            d = cfg.dilation(i)
            slot = t % d
            x_old = state.buffers[i][slot].copy()
            state.buffers[i][slot] = x
            pre = convs[f"dil{i}"](x_old, x)
            pre = kernels.add(pre, cond[i][:, t], ctx)
            z = kernels.gated_unit(pre, ctx, site=f"layer{i}_gate")
            skip_sum = kernels.add(skip_sum, convs[f"skip{i}"](z), ctx)
            if i < cfg.layers - 1:
                x = kernels.add(x, convs[f"res{i}"](z), ctx)
        h = kernels.relu(skip_sum, ctx, site="skip_relu")
        h = convs["out"](h)
        h = kernels.relu(h, ctx, site="out_relu")
        logits = convs["end"](h)
        if return_logits:
            logit_rows[:, t] = logits
        code = kernels.softmax_sample(logits, state.rng, ctx)
        codes[t] = code
        state.prev_code = np.int64(code)
        state.step += 1

    audio = audio_io.AudioClip(
        samples=audio_io.mulaw_decode(codes).astype(np.float32),
        sample_rate=cfg.sample_rate)
    if return_logits:
        return codes, audio, logit_rows
    return codes, audio


# ---------------------------------------------------------------------------
# Training path: full precision forward with cached intermediates + backward


def forward_train(params: Parameters, features, codes, cfg: ModelConfig,
                  dtype=np.float32):
    """Teacher-forced forward in plain arithmetic; returns (logits, cache)."""
    codes = _check_codes(codes, cfg)
    t_len = codes.size
    feats = _features_array(features).astype(dtype)
    p = {k: v.astype(dtype) for k, v in params.items()}

    up_full = kernels.conv_transpose1d_forward_train(
        feats, p["upsample.weight"], p["upsample.bias"], stride=cfg.upsample_stride)
    if up_full.shape[1] < t_len:
        raise ValueError(
            f"upsampled features cover {up_full.shape[1]} samples, need {t_len}")
    up = up_full[:, :t_len]

    prev = np.concatenate([[audio_io.SILENCE_CODE % cfg.audio_channels], codes[:-1]])
    x = p["embedding"][prev].T

    cache = {"prev": prev, "feats": feats, "up": up, "params": p,
             "layers": [], "codes": codes}
    skip_sum = np.zeros((cfg.skip_channels, t_len), dtype=dtype)
    for i in range(cfg.layers):
        pre = kernels.conv1d_forward_train(
            x, p[f"layer{i}.dilation.weight"], p[f"layer{i}.dilation.bias"],
            dilation=cfg.dilation(i))
        pre = pre + kernels.conv1d_forward_train(
            up, p[f"layer{i}.conditional.weight"], p[f"layer{i}.conditional.bias"])
        half = pre.shape[0] // 2
        t_part = np.tanh(pre[:half])
        with np.errstate(over="ignore"):  # exp overflow yields the correct limit 0
            s_part = 1.0 / (1.0 + np.exp(-pre[half:]))
        z = t_part * s_part
        skip_sum = skip_sum + kernels.conv1d_forward_train(
            z, p[f"layer{i}.skip.weight"], p[f"layer{i}.skip.bias"])
        layer_cache = {"x": x, "tanh": t_part, "sig": s_part, "z": z}
        cache["layers"].append(layer_cache)
        if i < cfg.layers - 1:
            x = x + kernels.conv1d_forward_train(
                z, p[f"layer{i}.residual.weight"], p[f"layer{i}.residual.bias"])

    h1 = np.maximum(skip_sum, 0)
    h2 = kernels.conv1d_forward_train(h1, p["out.weight"])
    h3 = np.maximum(h2, 0)
    logits = kernels.conv1d_forward_train(h3, p["end.weight"])
    cache.update(skip_sum=skip_sum, h1=h1, h2=h2, h3=h3)
    return logits, cache


def backward_train(grad_logits, cache, cfg: ModelConfig) -> Parameters:
    """Reverse-mode gradients for every parameter tensor."""
    p = cache["params"]
    grads: Parameters = {}

    dh3, grads["end.weight"], _ = kernels.conv1d_backward(
        cache["h3"], p["end.weight"], np.asarray(grad_logits, dtype=cache["h3"].dtype))
    dh2 = dh3 * (cache["h2"] > 0)
    dh1, grads["out.weight"], _ = kernels.conv1d_backward(cache["h1"], p["out.weight"], dh2)
    dskip = dh1 * (cache["skip_sum"] > 0)

    dup = np.zeros_like(cache["up"])
    g_above = None  # gradient w.r.t. the layer-above input
    for i in reversed(range(cfg.layers)):
        lc = cache["layers"][i]
        dz, grads[f"layer{i}.skip.weight"], grads[f"layer{i}.skip.bias"] = \
            kernels.conv1d_backward(lc["z"], p[f"layer{i}.skip.weight"], dskip)
        if i < cfg.layers - 1:
            dz_res, grads[f"layer{i}.residual.weight"], grads[f"layer{i}.residual.bias"] = \
                kernels.conv1d_backward(lc["z"], p[f"layer{i}.residual.weight"], g_above)
            dz = dz + dz_res
        da = dz * lc["sig"] * (1.0 - lc["tanh"] ** 2)
        db = dz * lc["tanh"] * lc["sig"] * (1.0 - lc["sig"])
        dpre = np.concatenate([da, db], axis=0)
        dx, grads[f"layer{i}.dilation.weight"], grads[f"layer{i}.dilation.bias"] = \
            kernels.conv1d_backward(lc["x"], p[f"layer{i}.dilation.weight"], dpre,
                                    dilation=cfg.dilation(i))
        dcond, grads[f"layer{i}.conditional.weight"], grads[f"layer{i}.conditional.bias"] = \
            kernels.conv1d_backward(cache["up"], p[f"layer{i}.conditional.weight"], dpre)
        dup += dcond
        if i < cfg.layers - 1:
            dx = dx + g_above  # identity branch of the residual connection
        g_above = dx

    demb = np.zeros_like(p["embedding"])
    np.add.at(demb, cache["prev"], g_above.T)
    grads["embedding"] = demb

    t_len = cache["up"].shape[1]
    full_len = cache["feats"].shape[1] * cfg.upsample_stride
    dup_full = np.zeros((cache["up"].shape[0], full_len), dtype=dup.dtype)
    dup_full[:, :t_len] = dup
    _, grads["upsample.weight"], grads["upsample.bias"] = \
        kernels.conv_transpose1d_backward(cache["feats"], p["upsample.weight"],
                                          dup_full, stride=cfg.upsample_stride)
    return grads
