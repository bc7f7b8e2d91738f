"""Desk-scale teacher-forced training: segment sampling, cross entropy,
bias-corrected Adam, the iterative-pruning hook, and evaluation under any
precision context.

Training runs in base precision (float32 by default; float64 selectable
for gradient verification) and never quantizes. Masked weights are
re-zeroed after every optimizer step. Runs are deterministic per seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import audio_io, compression, model as model_mod
from .kernels import FP32_CTX, PrecisionContext

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "TrainingDivergedError",
    "GradientError",
    "sample_segment",
    "cross_entropy",
    "adam_step",
    "train",
    "TrainResult",
    "evaluate",
]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    segment_samples: int | None = None  # None: one second at the model rate
    total_steps: int = 1000
    seed: int = 0
    dtype: str = "float32"  # "float64" for gradient verification

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        for b in (self.beta1, self.beta2):
            if not (0.0 <= b < 1.0):
                raise ValueError("betas must lie in [0, 1)")
        if self.batch_size < 1 or self.total_steps < 0:
            raise ValueError("batch_size and total_steps must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, params) -> "OptimizerState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


class GradientError(RuntimeError):
    pass


class TrainingDivergedError(RuntimeError):
    """Loss or gradients became non-finite; carries the last good result."""

    def __init__(self, message: str, result: "TrainResult"):
        super().__init__(message)
        self.result = result


def sample_segment(clip: audio_io.AudioClip, features: audio_io.FeatureMatrix,
                   rng, segment_samples: int, hop: int = audio_io.HOP):
    """A frame-aligned random segment: (feature rows, mu-law code targets).

    Starts are uniform over frame boundaries (divisible by ``hop``); clips
    shorter than the segment are right-padded with zero samples, whose
    codes are the silence code, and zero feature rows.
    """
    if segment_samples % hop != 0:
        raise ValueError("segment length must be a multiple of the frame hop")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    seg_frames = segment_samples // hop
    n_frames = features.frames
    max_start = max(n_frames - seg_frames, 0)
    start_frame = int(rng.integers(0, max_start + 1))
    start = start_frame * hop

    samples = clip.samples[start:start + segment_samples]
    if samples.size < segment_samples:
        samples = np.pad(samples, (0, segment_samples - samples.size))
    codes = audio_io.mulaw_encode(samples)

    feats = features.data[start_frame:start_frame + seg_frames]
    if feats.shape[0] < seg_frames:
        feats = np.pad(feats, ((0, seg_frames - feats.shape[0]), (0, 0)))
    return feats, codes


def cross_entropy(logits, targets):
    """Mean over time of -log softmax(logits)[target], natural log."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.ndim != 1 or logits.shape[1] != targets.size:
        raise ValueError("logits must be [classes, T] with one target per column")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[0]):
        raise ValueError("targets out of range")
    m = logits.max(axis=0)
    lse = m + np.log(np.sum(np.exp(logits - m), axis=0))
    return float(np.mean(lse - logits[targets, np.arange(targets.size)]))


def cross_entropy_grad(logits, targets):
    """(loss, dloss/dlogits); the gradient is softmax minus one-hot over T."""
    logits64 = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    m = logits64.max(axis=0)
    e = np.exp(logits64 - m)
    z = e.sum(axis=0)
    lse = m + np.log(z)
    t_len = targets.size
    loss = float(np.mean(lse - logits64[targets, np.arange(t_len)]))
    grad = e / z
    grad[targets, np.arange(t_len)] -= 1.0
    return loss, grad / t_len


def adam_step(params, grads, state: OptimizerState, cfg: TrainConfig,
              masks: dict[str, compression.Mask] | None = None) -> None:
    """Standard bias-corrected Adam update in place; masked weights are
    re-zeroed afterwards. Non-finite gradients abort with the tensor name."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient in {name!r} at step {state.step + 1}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - cfg.beta1) * (g - m)
        v += (1.0 - cfg.beta2) * (g * g - v)
        update = cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        p -= update.astype(p.dtype)
    if masks:
        compression.apply_masks(params, masks)


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    masks: dict[str, compression.Mask]
    metrics: list[dict]
    events: list[dict]
    optimizer: OptimizerState
    completed_steps: int

    def write_metrics(self, path) -> None:
        mask_names = sorted(self.masks) if self.masks else []
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\t".join(["step", "loss"] + [f"sparsity:{n}" for n in mask_names]))
            fh.write("\n")
            for row in self.metrics:
                cells = [str(row["step"]), repr(row["loss"])]
                cells += [f"{row['sparsity'].get(n, 0.0):.6f}" for n in mask_names]
                fh.write("\t".join(cells) + "\n")


def train(model_cfg: model_mod.ModelConfig, train_cfg: TrainConfig, dataset,
          schedules: dict[str, compression.PruneSchedule] | None = None,
          initial_params=None, fixed_masks=None) -> TrainResult:
    """The training loop: sample segments, teacher-forced forward in base
    precision, cross entropy, backward, Adam, then the pruning hook.

    ``schedules`` drives iterative unstructured pruning; ``fixed_masks``
    holds a mask set constant (the one-shot retraining stage). On
    divergence the last finite parameters are preserved inside the raised
    :class:`TrainingDivergedError`.
    """
    if not dataset:
        raise ValueError("dataset must contain at least one clip")
    if schedules and fixed_masks:
        raise ValueError("choose either a schedule or fixed masks, not both")
    segment = train_cfg.segment_samples or model_cfg.sample_rate
    dtype = train_cfg.np_dtype()

    rng = np.random.default_rng(train_cfg.seed)
    if initial_params is not None:
        params = {k: v.copy() for k, v in initial_params.items()}
    else:
        params = model_mod.build(model_cfg, init_seed=train_cfg.seed)
    masks: dict[str, compression.Mask] = dict(fixed_masks) if fixed_masks else {}
    if masks:
        compression.apply_masks(params, masks)
    opt = OptimizerState.fresh(params)

    metrics: list[dict] = []
    events: list[dict] = []

    def result(steps_done: int) -> TrainResult:
        return TrainResult(params=params, masks=masks, metrics=metrics,
                           events=events, optimizer=opt, completed_steps=steps_done)

    for step in range(1, train_cfg.total_steps + 1):
        grads_sum: dict[str, np.ndarray] = {}
        loss_sum = 0.0
        for _ in range(train_cfg.batch_size):
            clip, feats = dataset[int(rng.integers(0, len(dataset)))]
            seg_feats, codes = sample_segment(clip, feats, rng, segment)
            logits, cache = model_mod.forward_train(params, seg_feats, codes,
                                                    model_cfg, dtype=dtype)
            loss, dlogits = cross_entropy_grad(logits, codes)
            loss_sum += loss
            for name, g in model_mod.backward_train(dlogits, cache, model_cfg).items():
                if name in grads_sum:
                    grads_sum[name] += g
                else:
                    grads_sum[name] = g
        loss = loss_sum / train_cfg.batch_size
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"loss became {loss} at step {step}",
                                        result(step - 1))
        for name in grads_sum:
            grads_sum[name] /= train_cfg.batch_size
        try:
            adam_step(params, grads_sum, opt, train_cfg, masks=masks or None)
        except GradientError as err:
            raise TrainingDivergedError(str(err), result(step - 1)) from err

        if schedules:
            masks = compression.iterative_prune_hook(step, params, schedules, masks)
            if any(step % sch.delta == 0 for sch in schedules.values()):
                events.append({
                    "step": step,
                    "scheduled": {n: compression.schedule_sparsity(step, sch)
                                  for n, sch in schedules.items()},
                    "achieved": {n: masks[n].sparsity for n in schedules if n in masks},
                })
        metrics.append({
            "step": step,
            "loss": loss,
            "sparsity": {n: m.sparsity for n, m in masks.items()},
        })
    return result(train_cfg.total_steps)


def evaluate(params, dataset, model_cfg: model_mod.ModelConfig,
             ctx: PrecisionContext = FP32_CTX) -> float:
    """Mean teacher-forced cross entropy over whole clips, no sampling."""
    if model_cfg.audio_channels != 256:
        raise ValueError("evaluation expects 256 mu-law classes")
    losses = []
    for clip, feats in dataset:
        codes = audio_io.mulaw_encode(clip.samples)
        n = (codes.size // audio_io.HOP) * audio_io.HOP
        logits = model_mod.forward_teacher_forced(params, feats, codes[:n],
                                                  model_cfg, ctx)
        losses.append(cross_entropy(logits, codes[:n]))
    return float(np.mean(losses))
