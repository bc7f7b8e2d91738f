"""Magnitude pruning and compression accounting.

Two mask schemes: unstructured (drop the smallest-magnitude entries per
tensor, count set by a cubic sparsity schedule) and balanced 2:4 (keep the
2 largest magnitudes in every aligned group of 4 along the flattened
in-channel x kernel axis). Tie-breaks are deterministic by flat index.

Size accounting follows the bit-cost model in :mod:`wavepress.numerics`.
Reports carry both the direct bit-quotient compression ratio and the
composed form (sparsity CR times format CR), plus theoretical speedups
under both upsampler conventions, since the reference tables compose
multiplicatively and keep the upsampler's operations in the dense pool.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import model as model_mod
from .numerics import FORMATS, FormatSpec, bits_per_value

__all__ = [
    "PruneSchedule",
    "schedule_sparsity",
    "Mask",
    "prune_unstructured",
    "prune_2to4",
    "validate_2to4",
    "pruned_weight_names",
    "apply_masks",
    "iterative_prune_hook",
    "one_shot_2to4_procedure",
    "CompressionReport",
    "compression_ratios",
    "theoretical_speedup",
]


@dataclass(frozen=True)
class PruneSchedule:
    """Cubic sparsity schedule, evaluated only at multiples of ``delta``."""

    final_sparsity: float
    n_events: int
    initial_sparsity: float = 0.0
    start_step: int = 0
    delta: int = 500
    exponent: int = 3

    def __post_init__(self):
        if not (0.0 <= self.initial_sparsity <= self.final_sparsity < 1.0):
            raise ValueError("need 0 <= initial <= final < 1")
        if self.delta < 1:
            raise ValueError("delta must be >= 1")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def schedule_sparsity(t: int, sch: PruneSchedule) -> float:
    """Sparsity at step t; constant between pruning events."""
    if t < 0:
        raise ValueError("step must be >= 0")
    t_eff = (t // sch.delta) * sch.delta
    span = sch.n_events * sch.delta
    if span <= 0:
        progress = 1.0 if t_eff >= sch.start_step else 0.0
    else:
        progress = min(max((t_eff - sch.start_step) / span, 0.0), 1.0)
    return sch.final_sparsity + (sch.initial_sparsity - sch.final_sparsity) * \
        (1.0 - progress) ** sch.exponent


@dataclass
class Mask:
    """Per-tensor keep bitmap (True = keep)."""

    name: str
    scheme: str  # "unstructured" | "balanced-2:4"
    keep: np.ndarray

    def __post_init__(self):
        self.keep = np.asarray(self.keep, dtype=bool)

    @property
    def popcount(self) -> int:
        return int(self.keep.sum())

    @property
    def sparsity(self) -> float:
        return 1.0 - self.popcount / self.keep.size


def prune_unstructured(t, sparsity: float, name: str = "") -> Mask:
    """Drop the round(sparsity * numel) smallest magnitudes.

    Equal magnitudes drop lowest flat index first, so masks are
    reproducible bit for bit.
    """
    if not (0.0 <= sparsity < 1.0):
        raise ValueError(f"sparsity must be in [0, 1), got {sparsity}")
    arr = np.asarray(t)
    n_drop = int(round(sparsity * arr.size))
    keep = np.ones(arr.size, dtype=bool)
    if n_drop:
        order = np.argsort(np.abs(arr).reshape(-1), kind="stable")
        keep[order[:n_drop]] = False
    return Mask(name=name, scheme="unstructured", keep=keep.reshape(arr.shape))


def prune_2to4(t, name: str = "") -> Mask:
    """Keep the 2 largest magnitudes per aligned group of 4 along the
    flattened (in-channel x kernel) axis; trailing short groups keep
    ceil(len/2). Ties keep the lowest index."""
    arr = np.asarray(t)
    flat = np.abs(arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr.reshape(1, -1))
    rows, width = flat.shape
    keep = np.zeros((rows, width), dtype=bool)

    full = (width // 4) * 4
    if full:
        groups = flat[:, :full].reshape(rows, -1, 4)
        order = np.argsort(-groups, axis=-1, kind="stable")
        sel = order[:, :, :2]
        rr = np.arange(rows)[:, None, None]
        gg = np.arange(groups.shape[1])[None, :, None]
        kept = np.zeros_like(groups, dtype=bool)
        kept[rr, gg, sel] = True
        keep[:, :full] = kept.reshape(rows, full)
    tail = width - full
    if tail:
        n_keep = (tail + 1) // 2
        order = np.argsort(-flat[:, full:], axis=-1, kind="stable")
        for r in range(rows):
            keep[r, full + order[r, :n_keep]] = True
    return Mask(name=name, scheme="balanced-2:4", keep=keep.reshape(arr.shape))


def validate_2to4(mask: Mask) -> None:
    """Raise with the tensor name and group index on any unbalanced group."""
    keep = mask.keep.reshape(mask.keep.shape[0], -1) if mask.keep.ndim > 1 \
        else mask.keep.reshape(1, -1)
    width = keep.shape[1]
    full = (width // 4) * 4
    for r in range(keep.shape[0]):
        row = keep[r]
        if full:
            counts = row[:full].reshape(-1, 4).sum(axis=1)
            bad = np.nonzero(counts != 2)[0]
            if bad.size:
                g = int(bad[0])
                raise ValueError(
                    f"tensor {mask.name!r}: group {g} of row {r} keeps "
                    f"{int(counts[g])} of 4 values, expected 2")
        tail = width - full
        if tail:
            want = (tail + 1) // 2
            got = int(row[full:].sum())
            if got != want:
                raise ValueError(
                    f"tensor {mask.name!r}: trailing group of row {r} keeps "
                    f"{got} of {tail} values, expected {want}")


def pruned_weight_names(cfg: model_mod.ModelConfig) -> list[str]:
    """The prunable set: repeated-layer weights, the out head, and the
    feature upsampler. Biases, the embedding, and the end head stay dense."""
    names = ["upsample.weight"]
    for i in range(cfg.layers):
        names.append(f"layer{i}.dilation.weight")
        names.append(f"layer{i}.conditional.weight")
        if i < cfg.layers - 1:
            names.append(f"layer{i}.residual.weight")
        names.append(f"layer{i}.skip.weight")
    names.append("out.weight")
    return names


def apply_masks(params: dict[str, np.ndarray], masks: dict[str, Mask]) -> None:
    """Zero masked weights in place."""
    for name, mask in masks.items():
        params[name] *= mask.keep


def iterative_prune_hook(step: int, params: dict[str, np.ndarray],
                         schedules: dict[str, PruneSchedule],
                         masks: dict[str, Mask] | None = None) -> dict[str, Mask]:
    """Training-loop hook: at multiples of each tensor's delta, recompute the
    unstructured mask at the scheduled sparsity and zero the dropped weights.
    Between events the existing masks pass through unchanged."""
    masks = dict(masks) if masks else {}
    for name in schedules:
        if name not in params:
            raise KeyError(f"schedule refers to unknown tensor {name!r}")
    updated = False
    for name, sch in schedules.items():
        if step % sch.delta != 0:
            continue
        s = schedule_sparsity(step, sch)
        masks[name] = prune_unstructured(params[name], s, name)
        updated = True
    if updated:
        apply_masks(params, {n: m for n, m in masks.items() if n in schedules})
    return masks


def make_schedules(cfg: model_mod.ModelConfig, final_sparsity: float,
                   total_steps: int, delta: int = 500,
                   span_fraction: float = 0.8) -> dict[str, PruneSchedule]:
    """One schedule per prunable tensor, ramping over span_fraction of the run."""
    n_events = max(1, int(round(total_steps * span_fraction / delta)))
    sch = PruneSchedule(final_sparsity=final_sparsity, n_events=n_events, delta=delta)
    return {name: sch for name in pruned_weight_names(cfg)}


def one_shot_2to4_procedure(model_cfg, train_cfg, dataset):
    """Train dense, prune 2:4 once, retrain the same number of steps with the
    masks fixed. Returns (dense_result, retrained_result)."""
    from . import training  # deferred: training drives this module's hooks

    dense = training.train(model_cfg, train_cfg, dataset)
    masks = {name: prune_2to4(dense.params[name], name)
             for name in pruned_weight_names(model_cfg)}
    pruned_params = {k: v.copy() for k, v in dense.params.items()}
    apply_masks(pruned_params, masks)
    retrained = training.train(model_cfg, train_cfg, dataset,
                               initial_params=pruned_params, fixed_masks=masks)
    return dense, retrained


# ---------------------------------------------------------------------------
# Size and speedup accounting


def _channel_axis_for(name: str, shape) -> int:
    if name == "upsample.weight":
        return 0  # transposed-conv weight stores in-channels first
    return 1 if len(shape) >= 2 else 0


@dataclass
class TensorBits:
    name: str
    numel: int
    kept: int
    bits_original: int
    bits_compressed: Fraction

    @property
    def sparsity(self) -> float:
        return 1.0 - self.kept / self.numel


@dataclass
class CompressionReport:
    fmt: str
    rows: list[TensorBits]
    pruned_names: list[str]
    sparse_layer_cr: float
    model_cr: float          # direct bit quotient at (masks, format)
    sparsity_cr: float       # bit quotient at (masks, FP32)
    format_cr: float         # bit quotient at (no masks, format)
    composed_cr: float       # sparsity_cr * format_cr, the reference-table form
    speedup_upsample_dense: float
    speedup_upsample_pruned: float

    @property
    def per_layer_sparsity(self) -> dict[str, float]:
        pruned = set(self.pruned_names)
        return {row.name: row.sparsity for row in self.rows if row.name in pruned}


def _bits(params, masks, fmt: FormatSpec) -> tuple[list[TensorBits], Fraction, Fraction]:
    rows = []
    total_orig = 0
    total_comp = Fraction(0)
    for name in sorted(params):
        arr = params[name]
        numel = int(arr.size)
        kept = int(masks[name].popcount) if masks and name in masks else numel
        bpv = bits_per_value(fmt, arr.shape, _channel_axis_for(name, arr.shape))
        row = TensorBits(name=name, numel=numel, kept=kept,
                         bits_original=numel * 32, bits_compressed=kept * bpv)
        rows.append(row)
        total_orig += row.bits_original
        total_comp += row.bits_compressed
    return rows, Fraction(total_orig), total_comp


def compression_ratios(params, masks, format_name: str,
                       cfg: model_mod.ModelConfig) -> CompressionReport:
    """Original size over compressed size, per the bit-cost model.

    Mask and index storage overhead is excluded; the ratios are upper
    bounds. ``composed_cr`` multiplies the sparsity-only and format-only
    ratios, which is how the reference combined table is built; the direct
    quotient is reported alongside.
    """
    fmt = FORMATS[format_name]
    fp32 = FORMATS["FP32"]
    rows, orig, comp = _bits(params, masks, fmt)
    _, _, comp_fp32 = _bits(params, masks, fp32)
    _, _, comp_fmt_dense = _bits(params, None, fmt)

    pruned = [n for n in pruned_weight_names(cfg) if n in params]
    pruned_set = set(pruned)
    p_orig = sum(r.bits_original for r in rows if r.name in pruned_set)
    p_comp = sum((r.bits_compressed for r in rows if r.name in pruned_set), Fraction(0))

    report = CompressionReport(
        fmt=format_name,
        rows=rows,
        pruned_names=pruned,
        sparse_layer_cr=float(Fraction(p_orig) / p_comp),
        model_cr=float(orig / comp),
        sparsity_cr=float(orig / comp_fp32),
        format_cr=float(orig / comp_fmt_dense),
        composed_cr=float((orig / comp_fp32) * (orig / comp_fmt_dense)),
        speedup_upsample_dense=theoretical_speedup(cfg, masks, include_upsample=False),
        speedup_upsample_pruned=theoretical_speedup(cfg, masks, include_upsample=True),
    )
    return report


_GROUP_OF = {"dilation": "dilation", "conditional": "conditional",
             "residual": "residual", "skip": "skip"}


def _tensor_group(name: str) -> str | None:
    if name == "upsample.weight":
        return "upsample"
    if name == "out.weight":
        return "out"
    if name.startswith("layer") and name.endswith(".weight"):
        return name.split(".")[1]
    return None


def theoretical_speedup(cfg: model_mod.ModelConfig, masks,
                        include_upsample: bool = False) -> float:
    """Dense multiply-add count over the sparse count, per generated sample.

    The prunable pool is the repeated-layer convolutions plus the out head;
    the upsampler and end head count dense unless ``include_upsample``
    moves the upsampler into the pool. Achieved (not nominal) density is
    used per tensor.
    """
    macs = model_mod.layer_macs_per_sample(cfg)
    reps = model_mod.group_repeats(cfg)
    dense_total = sum(macs[g] * reps[g] for g in macs)

    density: dict[str, float] = {}
    if masks:
        for name, mask in masks.items():
            density[name] = mask.popcount / mask.keep.size

    pool = {"dilation", "conditional", "residual", "skip", "out"}
    if include_upsample:
        pool.add("upsample")

    sparse_total = 0.0
    for g in macs:
        if g in ("embedding",):
            continue
        if g in ("out", "upsample"):
            names = ["out.weight" if g == "out" else "upsample.weight"]
        else:
            names = [f"layer{i}.{g}.weight" for i in range(reps[g])
                     if g != "residual" or i < cfg.layers - 1]
        for name in names:
            d = density.get(name, 1.0) if g in pool else 1.0
            sparse_total += macs[g] * d
    return dense_total / sparse_total
