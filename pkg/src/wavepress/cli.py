"""Command-line surface.

Subcommands: params, ops, train, quantize, synthesize, report, verify.
Every command that writes outputs also writes a run manifest next to them
(command, config snapshot, seeds, paths, tool version, wall time).

Exit codes: 0 success, 1 verification or runtime failure, 2 bad
configuration, 3 unreadable data, 4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__, audio_io, compression, figures, kernels, model, numerics, training

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

DATA_DIR_ENV = "WAVEPRESS_DATA_DIR"


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model configuration")
    g.add_argument("--skip-channels", type=int, default=None)
    g.add_argument("--residual-channels", type=int, default=None)
    g.add_argument("--audio-channels", type=int, default=None)
    g.add_argument("--layers", type=int, default=None)
    g.add_argument("--dilation-cycle", type=int, default=None)
    g.add_argument("--mel-bins", type=int, default=None)
    g.add_argument("--upsample-kernel", type=int, default=None)
    g.add_argument("--upsample-stride", type=int, default=None)
    g.add_argument("--sample-rate", type=int, default=None)
    g.add_argument("--config", type=str, default=None,
                   help="JSON file with model/train overrides")


_FLAG_TO_FIELD = {
    "skip_channels": "skip_channels", "residual_channels": "residual_channels",
    "audio_channels": "audio_channels", "layers": "layers",
    "dilation_cycle": "dilation_cycle", "mel_bins": "mel_bins",
    "upsample_kernel": "upsample_kernel", "upsample_stride": "upsample_stride",
    "sample_rate": "sample_rate",
}


def _model_config(args) -> model.ModelConfig:
    overrides = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                blob = json.load(fh)
        except (OSError, json.JSONDecodeError) as err:
            raise CliError(f"cannot read config file: {err}", EXIT_CONFIG)
        overrides.update(blob.get("model", blob))
    for flag, fieldname in _FLAG_TO_FIELD.items():
        v = getattr(args, flag, None)
        if v is not None:
            overrides[fieldname] = v
    try:
        return model.ModelConfig(**{k: int(v) for k, v in overrides.items()
                                    if k in model.ModelConfig.__dataclass_fields__})
    except (ValueError, TypeError) as err:
        raise CliError(f"invalid model configuration: {err}", EXIT_CONFIG)


def _write_manifest(directory, command: str, args_dict: dict, outputs: list[str],
                    started: float, extra: dict | None = None) -> str:
    manifest = {
        "tool": "wavepress",
        "tool_version": __version__,
        "command": command,
        "arguments": args_dict,
        "outputs": [str(o) for o in outputs],
        "wall_time_s": round(time.time() - started, 3),
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(directory, "run_manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def _serializable(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


# ---------------------------------------------------------------------------
# params / ops


def _render_table(headers, rows, fmt: str, out=None) -> None:
    out = out if out is not None else sys.stdout
    if fmt == "json":
        payload = [dict(zip(headers, row)) for row in rows]
        json.dump(payload, out, indent=1)
        out.write("\n")
        return
    if fmt == "tsv":
        out.write("\t".join(headers) + "\n")
        for row in rows:
            out.write("\t".join("" if c is None else str(c) for c in row) + "\n")
        return
    widths = [max(len(str(h)), *(len(_cell(r[i])) for r in rows))
              for i, h in enumerate(headers)]
    out.write("  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)) + "\n")
    out.write("  ".join("-" * w for w in widths) + "\n")
    for row in rows:
        out.write("  ".join(_cell(c).rjust(widths[i]) if i >= 2 else _cell(c).ljust(widths[i])
                            for i, c in enumerate(row)) + "\n")


def _cell(c) -> str:
    if c is None:
        return "-"
    if isinstance(c, float):
        return f"{c:.2f}"
    if isinstance(c, int):
        return f"{c:,}"
    return str(c)


def cmd_params(args) -> int:
    cfg = _model_config(args)
    rows = []
    for row in model.count_parameters(cfg):
        rows.append([row.name, row.layer_type, row.per_layer, row.total])
    rows.append(["Total", "", None, model.total_parameters(cfg)])
    _render_table(["layer", "type", "per_layer_params", "total_params"],
                  rows, args.format)
    return EXIT_OK


def cmd_ops(args) -> int:
    cfg = _model_config(args)
    rows = []
    for row in model.count_ops(cfg):
        per = None if row.per_layer_gops is None else round(row.per_layer_gops, 6)
        tot = None if row.total_gops is None else round(row.total_gops, 6)
        rows.append([row.name, per, tot])
    rows.append(["Total", None, round(model.total_gops(cfg), 6)])
    _render_table(["layer", "per_layer_gops", "total_gops"], rows, args.format)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _load_dataset(spec: str, seed: int):
    if spec.startswith("synth:"):
        body = spec[len("synth:"):]
        try:
            n, dur = body.split("x")
            return audio_io.synth_dataset(seed=seed, n_clips=int(n), duration=float(dur))
        except ValueError as err:
            raise CliError(f"bad synthetic dataset spec {spec!r}: {err}", EXIT_CONFIG)
    path = spec
    if not os.path.exists(path) and DATA_DIR_ENV in os.environ:
        path = os.path.join(os.environ[DATA_DIR_ENV], spec)
    try:
        return audio_io.load_dataset_manifest(path)
    except (OSError, ValueError) as err:
        raise CliError(f"cannot load dataset: {err}", EXIT_DATA)


def _sparsity_from_args(args) -> float | None:
    if args.prune_cr is not None and args.sparsity is not None:
        raise CliError("give either --prune-cr or --sparsity, not both", EXIT_CONFIG)
    if args.prune_cr is not None:
        if args.prune_cr < 1:
            raise CliError("--prune-cr must be >= 1", EXIT_CONFIG)
        return 1.0 - 1.0 / args.prune_cr
    if args.sparsity is not None:
        if not (0.0 <= args.sparsity < 1.0):
            raise CliError("--sparsity must lie in [0, 1)", EXIT_CONFIG)
        return args.sparsity
    return None


def cmd_train(args) -> int:
    started = time.time()
    cfg = _model_config(args)
    try:
        train_cfg = training.TrainConfig(
            learning_rate=args.lr, batch_size=args.batch_size,
            segment_samples=args.segment, total_steps=args.steps, seed=args.seed)
    except ValueError as err:
        raise CliError(f"invalid training configuration: {err}", EXIT_CONFIG)
    dataset = _load_dataset(args.data, args.seed)
    os.makedirs(args.out, exist_ok=True)

    sparsity = _sparsity_from_args(args)
    outputs = []
    pruning_state = None

    try:
        if args.prune_mode == "2:4":
            dense, result = compression.one_shot_2to4_procedure(cfg, train_cfg, dataset)
            dense_path = os.path.join(args.out, "dense_checkpoint.wnck")
            audio_io.write_checkpoint(dense_path, audio_io.Checkpoint(
                params=dense.params, config=cfg.to_dict(), seed=args.seed, fmt="FP32"))
            outputs.append(dense_path)
            pruning_state = {"mode": "2:4"}
        elif sparsity is not None:
            schedules = compression.make_schedules(cfg, sparsity, args.steps,
                                                   delta=args.prune_every)
            result = training.train(cfg, train_cfg, dataset, schedules=schedules)
            pruning_state = {"mode": "iterative", "final_sparsity": sparsity,
                             "delta": args.prune_every,
                             "schedule": next(iter(schedules.values())).to_dict(),
                             "events": len(result.events)}
        else:
            result = training.train(cfg, train_cfg, dataset)
    except training.TrainingDivergedError as err:
        result = err.result
        ckpt_path = os.path.join(args.out, "checkpoint.wnck")
        audio_io.write_checkpoint(ckpt_path, audio_io.Checkpoint(
            params=result.params, config=cfg.to_dict(), seed=args.seed, fmt="FP32",
            masks=result.masks or None,
            metadata={"diverged_at": result.completed_steps + 1}))
        print(f"training diverged: {err}; last good checkpoint at {ckpt_path}",
              file=sys.stderr)
        return EXIT_DIVERGED

    ckpt_path = os.path.join(args.out, "checkpoint.wnck")
    audio_io.write_checkpoint(ckpt_path, audio_io.Checkpoint(
        params=result.params, config=cfg.to_dict(), seed=args.seed, fmt="FP32",
        masks=result.masks or None, pruning=pruning_state))
    outputs.append(ckpt_path)

    metrics_path = os.path.join(args.out, "metrics.tsv")
    result.write_metrics(metrics_path)
    outputs.append(metrics_path)
    if result.metrics:
        outputs.append(figures.render_loss_curve(
            result.metrics, os.path.join(args.out, "loss_curve.png")))

    report = compression.compression_ratios(result.params, result.masks or None,
                                            "FP32", cfg)
    print(f"final loss {result.metrics[-1]['loss']:.4f}  "
          f"sparse-layer CR {report.sparse_layer_cr:.2f}  "
          f"model CR {report.model_cr:.2f}")
    _write_manifest(args.out, "train", _serializable(args), outputs, started,
                    extra={"model_config": cfg.to_dict(),
                           "train_config": train_cfg.to_dict()})
    return EXIT_OK


# ---------------------------------------------------------------------------
# quantize


def _context_from_checkpoint(ckpt: audio_io.Checkpoint) -> kernels.PrecisionContext:
    return kernels.context_for(ckpt.fmt, ckpt.int8_scales)


def cmd_quantize(args) -> int:
    started = time.time()
    try:
        ckpt = audio_io.read_checkpoint(args.checkpoint)
    except (OSError, audio_io.CheckpointError) as err:
        raise CliError(f"cannot read checkpoint: {err}", EXIT_DATA)
    if args.format not in numerics.FORMATS:
        raise CliError(f"unknown format {args.format!r}; choose from "
                       f"{', '.join(numerics.FORMATS)}", EXIT_CONFIG)
    cfg = model.ModelConfig.from_dict(ckpt.config)
    fmt = numerics.FORMATS[args.format]

    scales = None
    params = {k: v.copy() for k, v in ckpt.params.items()}
    if fmt.is_integer:
        if not args.calib:
            raise CliError("INT8 quantization requires --calib with calibration clips",
                           EXIT_CONFIG)
        clips = []
        for clip, feats in _load_dataset(args.calib, ckpt.seed):
            clips.append((feats, audio_io.mulaw_encode(clip.samples)))
        scales = numerics.calibrate_int8(params, clips, cfg)
        for name, tensor in params.items():
            key = "weight:" + name
            if key in scales:
                params[name] = numerics.fake_quantize_int8(tensor, scales[key]) \
                    .astype(np.float32)
    elif fmt.is_block:
        for name, tensor in params.items():
            if tensor.ndim >= 2:
                axis = 0 if name == "upsample.weight" else 1
                params[name] = numerics.quantize_block_fp(
                    tensor, axis, fmt.block_size, fmt.mantissa_bits)
    # floating formats are tagged and converted on the fly at inference

    out_ckpt = audio_io.Checkpoint(params=params, config=ckpt.config, seed=ckpt.seed,
                                   fmt=args.format, masks=ckpt.masks,
                                   int8_scales=scales, pruning=ckpt.pruning,
                                   metadata=dict(ckpt.metadata, quantized_from=ckpt.fmt))
    audio_io.write_checkpoint(args.out, out_ckpt)

    report = compression.compression_ratios(params, ckpt.masks, args.format, cfg)
    print(f"model CR {report.model_cr:.2f}  composed CR {report.composed_cr:.2f}  "
          f"format CR {report.format_cr:.2f}")
    _write_manifest(os.path.dirname(os.path.abspath(args.out)) or ".", "quantize",
                    _serializable(args), [args.out], started)
    return EXIT_OK


# ---------------------------------------------------------------------------
# synthesize


def cmd_synthesize(args) -> int:
    started = time.time()
    try:
        ckpt = audio_io.read_checkpoint(args.checkpoint)
    except (OSError, audio_io.CheckpointError) as err:
        raise CliError(f"cannot read checkpoint: {err}", EXIT_DATA)
    cfg = model.ModelConfig.from_dict(ckpt.config)
    try:
        feats = audio_io.read_features(args.features, expected_bands=cfg.mel_bins)
    except (OSError, ValueError) as err:
        raise CliError(f"cannot read features: {err}", EXIT_DATA)
    ctx = _context_from_checkpoint(ckpt)

    codes, clip = model.generate(ckpt.params, feats, cfg, seed=args.seed, ctx=ctx)
    audio_io.write_wav(args.out, clip)
    outputs = [args.out]
    if args.codes_out:
        codes.astype(np.uint8).tofile(args.codes_out)
        outputs.append(args.codes_out)
    if args.compare:
        other = np.fromfile(args.compare, dtype=np.uint8).astype(np.int64)
        n = min(other.size, codes.size)
        diff = np.nonzero(codes[:n] != other[:n])[0]
        if diff.size or other.size != codes.size:
            first = int(diff[0]) if diff.size else n
            print(f"first divergence at step {first}")
        else:
            print("code sequences identical")
    print(f"wrote {codes.size} samples to {args.out}")
    _write_manifest(os.path.dirname(os.path.abspath(args.out)) or ".", "synthesize",
                    _serializable(args), outputs, started,
                    extra={"n_samples": int(codes.size)})
    return EXIT_OK


# ---------------------------------------------------------------------------
# report / verify


def _report_rows(report) -> list[list]:
    rows = [
        ["format", report.fmt],
        ["sparse_layer_cr", f"{report.sparse_layer_cr:.4f}"],
        ["model_cr", f"{report.model_cr:.4f}"],
        ["composed_cr", f"{report.composed_cr:.4f}"],
        ["sparsity_cr", f"{report.sparsity_cr:.4f}"],
        ["format_cr", f"{report.format_cr:.4f}"],
        ["speedup_upsample_dense", f"{report.speedup_upsample_dense:.4f}"],
        ["speedup_upsample_pruned", f"{report.speedup_upsample_pruned:.4f}"],
    ]
    for name, s in report.per_layer_sparsity.items():
        rows.append([f"sparsity:{name}", f"{s:.6f}"])
    return rows


def cmd_report(args) -> int:
    started = time.time()
    try:
        ckpt = audio_io.read_checkpoint(args.checkpoint)
    except (OSError, audio_io.CheckpointError) as err:
        raise CliError(f"cannot read checkpoint: {err}", EXIT_DATA)
    cfg = model.ModelConfig.from_dict(ckpt.config)
    report = compression.compression_ratios(ckpt.params, ckpt.masks, ckpt.fmt, cfg)
    rows = _report_rows(report)
    if args.format == "json":
        print(json.dumps({k: v for k, v in rows}, indent=1))
    else:
        for key, value in rows:
            print(f"{key}\t{value}")
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        tsv_path = os.path.join(args.out_dir, "report.tsv")
        with open(tsv_path, "w", encoding="utf-8") as fh:
            for key, value in rows:
                fh.write(f"{key}\t{value}\n")
        outputs = [tsv_path]
        if not args.no_figures:
            outputs += figures.render_report_figures(report, args.out_dir)
        _write_manifest(args.out_dir, "report", _serializable(args), outputs, started)
    return EXIT_OK


def _verify_checkpoint(path) -> list[str]:
    problems = []
    try:
        ckpt = audio_io.read_checkpoint(path)
    except (OSError, audio_io.CheckpointError) as err:
        return [str(err)]
    if ckpt.masks:
        for name, mask in ckpt.masks.items():
            if name not in ckpt.params:
                problems.append(f"mask {name!r} has no tensor")
                continue
            tensor = ckpt.params[name]
            if tensor.shape != mask.keep.shape:
                problems.append(f"mask {name!r} shape mismatch")
                continue
            dropped = tensor[~mask.keep]
            if dropped.size and np.any(dropped != 0.0):
                problems.append(f"tensor {name!r} has nonzero masked weights")
            if mask.scheme == "balanced-2:4":
                try:
                    compression.validate_2to4(mask)
                except ValueError as err:
                    problems.append(str(err))
    if ckpt.fmt == "INT8" and ckpt.int8_scales:
        for name, tensor in ckpt.params.items():
            key = "weight:" + name
            if key not in ckpt.int8_scales:
                continue
            p = ckpt.int8_scales[key]
            grid = numerics.fake_quantize_int8(tensor, p).astype(np.float32)
            if not np.array_equal(grid, tensor):
                problems.append(f"tensor {name!r} is off its integer grid")
            if np.any(tensor[tensor == 0.0] != 0.0):
                problems.append(f"tensor {name!r} breaks zero exactness")
    return problems


def cmd_verify(args) -> int:
    problems = _verify_checkpoint(args.checkpoint)
    if problems:
        for p in problems:
            print(f"FAIL: {p}", file=sys.stderr)
        return EXIT_FAIL
    print("verify: all checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wavepress",
        description="Vocoder compression bench: accounting, emulated formats, "
                    "pruning, synthesis, and reports.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("params", help="parameter-count table")
    _add_model_flags(p)
    p.add_argument("--format", choices=["table", "json", "tsv"], default="table")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("ops", help="operation-count table (GOP per audio second)")
    _add_model_flags(p)
    p.add_argument("--format", choices=["table", "json", "tsv"], default="table")
    p.set_defaults(func=cmd_ops)

    p = sub.add_parser("train", help="desk-scale training with optional pruning")
    _add_model_flags(p)
    p.add_argument("--data", required=True,
                   help="dataset manifest path, or synth:<clips>x<seconds>")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--segment", type=int, default=None,
                   help="segment length in samples (default: one second)")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prune-cr", type=float, default=None,
                   help="target sparse-layer compression ratio")
    p.add_argument("--sparsity", type=float, default=None,
                   help="target sparsity fraction (alias for --prune-cr)")
    p.add_argument("--prune-mode", choices=["iterative", "2:4"], default="iterative")
    p.add_argument("--prune-every", type=int, default=500)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("quantize", help="write a checkpoint in a target format")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--format", required=True)
    p.add_argument("--calib", default=None,
                   help="calibration dataset manifest (required for INT8)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("synthesize", help="autoregressive synthesis to WAV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--codes-out", default=None, help="also write raw u8 codes")
    p.add_argument("--compare", default=None,
                   help="compare emitted codes against a raw u8 code file")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("report", help="compression ratios, speedups, sparsity")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--format", choices=["table", "json", "tsv"], default="table")
    p.add_argument("--out-dir", default=None,
                   help="write report.tsv and figures here")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("verify", help="checkpoint invariant suite")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code
    except numerics.CalibrationRequiredError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
