"""Report figures, rendered to files next to the delimited output."""

from __future__ import annotations

import os


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def render_report_figures(report, out_dir) -> list[str]:
    """Per-layer sparsity bars and a compression/speedup summary chart."""
    plt = _pyplot()
    paths = []

    sparsity = report.per_layer_sparsity
    fig, ax = plt.subplots(figsize=(8, max(2.5, 0.28 * len(sparsity))))
    names = list(sparsity)
    ax.barh(range(len(names)), [sparsity[n] for n in names], color="#4878a8")
    ax.set_yticks(range(len(names)))
    ax.set_yticklabels(names, fontsize=7)
    ax.set_xlim(0, 1)
    ax.set_xlabel("achieved sparsity")
    ax.set_title(f"Per-layer sparsity ({report.fmt})")
    ax.invert_yaxis()
    fig.tight_layout()
    path = os.path.join(out_dir, "report_sparsity.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    paths.append(path)

    labels = ["sparse-layer CR", "model CR", "composed CR", "format CR",
              "speedup (upsample dense)", "speedup (upsample pruned)"]
    values = [report.sparse_layer_cr, report.model_cr, report.composed_cr,
              report.format_cr, report.speedup_upsample_dense,
              report.speedup_upsample_pruned]
    fig, ax = plt.subplots(figsize=(7, 3.2))
    bars = ax.bar(range(len(values)), values, color="#6a9a58")
    ax.set_xticks(range(len(values)))
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=7)
    ax.set_ylabel("ratio")
    ax.set_title(f"Compression summary ({report.fmt})")
    for bar, v in zip(bars, values):
        ax.text(bar.get_x() + bar.get_width() / 2, v, f"{v:.2f}",
                ha="center", va="bottom", fontsize=7)
    fig.tight_layout()
    path = os.path.join(out_dir, "report_compression.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    paths.append(path)
    return paths


def render_loss_curve(metrics, path) -> str:
    plt = _pyplot()
    steps = [row["step"] for row in metrics]
    losses = [row["loss"] for row in metrics]
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.plot(steps, losses, lw=0.9, color="#a04848")
    ax.set_xlabel("step")
    ax.set_ylabel("cross entropy")
    ax.set_title("Training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)
