"""PNG figures for the report paths. Uses the non-interactive Agg backend."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_costs(reports, path, title=None):
    """Stacked per-module bars of params and GFLOPs; ``reports`` maps a label
    to a :class:`~haformer.accounting.CostReport`."""
    labels = list(reports)
    modules = []
    for rep in reports.values():
        for r in rep.rows:
            group = r.module.split(".")[0]
            if group not in modules:
                modules.append(group)

    def grouped(rep, attr):
        out = dict.fromkeys(modules, 0.0)
        for r in rep.rows:
            out[r.module.split(".")[0]] += getattr(r, attr)
        return out

    fig, axes = plt.subplots(1, 2, figsize=(11, 4.5))
    cmap = plt.get_cmap("tab20")
    x = np.arange(len(labels))
    for ax, attr, scale, unit in ((axes[0], "params", 1e3, "params (K)"), (axes[1], "flops", 1e9, "FLOPs (G)")):
        bottom = np.zeros(len(labels))
        for i, mod in enumerate(modules):
            vals = np.array([grouped(reports[k], attr)[mod] / scale for k in labels])
            ax.bar(x, vals, bottom=bottom, color=cmap(i % 20), label=mod)
            bottom += vals
        ax.set_xticks(x, labels, rotation=30, ha="right")
        ax.set_ylabel(unit)
    axes[1].legend(fontsize=7, ncol=2, loc="upper left", bbox_to_anchor=(1.0, 1.0))
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_loss(losses, path, title="quadrant overfit"):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(np.arange(len(losses)), losses, lw=1.2)
    ax.axhline(0.1 * losses[0], color="grey", ls="--", lw=0.8, label="10% of initial")
    ax.set_xlabel("step")
    ax.set_ylabel("cross-entropy")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_bench(times, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(np.arange(1, len(times) + 1), np.asarray(times) * 1e3, "o-")
    ax.set_xlabel("iteration")
    ax.set_ylabel("forward time (ms)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_labels(labels, path):
    fig, ax = plt.subplots(figsize=(5, 5 * labels.shape[0] / max(labels.shape[1], 1)))
    ax.imshow(labels, cmap="tab20", interpolation="nearest", vmin=0, vmax=19)
    ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
