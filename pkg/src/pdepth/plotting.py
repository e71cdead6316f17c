"""Matplotlib figure helpers writing deterministic SVG files."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "svg.hashsalt": "pdepth",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 7,
    "legend.frameon": False,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.2,
}
PALETTE = ["#0072B2", "#E69F00", "#009E73", "#D55E00", "#CC79A7", "#56B4E9", "#F0E442", "#000000"]


def figure(ncols=1, width=4.0, height=3.0):
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, ncols, figsize=(width * ncols, height), squeeze=False)
    return fig, list(axes[0])


def save(fig, path):
    # Date metadata off, fixed hash salt: identical inputs give identical bytes
    with plt.rc_context(STYLE):
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def bars(ax, groups, labels, title="", xlabel="", ylabel=""):
    """Grouped bars; ``groups`` maps series name -> heights aligned with ``labels``."""
    n = max(len(groups), 1)
    w = 0.8 / n
    for s, (name, heights) in enumerate(groups.items()):
        xs = [i + (s - (n - 1) / 2) * w for i in range(len(labels))]
        ax.bar(xs, heights, width=w, label=name, color=PALETTE[s % len(PALETTE)])
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels([str(v) for v in labels])
    _decorate(ax, title, xlabel, ylabel)


def lines(ax, series, title="", xlabel="", ylabel="", styles=None):
    """``series`` maps name -> (xs, ys)."""
    styles = styles or {}
    for s, (name, (xs, ys)) in enumerate(series.items()):
        ax.plot(xs, ys, styles.get(name, "-"), label=name, color=PALETTE[s % len(PALETTE)], marker=".")
    _decorate(ax, title, xlabel, ylabel)


def scatter(ax, xs, ys, title="", xlabel="", ylabel="", logy=False, color=None, label=None, size=4):
    ax.scatter(xs, ys, s=size, alpha=0.5, color=color or PALETTE[0], label=label, linewidths=0)
    if logy:
        ax.set_yscale("log")
    _decorate(ax, title, xlabel, ylabel)


def _decorate(ax, title, xlabel, ylabel):
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if ax.get_legend_handles_labels()[0]:
        ax.legend()
