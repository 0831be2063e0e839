"""Static SVG line charts. Byte-stable: fixed hash salt, no creation date."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .train import _atomic_write  # noqa: E402

_SVG_META = {"Date": None, "Creator": None}


def _save(fig, path) -> Path:
    import io
    with matplotlib.rc_context({"svg.hashsalt": "nosaf", "svg.fonttype": "none"}):
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata=_SVG_META)
    plt.close(fig)
    _atomic_write(Path(path), buf.getvalue())
    return Path(path)


def accuracy_curve_svg(path, axis: str, xs, means, stds) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(xs, means, yerr=stds, marker="o", capsize=3)
    ax.set_xlabel("layers" if axis == "depth" else "target homophily")
    ax.set_ylabel("test accuracy")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def davg_by_layer_svg(path, series: dict) -> Path:
    """``series`` maps a label to its per-stage D_avg values."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, values in series.items():
        ax.plot(range(len(values)), values, marker="o", label=label)
    ax.set_xlabel("stage")
    ax.set_ylabel("D_avg")
    ax.set_ylim(bottom=0)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)
