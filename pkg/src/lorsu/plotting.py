"""Figures for run and report outputs (PNG via the Agg backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
}


def golden_size(width: float = 6.0) -> tuple[float, float]:
    return width, width * (np.sqrt(5.0) - 1.0) / 2.0


def _save(fig, path: Path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_accuracy_matrix(R, path, title: str = "accuracy after each session"):
    """Heatmap of R[t][i]; cells above the diagonal stay blank."""
    T = len(R)
    arr = np.array([[np.nan if v is None else v for v in row] for row in R], dtype=float)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.2 + 0.3 * T, 2.8 + 0.3 * T))
        im = ax.imshow(arr, vmin=0.0, vmax=1.0, cmap="viridis")
        for t in range(T):
            for i in range(t + 1):
                if not np.isnan(arr[t, i]):
                    ax.text(i, t, f"{arr[t, i]:.2f}", ha="center", va="center", fontsize=7,
                            color="white" if arr[t, i] < 0.6 else "black")
        ax.set_xticks(range(T), [str(i + 1) for i in range(T)])
        ax.set_yticks(range(T), [str(t + 1) for t in range(T)])
        ax.set_xlabel("evaluated session")
        ax.set_ylabel("after training session")
        ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046)
        return _save(fig, Path(path))


def plot_loss_traces(traces: list[list[float]], path, title: str = "training loss"):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=golden_size(5.0))
        offset = 0
        for t, trace in enumerate(traces):
            x = np.arange(offset, offset + len(trace))
            ax.plot(x, trace, lw=1.2, label=f"session {t + 1}")
            offset += len(trace)
        ax.set_xlabel("epoch (concatenated over sessions)")
        ax.set_ylabel("mean CLIP loss")
        ax.set_title(title)
        if traces:
            ax.legend(frameon=False, ncol=2)
        return _save(fig, Path(path))


def plot_run(doc: dict, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    name = doc["strategy"]["strategy"]
    paths = [plot_accuracy_matrix(doc["R"], out_dir / "accuracy_matrix.png", f"{name}: mean over seeds")]
    first = doc["seeds"][0]
    paths.append(plot_loss_traces(first["loss_traces"], out_dir / "loss.png", f"{name}: seed {first['seed']}"))
    return paths


def plot_comparison(docs: list[dict], path):
    """Grouped bars of TI/CC (points) and ACC/BWT (percent) with std error bars."""
    names = [d["strategy"]["strategy"] for d in docs]
    x = np.arange(len(docs))
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 2, figsize=(8.0, 3.2))
        for ax, pair in zip(axes, (("TI", "CC"), ("ACC", "BWT"))):
            for j, m in enumerate(pair):
                vals = [np.nan if d[m] is None else d[m] for d in docs]
                err = [0.0 if d["std"][m] is None else d["std"][m] for d in docs]
                ax.bar(x + (j - 0.5) * 0.38, vals, 0.38, yerr=err, capsize=2, label=m)
            ax.axhline(0.0, color="0.3", lw=0.6)
            ax.set_xticks(x, names)
            ax.legend(frameon=False)
        axes[0].set_ylabel("change vs zero-shot (points)")
        axes[1].set_ylabel("percent")
        return _save(fig, Path(path))
