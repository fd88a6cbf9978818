"""Report figures written next to the CSV/TSV outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

DPI = 120


def save_figure(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=DPI, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_codebook(W, labels, path, freq_resolution_hz: float | None = None, max_hz: float = 5000.0):
    """Color mesh of codebook columns (warm = large)."""
    W = np.asarray(W)
    n_bins = W.shape[0]
    if freq_resolution_hz:
        n_bins = min(n_bins, int(max_hz / freq_resolution_hz) + 1)
        y = np.arange(n_bins) * freq_resolution_hz
        ylabel = "frequency (Hz)"
    else:
        y = np.arange(n_bins)
        ylabel = "bin"
    fig, ax = plt.subplots(figsize=(8, 4))
    x = np.arange(W.shape[1])
    ax.pcolormesh(x, y, W[:n_bins], shading="auto", cmap="jet")
    if labels:
        step = max(1, len(labels) // 12)
        ax.set_xticks(x[::step])
        ax.set_xticklabels([str(lab) for lab in labels[::step]])
        ax.set_xlabel("MIDI")
    ax.set_ylabel(ylabel)
    ax.set_title("codebook")
    return save_figure(fig, path)


def plot_activations(H, labels, hop_seconds, path, events=(), truth=(), threshold=None):
    """Piano roll of the active rows with detected (and reference) onsets."""
    H = np.asarray(H)
    active = [i for i in range(H.shape[0]) if np.any(H[i] > (threshold or 0))]
    if not active:
        active = list(range(min(H.shape[0], 12)))
    fig, ax = plt.subplots(figsize=(10, 4))
    extent = (0, H.shape[1] * hop_seconds, -0.5, len(active) - 0.5)
    ax.imshow(H[active], aspect="auto", origin="lower", extent=extent, cmap="Greys", interpolation="nearest")
    pos = {labels[i]: k for k, i in enumerate(active)}
    for e in truth:
        if e.midi in pos:
            ax.plot(e.onset_s, pos[e.midi], "r|", markersize=12)
    for e in events:
        if e.midi in pos:
            ax.plot([e.onset_s, e.offset_s], [pos[e.midi]] * 2, color="tab:blue", lw=2)
    ax.set_yticks(range(len(active)))
    ax.set_yticklabels([str(labels[i]) for i in active])
    ax.set_xlabel("time (s)")
    ax.set_ylabel("MIDI")
    return save_figure(fig, path)


def plot_sweep(rows, path, title: str = ""):
    """Precision, recall and F-measure against the decibel reduction level."""
    d = [r.delta_db for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(d, [r.metrics.precision for r in rows], label="precision")
    ax.plot(d, [r.metrics.recall for r in rows], label="recall")
    ax.plot(d, [r.metrics.f_measure for r in rows], label="F-measure", lw=2)
    ax.set_xlabel("reduction level (dB)")
    ax.set_ylim(0, 1.02)
    ax.legend(frameon=False)
    if title:
        ax.set_title(title)
    return save_figure(fig, path)


def plot_ratios(freqs, curves: dict, path, max_hz: float = 5000.0):
    fig, ax = plt.subplots(figsize=(7, 3.5))
    keep = freqs <= max_hz
    for name, ratio in curves.items():
        ax.semilogy(freqs[keep], ratio[keep], label=name, lw=1)
    ax.set_xlabel("frequency (Hz)")
    ax.set_ylabel("|M1| / |M2|")
    ax.legend(frameon=False, fontsize="small")
    return save_figure(fig, path)


def plot_trace(trace, path, ylabel: str = "objective"):
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.semilogy(np.arange(1, len(trace) + 1), np.maximum(trace, 1e-300))
    ax.set_xlabel("iteration")
    ax.set_ylabel(ylabel)
    return save_figure(fig, path)
