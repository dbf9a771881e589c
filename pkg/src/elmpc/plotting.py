"""Optional PNG figures written next to the CSV outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .plant import INPUT_NAMES, OUTPUT_NAMES, STATE_NAMES, SimulationTrace  # noqa: E402


def plot_trace(trace: SimulationTrace, path, y_min=None, y_max=None, rmax_bound=None) -> None:
    """Tracked outputs with references, R_max, and the three inputs."""
    k = np.arange(len(trace))
    fig, axes = plt.subplots(6, 1, figsize=(8, 11), sharex=True)
    for i, name in enumerate(OUTPUT_NAMES):
        ax = axes[i]
        ax.plot(k, trace.z_meas[:, i], color="0.75", lw=0.6, label="measured")
        ax.plot(k, trace.z_true[:, i], lw=1.0, label="true")
        ax.plot(k, trace.ref[:, i], "k--", lw=0.8, label="reference")
        if y_min is not None:
            ax.axhline(y_min[i], color="r", lw=0.5)
            ax.axhline(y_max[i], color="r", lw=0.5)
        ax.set_ylabel(name.upper())
    axes[0].legend(loc="upper right", fontsize=7)
    axes[2].plot(k, trace.z_true[:, 3], lw=1.0)
    if rmax_bound is not None:
        axes[2].axhline(rmax_bound, color="r", lw=0.5)
    axes[2].set_ylabel(STATE_NAMES[3].capitalize())
    for j, name in enumerate(INPUT_NAMES):
        axes[3 + j].step(k, trace.u[:, j], where="post", lw=0.9)
        axes[3 + j].set_ylabel(name.upper())
    axes[-1].set_xlabel("cycle")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_prediction(actual, predicted, path, names=STATE_NAMES, title="") -> None:
    """Predicted against measured sequences, one panel per output."""
    actual = np.asarray(actual)
    predicted = np.asarray(predicted)
    d = actual.shape[1]
    fig, axes = plt.subplots(d, 1, figsize=(8, 1.7 * d), sharex=True)
    axes = np.atleast_1d(axes)
    k = np.arange(actual.shape[0])
    for i in range(d):
        axes[i].plot(k, actual[:, i], lw=0.8, label="actual")
        axes[i].plot(k, predicted[:, i], lw=0.8, label="predicted")
        axes[i].set_ylabel(names[i] if i < len(names) else f"y{i + 1}")
    axes[0].legend(loc="upper right", fontsize=7)
    if title:
        axes[0].set_title(title)
    axes[-1].set_xlabel("cycle")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
