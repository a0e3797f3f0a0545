"""Report figures written next to the CSV/JSON artifacts."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no version/date stamps, so figures are reproducible byte for byte
SAVE_KW = {"dpi": 100, "metadata": {"Software": None}}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, **SAVE_KW)
    plt.close(fig)
    return path


def plot_history(history, path, metric_name="val_metric"):
    epochs = [h["epoch"] for h in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3))
    ax1.plot(epochs, [h["loss"] for h in history], marker="o", ms=3)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("training loss")
    vals = [h["val_metric"] for h in history]
    if np.all(np.isnan(vals)):
        ax2.text(0.5, 0.5, "no validation set", ha="center", va="center", transform=ax2.transAxes)
    else:
        ax2.plot(epochs, vals, marker="o", ms=3, color="C1")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel(metric_name)
    return _save(fig, path)


def plot_confusion(matrix, path, class_names=None):
    matrix = np.asarray(matrix)
    k = len(matrix)
    fig, ax = plt.subplots(figsize=(1.2 + 0.5 * k, 1 + 0.5 * k))
    ax.imshow(matrix, cmap="Blues")
    for (i, j), v in np.ndenumerate(matrix):
        ax.text(j, i, str(v), ha="center", va="center", fontsize=8)
    ticks = class_names or [str(i) for i in range(k)]
    ax.set_xticks(range(k), ticks)
    ax.set_yticks(range(k), ticks)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    return _save(fig, path)


def plot_dimensional(pred, true, path):
    """Prediction vs. annotation scatter for valence and arousal."""
    pred = np.asarray(pred)
    true = np.asarray(true)
    fig, axes = plt.subplots(1, 2, figsize=(7, 3.4))
    for ax, i, name in zip(axes, (0, 1), ("valence", "arousal")):
        ax.scatter(true[:, i], pred[:, i], s=8)
        ax.plot([-1, 1], [-1, 1], color="grey", lw=0.8, ls="--")
        ax.set_xlim(-1, 1)
        ax.set_ylim(-1, 1)
        ax.set_xlabel(f"annotated {name}")
        ax.set_ylabel(f"predicted {name}")
    return _save(fig, path)


def plot_trials(objectives, best, path):
    """Per-trial objective and the running best of a hyperparameter search."""
    fig, ax = plt.subplots(figsize=(5, 3))
    x = np.arange(len(objectives))
    ax.scatter(x, objectives, s=10, label="trial")
    ax.step(x, best, where="post", color="C1", label="best so far")
    ax.set_xlabel("trial")
    ax.set_ylabel("objective")
    ax.legend()
    return _save(fig, path)
