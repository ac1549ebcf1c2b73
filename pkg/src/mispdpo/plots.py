"""Report figures written next to the CSV / JSON-lines outputs."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
# Keeps PNG bytes stable across runs.
PNG_METADATA = {"Software": None}


def figure(width=4.5, height=None):
    golden = (np.sqrt(5.0) - 1.0) / 2.0
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(width, height or width * golden), dpi=120)
    return fig, ax


def save(fig, path):
    with plt.rc_context(RC):
        fig.tight_layout()
        fig.savefig(path, metadata=PNG_METADATA)
    plt.close(fig)


def loss_curve(history, path, initial=None):
    fig, ax = figure()
    epochs = np.arange(1, len(history) + 1)
    if initial is not None:
        epochs = np.concatenate([[0], epochs])
        history = [initial, *history]
    ax.plot(epochs, history, marker="o", ms=2, lw=1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("SAE loss")
    ax.set_yscale("log")
    save(fig, path)


def toy_trace(trace, path):
    fig, ax = figure()
    steps = [r["step"] for r in trace]
    ax.plot(steps, [r["loss"] for r in trace], lw=1, label="loss")
    ax.plot(steps, [r["margin"] for r in trace], lw=1, label="held-out margin")
    ax.axhline(0.0, color="0.6", lw=0.5)
    ax.set_xlabel("step")
    ax.legend(frameon=False)
    save(fig, path)


def selection_scatter(points, selected, path, labels=None):
    fig, ax = figure(4.0, 4.0)
    pts = np.asarray(points)
    sel = np.asarray(selected, dtype=bool)
    ax.scatter(pts[~sel, 0], pts[~sel, 1], s=12, c="0.7", label="candidate")
    ax.scatter(pts[sel, 0], pts[sel, 1], s=30, c="tab:red", marker="*", label="selected")
    if labels is not None:
        for (x, y), lab in zip(pts[sel], np.asarray(labels)[sel]):
            ax.annotate(str(lab), (x, y), fontsize=6, xytext=(3, 3), textcoords="offset points")
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.legend(frameon=False)
    save(fig, path)
