"""Figures for the CLI reports. Always renders to files (Agg backend)."""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def training_curves(history, path):
    ep = [h["epoch"] for h in history]
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    axes[0].plot(ep, [h["loss"] for h in history], label="task")
    axes[0].plot(ep, [h["reg_loss"] for h in history], label="reg")
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("loss")
    axes[0].legend()
    axes[1].plot(ep, [h["lr"] for h in history])
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("lr")
    axes[2].semilogy(ep, [h["reg_strength"] for h in history])
    axes[2].set_xlabel("epoch")
    axes[2].set_ylabel("reg strength")
    return _save(fig, path)


def confusion(cm, path, names=None):
    cm = np.asarray(cm, dtype=float)
    rows = cm.sum(1, keepdims=True)
    norm = np.divide(cm, rows, out=np.zeros_like(cm), where=rows > 0)
    fig, ax = plt.subplots(figsize=(4 + 0.25 * len(cm), 3.5 + 0.25 * len(cm)))
    im = ax.imshow(norm, vmin=0, vmax=1, cmap="Blues")
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    if names is not None and len(names) == len(cm):
        ax.set_xticks(range(len(cm)), names, rotation=90, fontsize=7)
        ax.set_yticks(range(len(cm)), names, fontsize=7)
    fig.colorbar(im, ax=ax)
    return _save(fig, path)


def decode_scatter(pred, target, path, limit=3000):
    pred, target = np.asarray(pred)[:limit], np.asarray(target)[:limit]
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.3))
    for d, ax in enumerate(axes):
        ax.scatter(target[:, d], pred[:, d], s=2, alpha=0.4)
        lo, hi = target[:, d].min(), target[:, d].max()
        ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
        ax.set_xlabel(f"true d{'xyz'[d]}")
        ax.set_ylabel("decoded")
    return _save(fig, path)


def bench_bars(rows, path):
    """``rows``: (label, mean, std) throughput entries."""
    fig, ax = plt.subplots(figsize=(5, 3))
    labels = [r[0] for r in rows]
    ax.bar(range(len(rows)), [r[1] for r in rows], yerr=[r[2] for r in rows], capsize=3)
    ax.set_xticks(range(len(rows)), labels, rotation=20, fontsize=8)
    ax.set_ylabel("per second")
    return _save(fig, path)
