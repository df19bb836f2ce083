"""Report figures written next to the CSV outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams.update({"font.size": 9, "axes.titlesize": 9, "figure.dpi": 100})


def loss_trace_figure(trace, path) -> None:
    steps = [r.step for r in trace]
    fig, (ax, axf) = plt.subplots(1, 2, figsize=(8, 3))
    ax.semilogy(steps, [r.total for r in trace], label="total")
    ax.semilogy(steps, [max(r.data, 1e-12) for r in trace], label="data", alpha=0.7)
    if any(r.reg > 0 for r in trace):
        ax.semilogy(steps, [max(r.reg, 1e-12) for r in trace], label="reg", alpha=0.7)
    ax.set_xlabel("step")
    ax.set_title("loss")
    ax.legend(frameon=False)
    focus = np.array([r.focus for r in trace])
    for i in range(focus.shape[1]):
        axf.plot(steps, focus[:, i], label=f"target {i}")
    axf.set_xlabel("step")
    axf.set_title("focus disparity")
    axf.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def depth_figure(depth, path, reference=None, vmin=None, vmax=None) -> None:
    panels = [("estimate", depth)] if reference is None else [("estimate", depth), ("reference", reference),
                                                             ("abs error", np.abs(depth - reference))]
    fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels), 3), squeeze=False)
    lo = np.min(depth) if vmin is None else vmin
    hi = np.max(depth) if vmax is None else vmax
    for ax, (title, img) in zip(axes[0], panels):
        kw = {} if title == "abs error" else {"vmin": lo, "vmax": hi}
        im = ax.imshow(img, cmap="viridis" if title != "abs error" else "magma", **kw)
        ax.set_title(title)
        ax.axis("off")
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def comparison_figure(pred, ref, path, title: str = "") -> None:
    pred = np.clip(np.asarray(pred), 0, 1)
    ref = np.clip(np.asarray(ref), 0, 1)
    err = np.abs(pred - ref).mean(axis=-1) if pred.ndim == 3 else np.abs(pred - ref)
    fig, axes = plt.subplots(1, 3, figsize=(9, 3))
    squeeze = (lambda a: a[:, :, 0]) if pred.ndim == 3 and pred.shape[2] == 1 else (lambda a: a)
    axes[0].imshow(squeeze(pred), cmap="gray", vmin=0, vmax=1)
    axes[0].set_title("prediction")
    axes[1].imshow(squeeze(ref), cmap="gray", vmin=0, vmax=1)
    axes[1].set_title("reference")
    im = axes[2].imshow(err, cmap="magma")
    axes[2].set_title("abs error")
    fig.colorbar(im, ax=axes[2], fraction=0.046)
    for ax in axes:
        ax.axis("off")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
