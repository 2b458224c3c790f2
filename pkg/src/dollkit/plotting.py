"""Report figures.  Every PNG is written next to the CSV it was drawn from."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
# no timestamps or version strings, so reruns give identical bytes
PNG_META = {"Software": None}


def _save(fig, path: Path):
    fig.savefig(path, dpi=120, metadata=PNG_META)
    plt.close(fig)


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def convergence_plot(curves: dict, path, title: str = "") -> tuple[Path, Path]:
    """Val mIoU against fine-tuning iteration, one line per run.

    ``curves`` maps a run label to a list of history rows.
    Returns the (png, csv) paths.
    """
    path = Path(path)
    rows = []
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.8, 3.2))
        for label in sorted(curves):
            pts = [(h["iteration"], h["value"]) for h in curves[label] if h.get("metric") == "miou"]
            rows += [(label, it, repr(float(v))) for it, v in pts]
            it, v = zip(*pts)
            ax.plot(it, np.asarray(v) * 100, label=label, lw=1.2)
        ax.set_xlabel("iteration")
        ax.set_ylabel("val mIoU (%)")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        fig.tight_layout()
        _save(fig, path.with_suffix(".png"))
    _write_csv(path.with_suffix(".csv"), ["run", "iteration", "val_miou"], rows)
    return path.with_suffix(".png"), path.with_suffix(".csv")


def loss_plot(histories: dict, path) -> tuple[Path, Path]:
    """Pre-training BCE per epoch for each aggregation mode."""
    path = Path(path)
    rows = []
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.8, 3.2))
        for label in sorted(histories):
            for split, ls in (("probe", "--"), ("val", "-")):
                pts = [(h["epoch"], h["value"]) for h in histories[label] if h["split"] == split]
                if not pts:
                    continue
                rows += [(label, split, e, repr(float(v))) for e, v in pts]
                ax.plot(*zip(*pts), ls, label=f"{label} {split}", lw=1.2)
        ax.set_xlabel("epoch")
        ax.set_ylabel("BCE per pixel")
        ax.legend(frameon=False)
        fig.tight_layout()
        _save(fig, path.with_suffix(".png"))
    _write_csv(path.with_suffix(".csv"), ["run", "split", "epoch", "bce"], rows)
    return path.with_suffix(".png"), path.with_suffix(".csv")


def doll_examples(images, gt, dolls: dict, names, path, ids=None) -> tuple[Path, Path]:
    """Grid of image / ground truth / DoLL planes for a handful of images.

    ``dolls`` maps an aggregation name to an N x C x H x W array.  Each row is
    one (image, observation) pair that is positive in the ground truth.  The
    CSV lists the pairs shown and the positive pixel counts per panel.
    """
    path = Path(path)
    images, gt = np.asarray(images), np.asarray(gt)
    pairs = [(i, c) for i in range(len(images)) for c in range(gt.shape[1]) if gt[i, c].any()]
    aggs = sorted(dolls)
    cols = 2 + len(aggs)
    rows = []
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(max(len(pairs), 1), cols, figsize=(1.5 * cols, 1.5 * max(len(pairs), 1)),
                                 squeeze=False)
        for r, (i, c) in enumerate(pairs):
            panels = [images[i, 0], gt[i, c]] + [dolls[a][i, c] for a in aggs]
            for k, (ax, panel) in enumerate(zip(axes[r], panels)):
                ax.imshow(panel, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
                ax.set_xticks([])
                ax.set_yticks([])
                if r == 0:
                    ax.set_title(["image", "ground truth"][k] if k < 2 else aggs[k - 2])
            axes[r, 0].set_ylabel(names[c])
            rows.append([ids[i] if ids is not None else i, names[c], int(gt[i, c].sum())]
                        + [int(dolls[a][i, c].sum()) for a in aggs])
        fig.tight_layout()
        _save(fig, path.with_suffix(".png"))
    _write_csv(path.with_suffix(".csv"), ["image", "observation", "gt_pixels"] + [f"{a}_pixels" for a in aggs], rows)
    return path.with_suffix(".png"), path.with_suffix(".csv")
