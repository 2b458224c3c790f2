"""Segmentation and DoLL-quality metrics, reports and run comparisons.

Per-class metrics are computed from confusion counts accumulated over a whole
split.  When a class is absent from both prediction and ground truth the
overlap metrics are defined as 1.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import SchemaMismatchError

EMPTY_CONVENTION = "iou=dice=1 when prediction and ground truth are both empty"


def confusion(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return tp, fp, fn, pred.size - tp - fp - fn


def iou_from_counts(tp, fp, fn, tn=0):
    union = tp + fp + fn
    return 1.0 if union == 0 else tp / union


def dice_from_counts(tp, fp, fn, tn=0):
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def acc_from_counts(tp, fp, fn, tn):
    total = tp + fp + fn + tn
    return (tp + tn) / total


def iou(pred, gt) -> float:
    return iou_from_counts(*confusion(pred, gt))


def dice(pred, gt) -> float:
    return dice_from_counts(*confusion(pred, gt))


def acc(pred, gt) -> float:
    return acc_from_counts(*confusion(pred, gt))


@dataclass
class MetricsReport:
    per_class: dict
    aggregates: dict
    n_images: int
    meta: dict = field(default_factory=dict)

    @property
    def miou(self):
        return self.aggregates["miou"]

    def to_dict(self):
        return {"per_class": self.per_class, "aggregates": self.aggregates,
                "n_images": self.n_images, "meta": self.meta}

    @classmethod
    def from_dict(cls, d):
        return cls(d["per_class"], d["aggregates"], d["n_images"], d.get("meta", {}))


def evaluate_masks(pred, gt, class_names=None, meta=None) -> MetricsReport:
    """Binary predictions vs ground truth, both N x C x H x W."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if len(gt) == 0:
        raise ValueError("cannot evaluate an empty split")
    names = list(class_names) if class_names else [f"class{c}" for c in range(gt.shape[1])]
    per_class = {}
    for c, name in enumerate(names):
        counts = confusion(pred[:, c], gt[:, c])
        per_class[name] = {"iou": iou_from_counts(*counts), "acc": acc_from_counts(*counts),
                           "dice": dice_from_counts(*counts)}
    aggregates = {f"m{k}": float(np.mean([v[k] for v in per_class.values()])) for k in ("iou", "acc", "dice")}
    return MetricsReport(per_class, aggregates, len(gt),
                         {"empty_convention": EMPTY_CONVENTION, "background_class": "excluded", **(meta or {})})


def evaluate_model(segmodel, images, gt, threshold: float = 0.5, class_names=None, meta=None) -> MetricsReport:
    from .models import predict_masks

    if len(images) == 0:
        raise ValueError("cannot evaluate an empty split")
    pred = predict_masks(segmodel, images) > threshold
    return evaluate_masks(pred, gt, class_names, {"threshold": threshold, **(meta or {})})


def mean_iou(pred, gt) -> float:
    return evaluate_masks(pred, gt).miou


# --- DoLL quality ---------------------------------------------------------

def random_placement(plane: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Same mask, translated by a uniformly random cyclic offset (area preserved)."""
    dy, dx = rng.integers(0, plane.shape[0]), rng.integers(0, plane.shape[1])
    return np.roll(plane, (int(dy), int(dx)), axis=(0, 1))


def doll_localization(dolls, gt, labels, seed: int = 0, class_names=None) -> dict:
    """Mean IoU of nonempty DoLL planes of positive observations vs ground truth,
    alongside an area-matched, randomly placed copy of each plane."""
    rng = np.random.default_rng(seed)
    dolls, gt, labels = np.asarray(dolls), np.asarray(gt), np.asarray(labels)
    C = gt.shape[1]
    names = list(class_names) if class_names else [f"class{c}" for c in range(C)]
    rows, all_doll, all_rand = {}, [], []
    for c in range(C):
        d_iou, r_iou = [], []
        for i in np.flatnonzero(labels[:, c] > 0):
            plane = dolls[i, c]
            if not plane.any():
                continue
            d_iou.append(iou(plane, gt[i, c]))
            r_iou.append(iou(random_placement(plane, rng), gt[i, c]))
        all_doll += d_iou
        all_rand += r_iou
        rows[names[c]] = {"n": len(d_iou), "doll_iou": float(np.mean(d_iou)) if d_iou else float("nan"),
                          "random_iou": float(np.mean(r_iou)) if r_iou else float("nan")}
    return {"per_class": rows, "doll_iou": float(np.mean(all_doll)) if all_doll else float("nan"),
            "random_iou": float(np.mean(all_rand)) if all_rand else float("nan"), "n": len(all_doll)}


def positive_fraction(planes) -> np.ndarray:
    planes = np.asarray(planes)
    return planes.reshape(*planes.shape[:-2], -1).mean(axis=-1)


# --- comparisons ---------------------------------------------------------

@dataclass
class Comparison:
    rows: list            # [(run_id, {column: value})]
    columns: list
    curves: list          # [(run_id, iteration, value)]

    def table(self) -> str:
        header = ["run"] + self.columns
        body = [[rid] + [f"{100 * vals[c]:.2f}" for c in self.columns] for rid, vals in self.rows]
        widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
        fmt = lambda r: "  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(r, widths)))
        return "\n".join([fmt(header), "  ".join("-" * w for w in widths)] + [fmt(r) for r in body]) + "\n"

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["run"] + self.columns)
        for rid, vals in self.rows:
            w.writerow([rid] + [repr(float(vals[c])) for c in self.columns])
        return buf.getvalue()

    def curves_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["run", "iteration", "val_miou"])
        for rid, it, v in self.curves:
            w.writerow([rid, it, repr(float(v))])
        return buf.getvalue()


def compare_runs(reports: dict, histories: dict | None = None) -> Comparison:
    """Table of per-class IoU plus aggregates, one row per run id (sorted)."""
    if not reports:
        raise ValueError("nothing to compare")
    schemas = {tuple(r.per_class) for r in reports.values()}
    if len(schemas) != 1:
        raise SchemaMismatchError(f"reports disagree on class schema: {sorted(schemas)}")
    classes = list(next(iter(schemas)))
    columns = [f"{c}.iou" for c in classes] + ["miou", "macc", "mdice"]
    rows = []
    for rid in sorted(reports):
        r = reports[rid]
        vals = {f"{c}.iou": r.per_class[c]["iou"] for c in classes}
        vals.update(r.aggregates)
        rows.append((rid, vals))
    curves = []
    for rid in sorted(histories or {}):
        curves += [(rid, h["iteration"], h["value"]) for h in histories[rid]
                   if h.get("metric") == "miou" and h.get("split") == "val"]
    return Comparison(rows, columns, curves)


def iterations_to_fraction(history, fraction: float = 0.9) -> int:
    """First evaluated iteration whose val mIoU reaches ``fraction`` of the last one."""
    points = [(h["iteration"], h["value"]) for h in history if h.get("metric") == "miou"]
    final = points[-1][1]
    for it, v in points:
        if v >= fraction * final:
            return it
    return points[-1][0]
