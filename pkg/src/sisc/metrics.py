"""Scene completion (SC), semantic scene completion (SSC) and detection metrics.

Conventions:

* SC is evaluated on occluded in-frustum voxels of the ground truth mask.
* SSC is evaluated on surface and occluded in-frustum voxels; a class absent
  from both prediction and ground truth has IoU NaN and is left out of the
  mean (``mean_mode="present"``), or counts as 0 (``mean_mode="all"``).
* 0/0 ratios in SC are 1.0 (nothing to find, nothing found).
* AP is the area under the all-point interpolated precision/recall curve.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .boxes import pairwise_iou
from .classes import NUM_CLASSES, TABLE_COLUMNS
from .errors import InvalidInputError
from .volumes import Visibility


def _ratio(num, den):
    return float(num) / den if den else 1.0


@dataclass(frozen=True)
class SCReport:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self):
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self):
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def iou(self):
        return _ratio(self.tp, self.tp + self.fp + self.fn)

    def __add__(self, other):
        return SCReport(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def to_dict(self):
        return {"precision": self.precision, "recall": self.recall, "iou": self.iou,
                "tp": self.tp, "fp": self.fp, "fn": self.fn}


@dataclass(frozen=True, eq=False)
class SSCReport:
    tp: np.ndarray  # (C,) counts for classes 1..C
    fp: np.ndarray
    fn: np.ndarray
    evaluated: int
    mean_mode: str = "present"

    @property
    def iou(self):
        den = self.tp + self.fp + self.fn
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(den > 0, self.tp / np.where(den > 0, den, 1), np.nan)

    @property
    def mean_iou(self):
        iou = self.iou
        if self.mean_mode == "all":
            return float(np.nan_to_num(iou, nan=0.0).mean())
        present = ~np.isnan(iou)
        return float(iou[present].mean()) if present.any() else 1.0

    def __add__(self, other):
        return SSCReport(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                         self.evaluated + other.evaluated, self.mean_mode)

    def to_dict(self):
        return {
            "iou": [None if np.isnan(v) else float(v) for v in self.iou],
            "mean_iou": self.mean_iou,
            "evaluated": int(self.evaluated),
            "tp": self.tp.tolist(), "fp": self.fp.tolist(), "fn": self.fn.tolist(),
        }


@dataclass(frozen=True)
class DetReport:
    recall: float
    map: float
    ap: dict = field(default_factory=dict)
    num_gt: int = 0
    num_matched: int = 0
    iou_threshold: float = 0.25

    def to_dict(self):
        return {"recall": self.recall, "mAP": self.map,
                "ap": {str(k): v for k, v in sorted(self.ap.items())},
                "num_gt": self.num_gt, "num_matched": self.num_matched,
                "iou_threshold": self.iou_threshold}


def _check(pred, gt):
    if pred.spec != gt.spec:
        raise InvalidInputError("prediction and ground truth grids differ")
    if gt.visibility is None:
        raise InvalidInputError("ground truth carries no evaluation mask")


def eval_sc(pred, gt):
    _check(pred, gt)
    region = gt.visibility == Visibility.OCCLUDED
    p = pred.labels[region] > 0
    g = gt.labels[region] > 0
    return SCReport(int(np.sum(p & g)), int(np.sum(p & ~g)), int(np.sum(~p & g)))


def eval_ssc(pred, gt, num_classes=NUM_CLASSES, mean_mode="present"):
    _check(pred, gt)
    region = (gt.visibility == Visibility.SURFACE) | (gt.visibility == Visibility.OCCLUDED)
    p = pred.labels[region].astype(np.int64)
    g = gt.labels[region].astype(np.int64)
    n = num_classes + 1
    conf = np.bincount(g * n + p, minlength=n * n).reshape(n, n)  # rows: gt, cols: pred
    tp = np.diag(conf)[1:]
    fp = conf[:, 1:].sum(axis=0) - tp
    fn = conf[1:, :].sum(axis=1) - tp
    return SSCReport(tp, fp, fn, int(region.sum()), mean_mode)


@dataclass(frozen=True)
class DetBox:
    class_id: int
    center: tuple
    size: tuple
    score: float = 1.0

    @classmethod
    def of(cls, obj):
        score = getattr(obj, "score", getattr(obj, "objectness", 1.0))
        return cls(int(obj.class_id), tuple(np.asarray(obj.center, float)),
                   tuple(np.asarray(obj.size, float)), float(score))


def average_precision(tp_flags, num_gt):
    """All-point interpolated AP from TP flags sorted by descending score."""
    if num_gt == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~np.asarray(tp_flags, bool))
    rec = tp / num_gt
    prec = tp / np.maximum(tp + fp, 1)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def eval_detection(pred_boxes, gt_boxes, iou_thresh=0.25):
    """Per-class greedy matching by descending score; each gt matches once.

    A prediction is a true positive when its best-IoU gt of the same class
    reaches ``iou_thresh`` and is still unmatched.
    """
    preds = [DetBox.of(b) for b in pred_boxes]
    gts = [DetBox.of(b) for b in gt_boxes]
    if not gts:
        return DetReport(1.0, 1.0 if not preds else 0.0, {}, 0, 0, iou_thresh)
    ap, matched_total = {}, 0
    for c in sorted({g.class_id for g in gts}):
        G = [g for g in gts if g.class_id == c]
        P = sorted((p for p in preds if p.class_id == c), key=lambda p: -p.score)
        flags = np.zeros(len(P), bool)
        if P:
            iou = pairwise_iou([p.center for p in P], [p.size for p in P],
                               [g.center for g in G], [g.size for g in G])
            taken = np.zeros(len(G), bool)
            for i in range(len(P)):
                j = int(np.argmax(iou[i]))
                if iou[i, j] >= iou_thresh and not taken[j]:
                    taken[j] = True
                    flags[i] = True
            matched_total += int(taken.sum())
        ap[c] = average_precision(flags, len(G))
    return DetReport(matched_total / len(gts), float(np.mean(list(ap.values()))), ap,
                     len(gts), matched_total, iou_thresh)


def report_json(sc=None, ssc=None, det=None):
    out = {}
    if sc is not None:
        out["sc"] = sc.to_dict()
    if ssc is not None:
        out["ssc"] = ssc.to_dict()
    if det is not None:
        out["detection"] = det.to_dict()
    return json.dumps(out, indent=2, sort_keys=True)


def format_table(rows):
    """Aligned text table in result-table column order.

    ``rows`` is a list of ``(name, SCReport, SSCReport)``; values in percent.
    """
    head = ["", "prec.", "recall", "IoU", *TABLE_COLUMNS, "avg."]
    lines = []
    for name, sc, ssc in rows:
        cells = [name, *(f"{100 * v:.1f}" for v in (sc.precision, sc.recall, sc.iou))]
        cells += ["-" if np.isnan(v) else f"{100 * v:.1f}" for v in ssc.iou]
        cells.append(f"{100 * ssc.mean_iou:.1f}")
        lines.append(cells)
    widths = [max(len(r[i]) for r in [head, *lines]) for i in range(len(head))]
    fmt = lambda r: "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
    return "\n".join([fmt(head), *map(fmt, lines)])
