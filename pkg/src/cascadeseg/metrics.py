"""Evaluation metrics: Dice, boundary distances (ADB/HD), IoU and F1.

Boundary extraction uses face adjacency (4-neighborhood in 2D, 6 in 3D) with
out-of-bounds treated as background. Distances are exact Euclidean distances
between boundary cell centers, scaled by the physical spacing, computed with
an exact Euclidean distance transform. ADB is the symmetric mean of the two
directed mean nearest-neighbor distances; HD is the max of the two directed
maxima. When either boundary is empty the distances are undefined: they are
reported as NaN and flagged, and excluded from aggregation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt

from .errors import ShapeError

CSV_COLUMNS = ["model", "class", "dice", "adb_mm", "hd_mm", "iou", "f1", "flags"]


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")


def dice_score(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float:
    """2|A∩B| / (|A|+|B|); 1.0 when both sets are empty, 0.0 when one is."""
    _check_pair(pred, gt)
    a = pred == class_id
    b = gt == class_id
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (na + nb)


def iou_f1(pred: np.ndarray, gt: np.ndarray, class_id: int) -> tuple[float, float]:
    """Intersection-over-union and F1 for one class (empty-set rules as Dice)."""
    _check_pair(pred, gt)
    a = pred == class_id
    b = gt == class_id
    inter = int(np.logical_and(a, b).sum())
    union = int(np.logical_or(a, b).sum())
    iou = 1.0 if union == 0 else inter / union
    tp, fp, fn = inter, int(a.sum()) - inter, int(b.sum()) - inter
    f1 = 1.0 if (2 * tp + fp + fn) == 0 else 2.0 * tp / (2 * tp + fp + fn)
    return iou, f1


def extract_boundary(mask: np.ndarray) -> np.ndarray:
    """Boolean mask of foreground cells with a face-adjacent background cell."""
    fg = mask.astype(bool)
    has_bg_neighbor = np.zeros_like(fg)
    for axis in range(fg.ndim):
        for shift in (1, -1):
            neighbor = np.zeros_like(fg)  # out of bounds counts as background
            src = [slice(None)] * fg.ndim
            dst = [slice(None)] * fg.ndim
            if shift == 1:
                src[axis], dst[axis] = slice(1, None), slice(None, -1)
            else:
                src[axis], dst[axis] = slice(None, -1), slice(1, None)
            neighbor[tuple(dst)] = fg[tuple(src)]
            has_bg_neighbor |= ~neighbor
    return fg & has_bg_neighbor


def _directed_distances(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    """Distances from every True cell of src to the nearest True cell of dst."""
    dist_to_dst = distance_transform_edt(~dst, sampling=spacing)
    return dist_to_dst[src]


def _boundary_pair(pred: np.ndarray, gt: np.ndarray, spacing):
    _check_pair(pred, gt)
    spacing = tuple(float(s) for s in np.broadcast_to(spacing, (pred.ndim,)))
    bp = extract_boundary(pred)
    bg = extract_boundary(gt)
    if not bp.any() or not bg.any():
        return None
    d_pg = _directed_distances(bp, bg, spacing)
    d_gp = _directed_distances(bg, bp, spacing)
    return d_pg, d_gp


def avg_boundary_distance(pred: np.ndarray, gt: np.ndarray, spacing=1.0) -> float:
    """Symmetric average of the two directed mean boundary distances (NaN if undefined)."""
    pair = _boundary_pair(pred, gt, spacing)
    if pair is None:
        return float("nan")
    d_pg, d_gp = pair
    return 0.5 * (float(d_pg.mean()) + float(d_gp.mean()))


def hausdorff_distance(pred: np.ndarray, gt: np.ndarray, spacing=1.0) -> float:
    """Max over both directed maxima of boundary distances (NaN if undefined)."""
    pair = _boundary_pair(pred, gt, spacing)
    if pair is None:
        return float("nan")
    d_pg, d_gp = pair
    return max(float(d_pg.max()), float(d_gp.max()))


@dataclass
class ClassMetrics:
    class_id: int
    dice: float
    adb_mm: float
    hd_mm: float
    iou: float | None = None
    f1: float | None = None
    flags: str = ""


@dataclass
class MetricsReport:
    model: str
    spacing: tuple[float, ...]
    classes: list[ClassMetrics] = field(default_factory=list)

    def csv_rows(self) -> list[list[str]]:
        rows = []
        for c in self.classes:
            rows.append([
                self.model,
                str(c.class_id),
                repr(float(c.dice)),
                "" if np.isnan(c.adb_mm) else repr(float(c.adb_mm)),
                "" if np.isnan(c.hd_mm) else repr(float(c.hd_mm)),
                "" if c.iou is None else repr(float(c.iou)),
                "" if c.f1 is None else repr(float(c.f1)),
                c.flags,
            ])
        return rows


def write_reports_csv(path, reports: list[MetricsReport]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for report in reports:
            writer.writerows(report.csv_rows())


def evaluate_segmentation(pred: np.ndarray, gt: np.ndarray, spacing=1.0,
                          num_classes: int | None = None,
                          model: str = "") -> MetricsReport:
    """Per-class metrics for one labeled volume/image pair.

    IoU and F1 are filled for 2D masks only, mirroring how the overlap
    metrics are conventionally reported per prototype table.
    """
    _check_pair(pred, gt)
    if num_classes is None:
        num_classes = int(max(pred.max(), gt.max())) + 1
    spacing = tuple(float(s) for s in np.broadcast_to(spacing, (pred.ndim,)))
    report = MetricsReport(model=model, spacing=spacing)
    for c in range(num_classes):
        pc = pred == c
        gc = gt == c
        flags = []
        if not pc.any():
            flags.append("empty_pred")
        if not gc.any():
            flags.append("empty_gt")
        dice = dice_score(pred, gt, c)
        adb = avg_boundary_distance(pc, gc, spacing)
        hd = hausdorff_distance(pc, gc, spacing)
        if np.isnan(adb):
            flags.append("distance_undefined")
        iou = f1 = None
        if pred.ndim == 2:
            iou, f1 = iou_f1(pred, gt, c)
        report.classes.append(ClassMetrics(c, dice, adb, hd, iou, f1,
                                           ";".join(flags)))
    return report


def aggregate_reports(reports: list[MetricsReport], model: str = "") -> MetricsReport:
    """Mean metrics over samples; undefined distances are excluded per class."""
    if not reports:
        raise ValueError("nothing to aggregate")
    n_classes = len(reports[0].classes)
    out = MetricsReport(model=model or reports[0].model, spacing=reports[0].spacing)
    for ci in range(n_classes):
        entries = [r.classes[ci] for r in reports]
        cid = entries[0].class_id
        dice = float(np.mean([e.dice for e in entries]))
        dists = [(e.adb_mm, e.hd_mm) for e in entries if not np.isnan(e.adb_mm)]
        excluded = len(entries) - len(dists)
        if dists:
            adb = float(np.mean([d[0] for d in dists]))
            hd = float(np.mean([d[1] for d in dists]))
        else:
            adb = hd = float("nan")
        ious = [e.iou for e in entries if e.iou is not None]
        f1s = [e.f1 for e in entries if e.f1 is not None]
        iou = float(np.mean(ious)) if ious else None
        f1 = float(np.mean(f1s)) if f1s else None
        flags = f"distance_excluded:{excluded}/{len(entries)}" if excluded else ""
        out.classes.append(ClassMetrics(cid, dice, adb, hd, iou, f1, flags))
    return out
