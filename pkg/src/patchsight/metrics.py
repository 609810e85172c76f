"""Pixel and instance-level evaluation metrics.

Segmentation metrics are micro-averaged pixel counts over the whole image
set:

    IoU  = TP / (TP + FP + FN)        mIoU averages IoU over classes
    Dice = 2 TP / (2 TP + FP + FN)
    P    = TP / (TP + FP)             R = TP / (TP + FN)

Detection uses greedy IoU matching per image and class, 101-point
interpolated average precision, and the 0.50:0.05:0.95 threshold ladder for
mAP. All values are reported in percent. Zero denominators follow the
convention: 0 when the other error count is nonzero anywhere in the set,
100 when predictions and ground truth are both empty set-wide.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coco import AnnotationStore

IOU_LADDER = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_GRID = np.linspace(0.0, 1.0, 101)

SEG_COLUMNS = ("mIoU", "Dice", "P", "R")
DET_COLUMNS = ("mAP50", "mAP", "P", "R", "F1")


class MetricsError(ValueError):
    pass


@dataclass
class MetricReport:
    """One row of a results table: metrics for a (dataset, model, task) cell."""

    dataset: str
    model: str
    task: str
    metrics: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "model": self.model,
            "task": self.task,
            "metrics": dict(self.metrics),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricReport":
        return cls(
            dataset=str(data["dataset"]),
            model=str(data["model"]),
            task=str(data["task"]),
            metrics={str(k): float(v) for k, v in data["metrics"].items()},
        )


# ---------------------------------------------------------------------------
# segmentation


def seg_confusion(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, int]:
    """Pixel (TP, FP, FN) for one binary prediction/ground-truth pair."""
    if pred.shape != gt.shape:
        raise MetricsError(f"resolution mismatch: pred {pred.shape} vs gt {gt.shape}")
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return tp, fp, fn


def seg_metrics_from_counts(tp: int, fp: int, fn: int) -> dict[str, float]:
    if tp == 0 and fp == 0 and fn == 0:
        return {"mIoU": 100.0, "Dice": 100.0, "P": 100.0, "R": 100.0}
    iou = tp / (tp + fp + fn) if tp + fp + fn else 0.0
    dice = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return {
        "mIoU": 100.0 * iou,
        "Dice": 100.0 * dice,
        "P": 100.0 * precision,
        "R": 100.0 * recall,
    }


def seg_metrics(
    preds: dict[int, np.ndarray], gts: dict[int, np.ndarray]
) -> dict[str, float]:
    """Micro-averaged segmentation metrics over aligned image sets, in percent."""
    if set(preds) != set(gts):
        raise MetricsError(
            f"image sets differ: {sorted(set(preds) ^ set(gts))} not shared"
        )
    tp = fp = fn = 0
    for image_id in sorted(preds):
        dtp, dfp, dfn = seg_confusion(preds[image_id], gts[image_id])
        tp, fp, fn = tp + dtp, fp + dfp, fn + dfn
    return seg_metrics_from_counts(tp, fp, fn)


# ---------------------------------------------------------------------------
# boxes


def box_iou(a: tuple[float, ...], b: tuple[float, ...]) -> float:
    """Intersection over union of two (x, y, w, h) boxes."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (N, 4) and (M, 4) xywh boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax1, ay1 = a[:, 0], a[:, 1]
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx1, by1 = b[:, 0], b[:, 1]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.clip(
        np.minimum(ax2[:, None], bx2[None, :]) - np.maximum(ax1[:, None], bx1[None, :]),
        0.0,
        None,
    )
    ih = np.clip(
        np.minimum(ay2[:, None], by2[None, :]) - np.maximum(ay1[:, None], by1[None, :]),
        0.0,
        None,
    )
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def match_detections(
    pred_boxes: np.ndarray,
    pred_scores: np.ndarray,
    gt_boxes: np.ndarray,
    iou_threshold: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Greedy matching for one image and class.

    Predictions are visited in descending score order (stable on ties) and
    claim the unmatched ground truth of highest IoU when that IoU reaches
    the threshold. Returns (tp flags in visit order, visit order indices).
    """
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    pred_scores = np.asarray(pred_scores, dtype=np.float64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-pred_scores, kind="stable")
    tp = np.zeros(len(order), dtype=bool)
    if len(gt_boxes) == 0 or len(order) == 0:
        return tp, order
    iou = box_iou_matrix(pred_boxes, gt_boxes)
    gt_taken = np.zeros(len(gt_boxes), dtype=bool)
    for rank, p in enumerate(order):
        candidates = iou[p].copy()
        candidates[gt_taken] = -1.0
        g = int(candidates.argmax())
        if candidates[g] >= iou_threshold:
            tp[rank] = True
            gt_taken[g] = True
    return tp, order


def average_precision(tp_flags: np.ndarray, n_gt: int) -> float | None:
    """101-point interpolated AP from score-ranked TP flags.

    Returns None when there is nothing to evaluate (no ground truth and no
    predictions), which callers exclude from class means.
    """
    tp_flags = np.asarray(tp_flags, dtype=bool)
    if n_gt == 0:
        return None if tp_flags.size == 0 else 0.0
    if tp_flags.size == 0:
        return 0.0
    cum_tp = np.cumsum(tp_flags)
    cum_fp = np.cumsum(~tp_flags)
    recall = cum_tp / n_gt
    precision = cum_tp / (cum_tp + cum_fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    indices = np.searchsorted(recall, RECALL_GRID, side="left")
    sampled = np.where(indices < len(envelope), envelope[np.minimum(indices, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def _pooled_flags(
    preds_by_image: dict[int, tuple[np.ndarray, np.ndarray]],
    gts_by_image: dict[int, np.ndarray],
    iou_threshold: float,
) -> tuple[np.ndarray, int]:
    """Match per image, pool flags over the set, rank by global score."""
    scores: list[np.ndarray] = []
    flags: list[np.ndarray] = []
    n_gt = 0
    for image_id in sorted(set(preds_by_image) | set(gts_by_image)):
        boxes, image_scores = preds_by_image.get(
            image_id, (np.zeros((0, 4)), np.zeros(0))
        )
        gt = gts_by_image.get(image_id, np.zeros((0, 4)))
        n_gt += len(gt)
        tp, order = match_detections(boxes, image_scores, gt, iou_threshold)
        scores.append(np.asarray(image_scores, dtype=np.float64)[order])
        flags.append(tp)
    if scores:
        all_scores = np.concatenate(scores)
        all_flags = np.concatenate(flags)
        pooled_order = np.argsort(-all_scores, kind="stable")
        return all_flags[pooled_order], n_gt
    return np.zeros(0, dtype=bool), n_gt


def _group_by_image_and_class(
    preds: list[dict], store: AnnotationStore, image_ids: set[int]
) -> dict[int, dict[int, tuple[np.ndarray, np.ndarray]]]:
    grouped: dict[int, dict[int, list[tuple[tuple[float, ...], float]]]] = {}
    for pred in preds:
        image_id = int(pred["image_id"])
        if image_id not in image_ids:
            raise MetricsError(
                f"prediction references image {image_id} absent from ground truth"
            )
        grouped.setdefault(int(pred["category_id"]), {}).setdefault(
            image_id, []
        ).append((tuple(float(v) for v in pred["bbox"]), float(pred["score"])))
    arrays: dict[int, dict[int, tuple[np.ndarray, np.ndarray]]] = {}
    for category_id, per_image in grouped.items():
        arrays[category_id] = {
            image_id: (
                np.array([b for b, _ in items], dtype=np.float64).reshape(-1, 4),
                np.array([s for _, s in items], dtype=np.float64),
            )
            for image_id, items in per_image.items()
        }
    return arrays


def map_report(
    preds: list[dict],
    store: AnnotationStore,
    split: str = "all",
    conf_threshold: float = 0.25,
    iou_thresholds: tuple[float, ...] = IOU_LADDER,
) -> dict[str, float]:
    """COCO-style detection summary: mAP50, mAP, and P/R/F1 at IoU 0.5.

    ``preds`` are COCO-results records {image_id, category_id, bbox, score}
    in the ground-truth coordinate frame. P/R/F1 use predictions at or above
    ``conf_threshold``; mAP uses every prediction.
    """
    image_ids = set(store.split_ids(split))
    pred_by_class = _group_by_image_and_class(preds, store, image_ids)

    gt_by_class: dict[int, dict[int, np.ndarray]] = {}
    n_gt_total = 0
    for inst in store.instances:
        if inst.image_id not in image_ids or inst.bbox is None:
            continue
        gt_by_class.setdefault(inst.category_id, {}).setdefault(
            inst.image_id, []
        ).append(inst.bbox)
        n_gt_total += 1
    for per_image in gt_by_class.values():
        for image_id in per_image:
            per_image[image_id] = np.array(per_image[image_id], dtype=np.float64)

    n_pred_total = len(preds)
    if n_gt_total == 0 and n_pred_total == 0:
        return {name: 100.0 for name in DET_COLUMNS}

    class_ids = sorted(set(gt_by_class) | set(pred_by_class))
    ap50_values: list[float] = []
    ap_ladder_values: list[float] = []
    for category_id in class_ids:
        class_preds = pred_by_class.get(category_id, {})
        class_gts = gt_by_class.get(category_id, {})
        per_threshold: list[float] = []
        skip_class = False
        for threshold in iou_thresholds:
            flags, n_gt = _pooled_flags(class_preds, class_gts, threshold)
            ap = average_precision(flags, n_gt)
            if ap is None:
                skip_class = True
                break
            per_threshold.append(ap)
        if skip_class:
            continue
        ap50_values.append(per_threshold[iou_thresholds.index(0.5)])
        ap_ladder_values.append(float(np.mean(per_threshold)))

    map50 = 100.0 * float(np.mean(ap50_values)) if ap50_values else 0.0
    map_all = 100.0 * float(np.mean(ap_ladder_values)) if ap_ladder_values else 0.0

    # Operating-point P/R/F1 at IoU 0.5 and the configured confidence.
    tp_total = 0
    kept_total = 0
    for category_id in class_ids:
        class_gts = gt_by_class.get(category_id, {})
        kept: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for image_id, (boxes, scores) in pred_by_class.get(category_id, {}).items():
            keep = scores >= conf_threshold
            if keep.any():
                kept[image_id] = (boxes[keep], scores[keep])
                kept_total += int(keep.sum())
        flags, _ = _pooled_flags(kept, class_gts, 0.5)
        tp_total += int(flags.sum())
    precision = tp_total / kept_total if kept_total else 0.0
    recall = tp_total / n_gt_total if n_gt_total else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0

    return {
        "mAP50": map50,
        "mAP": map_all,
        "P": 100.0 * precision,
        "R": 100.0 * recall,
        "F1": 100.0 * f1,
    }
