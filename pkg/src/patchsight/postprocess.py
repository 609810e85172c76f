"""Inference postprocessing: confidence filtering, NMS, capping, binarization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .archive import FeatureArchive
from .coco import AnnotationStore
from .heads import (
    AdaptationStem,
    DenseMask,
    DetGrid,
    Detection,
    decode_boxes,
    det_head_forward,
    seg_head_forward,
    stem_forward,
)
from .metrics import box_iou_matrix


@dataclass(frozen=True)
class PostprocessConfig:
    conf_threshold: float = 0.25
    nms_threshold: float = 0.5
    max_detections: int = 300
    mask_threshold: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 <= self.conf_threshold <= 1.0:
            raise ValueError(f"confidence threshold out of range: {self.conf_threshold}")
        if not 0.0 < self.nms_threshold < 1.0:
            raise ValueError(f"NMS threshold out of range: {self.nms_threshold}")
        if self.max_detections < 1:
            raise ValueError(f"max detections must be >= 1: {self.max_detections}")
        if not 0.0 <= self.mask_threshold <= 1.0:
            raise ValueError(f"mask threshold out of range: {self.mask_threshold}")


def nms(
    boxes: np.ndarray, scores: np.ndarray, iou_threshold: float
) -> list[int]:
    """Greedy non-maximum suppression; returns kept indices.

    Boxes are visited in descending score order with a stable tie-break on
    the original index; a box is dropped iff its IoU with an already-kept
    box exceeds the threshold.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    if len(order) == 0:
        return []
    iou = box_iou_matrix(boxes, boxes)
    kept: list[int] = []
    for candidate in order:
        if all(iou[candidate, k] <= iou_threshold for k in kept):
            kept.append(int(candidate))
    return kept


def postprocess(grid: DetGrid, cfg: PostprocessConfig) -> list[Detection]:
    """Decode, confidence-filter, class-wise NMS, cap, sort by score."""
    raw = decode_boxes(grid)
    survivors = [d for d in raw if d.score >= cfg.conf_threshold]
    final: list[Detection] = []
    for class_index in sorted({d.class_index for d in survivors}):
        class_dets = [d for d in survivors if d.class_index == class_index]
        boxes = np.array([d.box for d in class_dets], dtype=np.float64)
        scores = np.array([d.score for d in class_dets], dtype=np.float64)
        final.extend(class_dets[k] for k in nms(boxes, scores, cfg.nms_threshold))
    final.sort(key=lambda d: -d.score)
    return final[: cfg.max_detections]


def binarize(mask: DenseMask, threshold: float = 0.5) -> np.ndarray:
    """Foreground iff probability >= threshold; returns a bool (H, W) array."""
    probs = mask.probabilities.detach().cpu().numpy()[0]
    return probs >= threshold


# ---------------------------------------------------------------------------
# whole-image prediction (archive features -> original-coordinate outputs)


def _scale_factors(
    store: AnnotationStore, image_id: int, feature_size: tuple[int, int]
) -> tuple[float, float]:
    rec = store.image_by_id(image_id)
    h, w = feature_size
    return (w / rec.width, h / rec.height)


def predict_detections(
    archive: FeatureArchive,
    store: AnnotationStore,
    stem: AdaptationStem,
    head,
    cfg: PostprocessConfig,
    image_ids: list[int],
    category_ids: list[int] | None = None,
) -> list[dict]:
    """Run the detection path and emit COCO-results records in original pixels."""
    if category_ids is None:
        category_ids = sorted(cat.id for cat in store.categories)
    results: list[dict] = []
    stem.eval()
    head.eval()
    with torch.no_grad():
        for image_id in image_ids:
            fmap = archive.get(image_id)
            grid = det_head_forward(stem_forward(fmap, stem), head)
            sx, sy = _scale_factors(store, image_id, fmap.image_size)
            rec = store.image_by_id(image_id)
            for det in postprocess(grid, cfg):
                x, y, w, h = det.box
                x1 = min(max(x / sx, 0.0), rec.width)
                y1 = min(max(y / sy, 0.0), rec.height)
                x2 = min(max((x + w) / sx, 0.0), rec.width)
                y2 = min(max((y + h) / sy, 0.0), rec.height)
                results.append(
                    {
                        "image_id": image_id,
                        "category_id": category_ids[det.class_index],
                        "bbox": [x1, y1, x2 - x1, y2 - y1],
                        "score": det.score,
                    }
                )
    return results


def predict_masks(
    archive: FeatureArchive,
    store: AnnotationStore,
    stem: AdaptationStem,
    head,
    image_ids: list[int],
    mask_threshold: float = 0.5,
) -> dict[int, np.ndarray]:
    """Run the segmentation path; returns original-resolution binary masks."""
    masks: dict[int, np.ndarray] = {}
    stem.eval()
    head.eval()
    with torch.no_grad():
        for image_id in image_ids:
            fmap = archive.get(image_id)
            dense = seg_head_forward(stem_forward(fmap, stem), head, image_id)
            binary = binarize(dense, mask_threshold)
            rec = store.image_by_id(image_id)
            masks[image_id] = resize_mask_nearest(binary, (rec.height, rec.width))
    return masks


def resize_mask_nearest(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resize of a binary mask to (height, width)."""
    h0, w0 = mask.shape
    h1, w1 = size
    if (h0, w0) == (h1, w1):
        return mask.copy()
    rows = np.minimum((np.arange(h1) * h0 / h1).astype(int), h0 - 1)
    cols = np.minimum((np.arange(w1) * w0 / w1).astype(int), w0 - 1)
    return mask[rows][:, cols]
