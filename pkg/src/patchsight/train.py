"""Decoder training on cached features: losses, optimizer loop, curves.

The backbone never sees a gradient: features come read-only from an
archive, and only stem + head parameters are optimized (Adam, single
learning rate, no schedule).
"""

from __future__ import annotations

import csv
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .archive import FeatureArchive
from .coco import AnnotationStore, image_foreground_mask
from .heads import (
    DenseMask,
    DetGrid,
    DetTargets,
    build_heads,
    det_head_forward,
    encode_targets,
    seg_head_forward,
)
from .metrics import map_report, seg_metrics
from .postprocess import (
    PostprocessConfig,
    predict_detections,
    predict_masks,
    resize_mask_nearest,
)

_BCE_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    objectness: float = 1.0
    classes: float = 1.0
    box: float = 1.0
    seg_bce: float = 1.0
    seg_dice: float = 1.0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    flip_augment: bool = False
    stem_dim: int = 256
    seg_base_dim: int = 64
    weights: LossWeights = field(default_factory=LossWeights)
    max_steps: int | None = None

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")


class TrainError(RuntimeError):
    pass


def _bce(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    p = pred.clamp(_BCE_EPS, 1.0 - _BCE_EPS)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()


def _as_tensor(value, like: torch.Tensor) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value.to(like.dtype)
    return torch.as_tensor(value, dtype=like.dtype)


def detection_loss(
    pred: DetGrid, targets: DetTargets, weights: LossWeights = LossWeights()
) -> tuple[torch.Tensor, dict[str, float]]:
    """Objectness BCE over all patches plus class BCE and smooth-L1 box
    regression over positive patches; positive-free images contribute only
    the objectness term."""
    obj_t = _as_tensor(targets.objectness, pred.objectness)
    cls_t = _as_tensor(targets.class_scores, pred.class_scores)
    off_t = _as_tensor(targets.offsets, pred.offsets)
    if obj_t.shape != pred.objectness.shape or off_t.shape != pred.offsets.shape:
        raise ValueError("prediction and target grids disagree on shape")
    pos = torch.from_numpy(np.asarray(targets.positive, dtype=bool))

    obj_term = _bce(pred.objectness, obj_t)
    if bool(pos.any()):
        cls_term = _bce(pred.class_scores[:, pos], cls_t[:, pos])
        box_term = F.smooth_l1_loss(pred.offsets[:, pos], off_t[:, pos], beta=1.0)
    else:
        cls_term = pred.class_scores.new_zeros(())
        box_term = pred.offsets.new_zeros(())
    total = (
        weights.objectness * obj_term
        + weights.classes * cls_term
        + weights.box * box_term
    )
    return total, {
        "objectness": float(obj_term),
        "classes": float(cls_term),
        "box": float(box_term),
    }


def segmentation_loss(
    pred: DenseMask, gt_mask, weights: LossWeights = LossWeights()
) -> tuple[torch.Tensor, dict[str, float]]:
    """Pixel BCE plus soft-Dice (unit smoothing keeps empty masks finite)."""
    probs = pred.probabilities
    gt = _as_tensor(gt_mask, probs)
    if gt.dim() == 2:
        gt = gt.unsqueeze(0)
    if gt.shape != probs.shape:
        raise ValueError(
            f"resolution mismatch: prediction {tuple(probs.shape)} vs "
            f"ground truth {tuple(gt.shape)}"
        )
    bce_term = _bce(probs, gt)
    intersection = (probs * gt).sum()
    dice = (2.0 * intersection + 1.0) / (probs.sum() + gt.sum() + 1.0)
    dice_term = 1.0 - dice
    total = weights.seg_bce * bce_term + weights.seg_dice * dice_term
    return total, {"bce": float(bce_term), "dice": float(dice_term)}


# ---------------------------------------------------------------------------
# sample preparation


@dataclass
class _Sample:
    image_id: int
    grid: tuple[int, int]
    features: torch.Tensor
    features_flipped: torch.Tensor | None
    det: DetTargets | None = None
    det_flipped: DetTargets | None = None
    seg: torch.Tensor | None = None
    seg_flipped: torch.Tensor | None = None


def scaled_boxes(
    store: AnnotationStore, image_id: int, feature_size: tuple[int, int]
) -> tuple[list[tuple[float, float, float, float]], list[int], list[int]]:
    """Instance boxes mapped from original pixels into the preprocessed frame."""
    rec = store.image_by_id(image_id)
    h, w = feature_size
    sx, sy = w / rec.width, h / rec.height
    boxes, category_ids, instance_ids = [], [], []
    for inst in store.instances_for_image(image_id):
        if inst.bbox is None:
            continue
        x, y, bw, bh = inst.bbox
        x, y = x * sx, y * sy
        bw = min(bw * sx, w - x)
        bh = min(bh * sy, h - y)
        boxes.append((x, y, bw, bh))
        category_ids.append(inst.category_id)
        instance_ids.append(inst.id)
    return boxes, category_ids, instance_ids


def flip_boxes(
    boxes: list[tuple[float, float, float, float]], width: float
) -> list[tuple[float, float, float, float]]:
    return [(width - x - w, y, w, h) for x, y, w, h in boxes]


def _build_samples(
    archive: FeatureArchive,
    store: AnnotationStore,
    task: str,
    image_ids: list[int],
    flip_augment: bool,
) -> list[_Sample]:
    class_of = {cid: k for k, cid in enumerate(sorted(c.id for c in store.categories))}
    samples: list[_Sample] = []
    for image_id in image_ids:
        if image_id not in archive:
            raise TrainError(f"no cached features for annotated image {image_id}")
        fmap = archive.get(image_id)
        flipped = None
        if flip_augment:
            try:
                flipped = archive.get(image_id, flipped=True)
            except Exception as exc:
                raise TrainError(
                    f"flip augmentation requested but archive has no flipped "
                    f"entry for image {image_id}; re-extract with --flip-aug"
                ) from exc
        sample = _Sample(
            image_id=image_id,
            grid=fmap.grid_size,
            features=torch.from_numpy(fmap.data),
            features_flipped=torch.from_numpy(flipped.data) if flipped else None,
        )
        h, w = fmap.image_size
        if task == "det":
            boxes, category_ids, instance_ids = scaled_boxes(
                store, image_id, fmap.image_size
            )
            class_indices = [class_of[cid] for cid in category_ids]
            sample.det = encode_targets(
                boxes, class_indices, fmap.grid_size,
                num_classes=len(class_of), instance_ids=instance_ids,
            )
            if flip_augment:
                sample.det_flipped = encode_targets(
                    flip_boxes(boxes, w), class_indices, fmap.grid_size,
                    num_classes=len(class_of), instance_ids=instance_ids,
                )
        else:
            gt = image_foreground_mask(store, image_id)
            gt = resize_mask_nearest(gt, (h, w)).astype(np.float32)
            sample.seg = torch.from_numpy(gt).unsqueeze(0)
            if flip_augment:
                sample.seg_flipped = torch.from_numpy(
                    np.ascontiguousarray(gt[:, ::-1])
                ).unsqueeze(0)
        samples.append(sample)
    return samples


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    stem: torch.nn.Module
    head: torch.nn.Module
    task: str
    curve: list[dict]
    steps: int
    best_epoch: int
    config: TrainConfig


def _batched(order: list[int], samples: list[_Sample], batch_size: int) -> list[list[int]]:
    buckets: dict[tuple[int, int], list[int]] = {}
    for idx in order:
        buckets.setdefault(samples[idx].grid, []).append(idx)
    batches: list[list[int]] = []
    for bucket in buckets.values():
        for start in range(0, len(bucket), batch_size):
            batches.append(bucket[start : start + batch_size])
    return batches


def train(
    archive: FeatureArchive,
    store: AnnotationStore,
    task: str,
    cfg: TrainConfig = TrainConfig(),
) -> TrainResult:
    """Train stem + head on the train split; deterministic under cfg.seed.

    Returns the modules loaded with the best-validation-epoch parameters
    (last epoch when there is no validation split) plus the per-epoch loss
    curve rows {epoch, train_loss, val_metric}.
    """
    if task not in ("seg", "det"):
        raise ValueError(f"unknown task {task!r}")
    torch.manual_seed(cfg.seed)
    rng = random.Random(cfg.seed)

    train_ids = store.split_ids("train") or store.split_ids("all")
    samples = _build_samples(archive, store, task, train_ids, cfg.flip_augment)
    if not samples:
        raise TrainError("no training samples")
    val_ids = [i for i in store.split_ids("val") if i in archive]

    stem, head = build_heads(
        task,
        in_dim=archive.spec.embed_dim,
        stem_dim=cfg.stem_dim,
        num_classes=max(1, len(store.categories)),
        seg_base_dim=cfg.seg_base_dim,
    )
    params = list(stem.parameters()) + list(head.parameters())
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate)

    curve: list[dict] = []
    best_metric = -float("inf")
    best_epoch = -1
    best_state: tuple[dict, dict] | None = None
    steps = 0
    done = False

    for epoch in range(cfg.epochs):
        order = list(range(len(samples)))
        rng.shuffle(order)
        use_flip = [cfg.flip_augment and rng.random() < 0.5 for _ in samples]

        stem.train()
        head.train()
        epoch_loss = 0.0
        epoch_count = 0
        for batch in _batched(order, samples, cfg.batch_size):
            feats = torch.stack(
                [
                    samples[i].features_flipped if use_flip[i] else samples[i].features
                    for i in batch
                ]
            )
            adapted = stem(feats)
            if task == "det":
                obj, cls, box = head(adapted)
                losses = []
                for b, i in enumerate(batch):
                    grid_pred = DetGrid(
                        objectness=obj[b], class_scores=cls[b], offsets=box[b]
                    )
                    target = samples[i].det_flipped if use_flip[i] else samples[i].det
                    total, _ = detection_loss(grid_pred, target, cfg.weights)
                    losses.append(total)
            else:
                probs = head(adapted)
                losses = []
                for b, i in enumerate(batch):
                    dense = DenseMask(probabilities=probs[b], image_id=samples[i].image_id)
                    target = samples[i].seg_flipped if use_flip[i] else samples[i].seg
                    total, _ = segmentation_loss(dense, target, cfg.weights)
                    losses.append(total)
            loss = torch.stack(losses).mean()
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            steps += 1
            epoch_loss += float(loss) * len(batch)
            epoch_count += len(batch)
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                done = True
                break

        val_metric = float("nan")
        if val_ids:
            val_metric = _validation_metric(archive, store, task, stem, head, val_ids)
            if val_metric > best_metric:
                best_metric = val_metric
                best_epoch = epoch
                best_state = (
                    {k: v.clone() for k, v in stem.state_dict().items()},
                    {k: v.clone() for k, v in head.state_dict().items()},
                )
        curve.append(
            {
                "epoch": epoch,
                "train_loss": epoch_loss / max(epoch_count, 1),
                "val_metric": val_metric,
            }
        )
        if done:
            break

    if best_state is not None:
        stem.load_state_dict(best_state[0])
        head.load_state_dict(best_state[1])
    else:
        best_epoch = len(curve) - 1
    stem.eval()
    head.eval()
    return TrainResult(
        stem=stem, head=head, task=task, curve=curve, steps=steps,
        best_epoch=best_epoch, config=cfg,
    )


def _validation_metric(archive, store, task, stem, head, val_ids) -> float:
    if task == "seg":
        preds = predict_masks(archive, store, stem, head, val_ids)
        gts = {i: image_foreground_mask(store, i) for i in val_ids}
        return seg_metrics(preds, gts)["mIoU"]
    preds = predict_detections(
        archive, store, stem, head, PostprocessConfig(), val_ids
    )
    sub = AnnotationStore(
        images=[store.image_by_id(i) for i in val_ids],
        categories=list(store.categories),
        instances=[inst for inst in store.instances if inst.image_id in set(val_ids)],
        splits={i: "val" for i in val_ids},
    )
    return map_report(preds, sub, split="val")["mAP50"]


def write_curve_csv(curve: list[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=["epoch", "train_loss", "val_metric"])
        writer.writeheader()
        writer.writerows(curve)
    return path
