"""Adaptation stem and task heads operating on the patch grid.

Box parameterization: each patch (i, j) is an implicit anchor. For offsets
(t_x, t_y, t_w, t_h) the decoded box has

    center_x = (j + 0.5 + t_x) * P      w = P * exp(t_w)
    center_y = (i + 0.5 + t_y) * P      h = P * exp(t_h)

with P = 16. Targets are the exact inverse, assigned to the patch containing
the ground-truth center (a center on a patch boundary belongs to the
higher-index patch).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .encoder import PatchFeatureMap

PATCH_SIZE = 16

_NONLINEARITIES = {"relu": nn.ReLU, "gelu": nn.GELU}

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class StemConfig:
    in_dim: int
    out_dim: int = 256
    nonlinearity: str = "relu"
    layers: int = 2

    def __post_init__(self) -> None:
        if self.out_dim <= 0:
            raise ValueError(f"adapted dim must be positive, got {self.out_dim}")
        if self.layers < 1:
            raise ValueError(f"stem needs at least one layer, got {self.layers}")
        if self.nonlinearity not in _NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")


class AdaptationStem(nn.Module):
    """Pointwise layers mapping frozen features to the shared task space."""

    def __init__(self, cfg: StemConfig) -> None:
        super().__init__()
        self.cfg = cfg
        blocks: list[nn.Module] = []
        dim = cfg.in_dim
        for i in range(cfg.layers):
            blocks.append(nn.Conv2d(dim, cfg.out_dim, kernel_size=1))
            dim = cfg.out_dim
            if i < cfg.layers - 1:
                blocks.append(_NONLINEARITIES[cfg.nonlinearity]())
        self.blocks = nn.Sequential(*blocks)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.cfg.in_dim:
            raise ValueError(
                f"stem expects {self.cfg.in_dim} channels, got {x.shape[1]}"
            )
        return self.blocks(x)


class DetectionHead(nn.Module):
    """Per-patch objectness, class scores, and box offsets (one anchor per patch)."""

    def __init__(self, in_dim: int, num_classes: int = 1) -> None:
        super().__init__()
        if num_classes < 1:
            raise ValueError(f"need at least one class, got {num_classes}")
        self.num_classes = num_classes
        self.objectness = nn.Conv2d(in_dim, 1, kernel_size=1)
        self.class_scores = nn.Conv2d(in_dim, num_classes, kernel_size=1)
        self.offsets = nn.Conv2d(in_dim, 4, kernel_size=1)

    def forward(self, s: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return (
            torch.sigmoid(self.objectness(s)),
            torch.sigmoid(self.class_scores(s)),
            self.offsets(s),
        )


class SegmentationHead(nn.Module):
    """Progressive 2x upsampling from the patch grid to pixel resolution.

    Four stages of nearest upsampling plus a 3x3 refinement recover the full
    factor of 16; a final 1x1 projection and sigmoid yield per-pixel
    foreground probabilities.
    """

    STAGES = 4

    def __init__(self, in_dim: int, base_dim: int = 64) -> None:
        super().__init__()
        stages: list[nn.Module] = []
        dim = in_dim
        for i in range(self.STAGES):
            out = max(base_dim // (2**i), 8)
            stages.append(
                nn.Sequential(
                    nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(dim, out, kernel_size=3, padding=1),
                    nn.ReLU(),
                )
            )
            dim = out
        self.stages = nn.ModuleList(stages)
        self.project = nn.Conv2d(dim, 1, kernel_size=1)

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        x = s
        for stage in self.stages:
            x = stage(x)
        return torch.sigmoid(self.project(x))


@dataclass
class DetGrid:
    """Per-image detection head output on the (H_p, W_p) grid."""

    objectness: torch.Tensor
    class_scores: torch.Tensor
    offsets: torch.Tensor

    def __post_init__(self) -> None:
        grid = self.objectness.shape[-2:]
        if self.class_scores.shape[-2:] != grid or self.offsets.shape[-2:] != grid:
            raise ValueError("detection grids disagree on spatial size")
        if self.offsets.shape[0] != 4:
            raise ValueError(f"offsets must have 4 channels, got {self.offsets.shape[0]}")

    @property
    def grid_size(self) -> tuple[int, int]:
        return (self.objectness.shape[-2], self.objectness.shape[-1])


@dataclass
class DenseMask:
    """Per-image foreground probability map at pixel resolution."""

    probabilities: torch.Tensor
    image_id: int

    @property
    def resolution(self) -> tuple[int, int]:
        return (self.probabilities.shape[-2], self.probabilities.shape[-1])


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    score: float
    class_index: int


@dataclass
class DetTargets:
    """Training targets for one image; numpy, same layout as the head output."""

    objectness: np.ndarray
    class_scores: np.ndarray
    offsets: np.ndarray
    positive: np.ndarray


def stem_forward(features: PatchFeatureMap, stem: AdaptationStem) -> torch.Tensor:
    """Adapt one feature map; returns (C_S, H_p, W_p)."""
    x = torch.from_numpy(features.data).unsqueeze(0)
    return stem(x).squeeze(0)


def det_head_forward(adapted: torch.Tensor, head: DetectionHead) -> DetGrid:
    obj, cls, box = head(adapted.unsqueeze(0))
    return DetGrid(
        objectness=obj.squeeze(0), class_scores=cls.squeeze(0), offsets=box.squeeze(0)
    )


def seg_head_forward(
    adapted: torch.Tensor, head: SegmentationHead, image_id: int = -1
) -> DenseMask:
    probs = head(adapted.unsqueeze(0)).squeeze(0)
    return DenseMask(probabilities=probs, image_id=image_id)


def decode_boxes(grid: DetGrid, patch: int = PATCH_SIZE) -> list[Detection]:
    """Decode every patch anchor; returns exactly H_p * W_p detections.

    Score is objectness times the best class probability; boxes are clipped
    to the grid's pixel extent.
    """
    obj = grid.objectness.detach().cpu().numpy().astype(np.float64)[0]
    cls = grid.class_scores.detach().cpu().numpy().astype(np.float64)
    off = grid.offsets.detach().cpu().numpy().astype(np.float64)
    hp, wp = obj.shape
    height, width = hp * patch, wp * patch

    cols = np.arange(wp, dtype=np.float64)
    rows = np.arange(hp, dtype=np.float64)
    cx = (cols[None, :] + 0.5 + off[0]) * patch
    cy = (rows[:, None] + 0.5 + off[1]) * patch
    w = patch * np.exp(off[2])
    h = patch * np.exp(off[3])

    x1 = np.clip(cx - w / 2, 0.0, width)
    y1 = np.clip(cy - h / 2, 0.0, height)
    x2 = np.clip(cx + w / 2, 0.0, width)
    y2 = np.clip(cy + h / 2, 0.0, height)

    class_index = cls.argmax(axis=0)
    score = obj * cls.max(axis=0)

    detections = []
    for i in range(hp):
        for j in range(wp):
            detections.append(
                Detection(
                    box=(
                        float(x1[i, j]),
                        float(y1[i, j]),
                        float(x2[i, j] - x1[i, j]),
                        float(y2[i, j] - y1[i, j]),
                    ),
                    score=float(score[i, j]),
                    class_index=int(class_index[i, j]),
                )
            )
    return detections


def encode_targets(
    boxes: list[tuple[float, float, float, float]],
    class_indices: list[int],
    grid_size: tuple[int, int],
    num_classes: int = 1,
    patch: int = PATCH_SIZE,
    instance_ids: list[int] | None = None,
) -> DetTargets:
    """Inverse of the decode rule: assign each box to its center patch.

    When two centers land in one patch the larger-area box wins; ties go to
    the lower instance id. Degenerate boxes (w or h <= 0) are rejected.
    """
    hp, wp = grid_size
    if instance_ids is None:
        instance_ids = list(range(len(boxes)))
    objectness = np.zeros((1, hp, wp), dtype=np.float32)
    class_scores = np.zeros((num_classes, hp, wp), dtype=np.float32)
    offsets = np.zeros((4, hp, wp), dtype=np.float32)
    positive = np.zeros((hp, wp), dtype=bool)
    occupant_area = np.full((hp, wp), -1.0)
    occupant_id = np.full((hp, wp), -1, dtype=np.int64)

    for box, class_index, inst_id in zip(boxes, class_indices, instance_ids):
        x, y, w, h = (float(v) for v in box)
        if w <= 0 or h <= 0:
            raise ValueError(f"instance {inst_id}: degenerate box size ({w}, {h})")
        cx, cy = x + w / 2, y + h / 2
        j, i = int(cx // patch), int(cy // patch)
        if not (0 <= i < hp and 0 <= j < wp):
            raise ValueError(
                f"instance {inst_id}: center ({cx}, {cy}) outside grid {grid_size}"
            )
        area = w * h
        if positive[i, j]:
            if area < occupant_area[i, j] or (
                area == occupant_area[i, j] and inst_id > occupant_id[i, j]
            ):
                continue
        positive[i, j] = True
        occupant_area[i, j] = area
        occupant_id[i, j] = inst_id
        objectness[0, i, j] = 1.0
        class_scores[:, i, j] = 0.0
        class_scores[class_index, i, j] = 1.0
        offsets[0, i, j] = cx / patch - (j + 0.5)
        offsets[1, i, j] = cy / patch - (i + 0.5)
        offsets[2, i, j] = np.log(w / patch)
        offsets[3, i, j] = np.log(h / patch)
    return DetTargets(
        objectness=objectness, class_scores=class_scores, offsets=offsets,
        positive=positive,
    )


def decode_single(
    offsets: tuple[float, float, float, float],
    patch_row: int,
    patch_col: int,
    patch: int = PATCH_SIZE,
) -> tuple[float, float, float, float]:
    """Decode one patch's offsets to an unclipped (x, y, w, h) box."""
    tx, ty, tw, th = offsets
    cx = (patch_col + 0.5 + tx) * patch
    cy = (patch_row + 0.5 + ty) * patch
    w = patch * float(np.exp(tw))
    h = patch * float(np.exp(th))
    return (cx - w / 2, cy - h / 2, w, h)


def build_heads(
    task: str, in_dim: int, stem_dim: int = 256, num_classes: int = 1,
    seg_base_dim: int = 64,
) -> tuple[AdaptationStem, nn.Module]:
    stem = AdaptationStem(StemConfig(in_dim=in_dim, out_dim=stem_dim))
    if task == "det":
        head: nn.Module = DetectionHead(stem_dim, num_classes=num_classes)
    elif task == "seg":
        head = SegmentationHead(stem_dim, base_dim=seg_base_dim)
    else:
        raise ValueError(f"unknown task {task!r}")
    return stem, head


def save_checkpoint(
    path: str | Path,
    stem: AdaptationStem,
    head: nn.Module,
    meta: dict,
) -> Path:
    """Persist stem + head parameters with enough metadata to rebuild them."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    task = meta["task"]
    payload = {
        "version": CHECKPOINT_VERSION,
        "meta": dict(meta),
        "stem_config": {
            "in_dim": stem.cfg.in_dim,
            "out_dim": stem.cfg.out_dim,
            "nonlinearity": stem.cfg.nonlinearity,
            "layers": stem.cfg.layers,
        },
        "head_config": {
            "task": task,
            "num_classes": getattr(head, "num_classes", 1),
            "seg_base_dim": meta.get("seg_base_dim", 64),
        },
        "stem_state": stem.state_dict(),
        "head_state": head.state_dict(),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[AdaptationStem, nn.Module, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    stem = AdaptationStem(StemConfig(**payload["stem_config"]))
    stem.load_state_dict(payload["stem_state"])
    head_cfg = payload["head_config"]
    if head_cfg["task"] == "det":
        head: nn.Module = DetectionHead(
            stem.cfg.out_dim, num_classes=head_cfg["num_classes"]
        )
    else:
        head = SegmentationHead(stem.cfg.out_dim, base_dim=head_cfg["seg_base_dim"])
    head.load_state_dict(payload["head_state"])
    stem.eval()
    head.eval()
    return stem, head, payload["meta"]
