"""Synthetic scene generation for tests and offline demos.

Block scenes paint signal-colored 16x16 squares on aligned patch cells so
the mock encoder's offset rule makes foreground linearly separable. Cluster
scenes lay out overlapping fruit disks in dense groups plus isolated
singles, the fixture family for the aggregation-verification pipeline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .coco import AnnotationStore, Category, ImageRecord, Instance
from .encoder import PATCH_SIZE, SIGNAL_COLOR

Box = tuple[float, float, float, float]


def make_block_scene(
    grid: tuple[int, int], blocks: list[tuple[int, int]], seed: int
) -> np.ndarray:
    """RGB uint8 raster with signal squares on the given patch cells."""
    hp, wp = grid
    rng = np.random.default_rng(seed)
    h, w = hp * PATCH_SIZE, wp * PATCH_SIZE
    # muted green/brown background, never close to the signal color
    base = np.array([70, 110, 60], dtype=np.float64)
    image = base + rng.normal(0.0, 12.0, size=(h, w, 3))
    image = np.clip(image, 0, 150).astype(np.uint8)
    for i, j in blocks:
        y, x = i * PATCH_SIZE, j * PATCH_SIZE
        image[y : y + PATCH_SIZE, x : x + PATCH_SIZE] = SIGNAL_COLOR
    return image


def block_instance(
    inst_id: int, image_id: int, cell: tuple[int, int], category_id: int = 1
) -> Instance:
    """Instance for one signal block: rectangle polygon plus its tight bbox."""
    i, j = cell
    x0, y0 = float(j * PATCH_SIZE), float(i * PATCH_SIZE)
    x1, y1 = x0 + PATCH_SIZE - 1, y0 + PATCH_SIZE - 1
    return Instance(
        id=inst_id,
        image_id=image_id,
        category_id=category_id,
        bbox=(x0, y0, float(PATCH_SIZE), float(PATCH_SIZE)),
        polygons=((x0, y0, x1, y0, x1, y1, x0, y1),),
    )


@dataclass
class BlockDataset:
    store: AnnotationStore
    images: dict[int, np.ndarray]
    blocks: dict[int, list[tuple[int, int]]]


def build_block_dataset(
    n_images: int = 10,
    grid: tuple[int, int] = (8, 8),
    blocks_per_image: tuple[int, int] = (2, 5),
    seed: int = 0,
    category_name: str = "fruit",
) -> BlockDataset:
    """Dataset of block scenes with box + polygon-mask annotations, all train."""
    rng = np.random.default_rng(seed)
    hp, wp = grid
    images: dict[int, np.ndarray] = {}
    blocks: dict[int, list[tuple[int, int]]] = {}
    records: list[ImageRecord] = []
    instances: list[Instance] = []
    inst_id = 1
    for image_id in range(1, n_images + 1):
        count = int(rng.integers(blocks_per_image[0], blocks_per_image[1] + 1))
        cells = rng.choice(hp * wp, size=count, replace=False)
        cell_list = sorted((int(c) // wp, int(c) % wp) for c in cells)
        images[image_id] = make_block_scene(grid, cell_list, seed=seed * 10007 + image_id)
        blocks[image_id] = cell_list
        records.append(
            ImageRecord(
                id=image_id,
                file_name=f"images/{image_id:04d}.png",
                width=wp * PATCH_SIZE,
                height=hp * PATCH_SIZE,
            )
        )
        for cell in cell_list:
            instances.append(block_instance(inst_id, image_id, cell))
            inst_id += 1
    store = AnnotationStore(
        images=records,
        categories=[Category(id=1, name=category_name)],
        instances=instances,
        splits={image_id: "train" for image_id in images},
    )
    return BlockDataset(store=store, images=images, blocks=blocks)


def write_image_dir(dataset: BlockDataset, root: str | Path) -> Path:
    """Write the scene rasters under ``root`` at the store's file names."""
    root = Path(root)
    for rec in dataset.store.images:
        path = root / rec.file_name
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(dataset.images[rec.id]).save(path)
    return root


# ---------------------------------------------------------------------------
# cluster scenes


@dataclass
class ClusterScene:
    """One sampled layout: dense fruit groups plus isolated single fruits."""

    mask: np.ndarray
    fruit_boxes: list[Box]
    cluster_boxes: list[Box]
    cluster_members: list[list[int]]
    isolated: list[int] = field(default_factory=list)
    size: tuple[int, int] = (320, 320)


def _paint_disk(mask: np.ndarray, cx: float, cy: float, radius: float) -> Box:
    h, w = mask.shape
    ys, xs = np.ogrid[:h, :w]
    disk = (xs - cx) ** 2 + (ys - cy) ** 2 <= radius**2
    mask |= disk
    rows = np.flatnonzero(disk.any(axis=1))
    cols = np.flatnonzero(disk.any(axis=0))
    return (
        float(cols[0]),
        float(rows[0]),
        float(cols[-1] - cols[0] + 1),
        float(rows[-1] - rows[0] + 1),
    )


def sample_cluster_scene(
    seed: int,
    size: tuple[int, int] = (320, 320),
    n_clusters: int = 2,
    n_isolated_range: tuple[int, int] = (1, 3),
    radius: float = 9.0,
) -> ClusterScene:
    """Sample one layout from the two-clusters-plus-isolated-fruits family.

    Each cluster is a center fruit overlapped by 2-4 ring fruits (one
    foreground component); isolated fruits sit far from every cluster and
    from each other.
    """
    rng = np.random.default_rng(seed)
    h, w = size
    mask = np.zeros((h, w), dtype=bool)
    margin = 6 * radius

    anchors: list[tuple[float, float]] = []
    # cluster anchors in distinct half-planes to keep them apart
    spots = [(0.27, 0.27), (0.73, 0.73), (0.27, 0.73), (0.73, 0.27)]
    for k in range(n_clusters):
        fx, fy = spots[k % len(spots)]
        anchors.append(
            (
                fx * w + float(rng.uniform(-radius, radius)),
                fy * h + float(rng.uniform(-radius, radius)),
            )
        )

    fruit_boxes: list[Box] = []
    cluster_boxes: list[Box] = []
    cluster_members: list[list[int]] = []
    for cx, cy in anchors:
        members: list[int] = []
        boxes: list[Box] = []
        box = _paint_disk(mask, cx, cy, radius)
        members.append(len(fruit_boxes))
        fruit_boxes.append(box)
        boxes.append(box)
        ring = int(rng.integers(2, 5))
        phase = float(rng.uniform(0.0, 2 * math.pi))
        for t in range(ring):
            angle = phase + 2 * math.pi * t / ring
            px = cx + 1.5 * radius * math.cos(angle)
            py = cy + 1.5 * radius * math.sin(angle)
            box = _paint_disk(mask, px, py, radius)
            members.append(len(fruit_boxes))
            fruit_boxes.append(box)
            boxes.append(box)
        x1 = min(b[0] for b in boxes)
        y1 = min(b[1] for b in boxes)
        x2 = max(b[0] + b[2] for b in boxes)
        y2 = max(b[1] + b[3] for b in boxes)
        cluster_boxes.append((x1, y1, x2 - x1, y2 - y1))
        cluster_members.append(members)

    isolated: list[int] = []
    n_isolated = int(rng.integers(n_isolated_range[0], n_isolated_range[1] + 1))
    taken = list(anchors)
    attempts = 0
    while len(isolated) < n_isolated and attempts < 200:
        attempts += 1
        px = float(rng.uniform(3 * radius, w - 3 * radius))
        py = float(rng.uniform(3 * radius, h - 3 * radius))
        if any(math.dist((px, py), other) < margin for other in taken):
            continue
        taken.append((px, py))
        box = _paint_disk(mask, px, py, radius)
        isolated.append(len(fruit_boxes))
        fruit_boxes.append(box)
    return ClusterScene(
        mask=mask,
        fruit_boxes=fruit_boxes,
        cluster_boxes=cluster_boxes,
        cluster_members=cluster_members,
        isolated=isolated,
        size=size,
    )


def cluster_scene_store(scenes: dict[int, ClusterScene]) -> AnnotationStore:
    """Ground-truth store with one cluster category over the sampled scenes."""
    records = []
    instances = []
    inst_id = 1
    for image_id in sorted(scenes):
        scene = scenes[image_id]
        h, w = scene.size
        records.append(
            ImageRecord(
                id=image_id, file_name=f"images/{image_id:04d}.png", width=w, height=h
            )
        )
        for box in scene.cluster_boxes:
            instances.append(
                Instance(id=inst_id, image_id=image_id, category_id=1, bbox=box)
            )
            inst_id += 1
    return AnnotationStore(
        images=records,
        categories=[Category(id=1, name="cluster")],
        instances=instances,
        splits={image_id: "test" for image_id in scenes},
    )
