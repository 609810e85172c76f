"""COCO-style annotation store: loading, validation, bbox derivation, splits."""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

SPLIT_NAMES = ("train", "val", "test")


class AnnotationError(ValueError):
    """Raised when an annotation source violates the store schema."""


@dataclass(frozen=True)
class ImageRecord:
    id: int
    file_name: str
    width: int
    height: int


@dataclass(frozen=True)
class Category:
    id: int
    name: str


@dataclass(frozen=True)
class Instance:
    """One annotated object.

    ``bbox`` is (x, y, w, h) in pixels, top-left origin, half-open extents;
    ``bbox is None`` marks a mask-only instance pending bbox derivation.
    Mask geometry is either ``polygons`` (flat [x1, y1, x2, y2, ...] vertex
    lists) or ``rle`` (column-major uncompressed run lengths starting with
    the background run, ``{"size": [h, w], "counts": [...]}``).
    """

    id: int
    image_id: int
    category_id: int
    bbox: tuple[float, float, float, float] | None
    polygons: tuple[tuple[float, ...], ...] | None = None
    rle: tuple[int, ...] | None = None
    rle_size: tuple[int, int] | None = None

    @property
    def has_mask(self) -> bool:
        return self.polygons is not None or self.rle is not None


@dataclass(frozen=True)
class SplitPolicy:
    """Train/val/test assignment rule.

    ``random`` mode shuffles image ids with ``seed`` and cuts by ``ratios``;
    ``predefined`` mode applies ``assignments`` verbatim.
    """

    ratios: tuple[float, float, float] = (0.7, 0.2, 0.1)
    seed: int = 0
    mode: str = "random"
    assignments: dict[int, str] | None = None


@dataclass
class AnnotationStore:
    images: list[ImageRecord]
    categories: list[Category]
    instances: list[Instance]
    splits: dict[int, str] = field(default_factory=dict)

    def image_by_id(self, image_id: int) -> ImageRecord:
        for rec in self.images:
            if rec.id == image_id:
                return rec
        raise KeyError(f"unknown image id {image_id}")

    def instances_for_image(self, image_id: int) -> list[Instance]:
        return [inst for inst in self.instances if inst.image_id == image_id]

    def split_ids(self, split: str) -> list[int]:
        if split == "all":
            return [rec.id for rec in self.images]
        return [rec.id for rec in self.images if self.splits.get(rec.id) == split]

    def split_sizes(self) -> tuple[int, int, int]:
        return tuple(len(self.split_ids(name)) for name in SPLIT_NAMES)


# ---------------------------------------------------------------------------
# mask geometry


def rle_encode(mask: np.ndarray) -> tuple[int, ...]:
    """Column-major run lengths of a binary mask, first run counts zeros."""
    flat = np.asarray(mask, dtype=bool).flatten(order="F")
    if flat.size == 0:
        return ()
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return tuple(int(r) for r in runs)


def rle_decode(counts: tuple[int, ...], size: tuple[int, int]) -> np.ndarray:
    h, w = size
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for run in counts:
        if value:
            flat[pos : pos + run] = True
        pos += run
        value = not value
    if pos != h * w:
        raise AnnotationError(f"RLE length {pos} does not match mask size {h}x{w}")
    return flat.reshape((h, w), order="F")


def polygons_to_mask(
    polygons: tuple[tuple[float, ...], ...], height: int, width: int
) -> np.ndarray:
    img = Image.new("1", (width, height), 0)
    draw = ImageDraw.Draw(img)
    for poly in polygons:
        points = list(zip(poly[0::2], poly[1::2]))
        if len(points) >= 3:
            draw.polygon(points, outline=1, fill=1)
    return np.asarray(img, dtype=bool)


def instance_mask(inst: Instance, height: int, width: int) -> np.ndarray:
    """Rasterize an instance's mask geometry to a binary (height, width) array."""
    if inst.polygons is not None:
        return polygons_to_mask(inst.polygons, height, width)
    if inst.rle is not None:
        if inst.rle_size != (height, width):
            raise AnnotationError(
                f"instance {inst.id}: RLE size {inst.rle_size} does not match "
                f"image size ({height}, {width})"
            )
        return rle_decode(inst.rle, inst.rle_size)
    raise AnnotationError(f"instance {inst.id} has no mask geometry")


def image_foreground_mask(store: AnnotationStore, image_id: int) -> np.ndarray:
    """Union of all instance masks for an image; bbox-only instances paint
    their rectangle."""
    rec = store.image_by_id(image_id)
    mask = np.zeros((rec.height, rec.width), dtype=bool)
    for inst in store.instances_for_image(image_id):
        if inst.has_mask:
            mask |= instance_mask(inst, rec.height, rec.width)
        elif inst.bbox is not None:
            x, y, w, h = inst.bbox
            mask[int(round(y)) : int(round(y + h)), int(round(x)) : int(round(x + w))] = True
    return mask


# ---------------------------------------------------------------------------
# validation


def validate(store: AnnotationStore) -> list[str]:
    """Return invariant violations as human-readable strings; empty iff valid."""
    violations: list[str] = []
    image_ids = [rec.id for rec in store.images]
    if len(set(image_ids)) != len(image_ids):
        violations.append("duplicate image ids")
    image_index = {rec.id: rec for rec in store.images}
    category_ids = {cat.id for cat in store.categories}
    if len(category_ids) != len(store.categories):
        violations.append("duplicate category ids")

    seen_instance_ids: set[int] = set()
    for inst in store.instances:
        if inst.id in seen_instance_ids:
            violations.append(f"duplicate instance id {inst.id}")
        seen_instance_ids.add(inst.id)
        if inst.image_id not in image_index:
            violations.append(f"instance {inst.id} references unknown image {inst.image_id}")
            continue
        if inst.category_id not in category_ids:
            violations.append(
                f"instance {inst.id} references unknown category {inst.category_id}"
            )
        rec = image_index[inst.image_id]
        if inst.bbox is None:
            if not inst.has_mask:
                violations.append(f"instance {inst.id} has neither bbox nor mask")
            continue
        x, y, w, h = inst.bbox
        if w <= 0 or h <= 0:
            violations.append(f"instance {inst.id} has degenerate bbox size ({w}, {h})")
        elif x < 0 or y < 0 or x + w > rec.width or y + h > rec.height:
            violations.append(
                f"instance {inst.id} bbox {inst.bbox} exceeds image bounds "
                f"({rec.width}x{rec.height})"
            )

    if store.splits:
        for image_id, split in store.splits.items():
            if image_id not in image_index:
                violations.append(f"split entry for unknown image {image_id}")
            if split not in SPLIT_NAMES:
                violations.append(f"image {image_id} has unknown split {split!r}")
        missing = [rec.id for rec in store.images if rec.id not in store.splits]
        if missing:
            violations.append(f"images missing split assignment: {missing}")
    return violations


def _validate_or_raise(store: AnnotationStore) -> AnnotationStore:
    violations = validate(store)
    if violations:
        raise AnnotationError("; ".join(violations))
    return store


# ---------------------------------------------------------------------------
# loading


def load_source(path: str | Path) -> AnnotationStore:
    """Load a recognized annotation layout and return a validated store.

    Recognized layouts:
      * a COCO-JSON file, or a directory containing exactly one ``*.json``;
      * a mask-raster directory: ``categories.txt`` (one name per line) plus
        ``masks/<stem>.png`` binary rasters, one image per raster, each
        8-connected foreground component becoming one bbox-pending instance.
    """
    path = Path(path)
    if path.is_file():
        return load_coco(path)
    if not path.is_dir():
        raise AnnotationError(f"annotation source {path} does not exist")
    json_files = sorted(path.glob("*.json"))
    if json_files:
        if len(json_files) > 1:
            raise AnnotationError(
                f"ambiguous source: multiple JSON files in {path}: "
                f"{[p.name for p in json_files]}"
            )
        return load_coco(json_files[0])
    if (path / "categories.txt").exists() and (path / "masks").is_dir():
        return _load_mask_layout(path)
    raise AnnotationError(f"no recognized annotation layout under {path}")


def load_coco(path: str | Path) -> AnnotationStore:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise AnnotationError(f"unreadable annotation file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise AnnotationError(f"{path}: top-level JSON must be an object")

    images = [
        ImageRecord(
            id=int(rec["id"]),
            file_name=str(rec["file_name"]),
            width=int(rec["width"]),
            height=int(rec["height"]),
        )
        for rec in data.get("images", [])
    ]
    categories = [
        Category(id=int(cat["id"]), name=str(cat["name"]))
        for cat in data.get("categories", [])
    ]
    instances = []
    for ann in data.get("annotations", []):
        bbox = ann.get("bbox")
        polygons = None
        rle = None
        rle_size = None
        seg = ann.get("segmentation")
        if isinstance(seg, list) and seg:
            polygons = tuple(tuple(float(v) for v in poly) for poly in seg)
        elif isinstance(seg, dict):
            rle = tuple(int(c) for c in seg["counts"])
            rle_size = (int(seg["size"][0]), int(seg["size"][1]))
        instances.append(
            Instance(
                id=int(ann["id"]),
                image_id=int(ann["image_id"]),
                category_id=int(ann["category_id"]),
                bbox=tuple(float(v) for v in bbox) if bbox is not None else None,
                polygons=polygons,
                rle=rle,
                rle_size=rle_size,
            )
        )
    splits = {int(k): str(v) for k, v in data.get("splits", {}).items()}
    store = AnnotationStore(
        images=images, categories=categories, instances=instances, splits=splits
    )
    return _validate_or_raise(store)


def _load_mask_layout(path: Path) -> AnnotationStore:
    names = [
        line.strip()
        for line in (path / "categories.txt").read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    if not names:
        raise AnnotationError(f"{path}/categories.txt lists no categories")
    categories = [Category(id=i + 1, name=name) for i, name in enumerate(names)]

    images: list[ImageRecord] = []
    instances: list[Instance] = []
    next_instance_id = 1
    mask_files = sorted((path / "masks").glob("*.png"))
    if not mask_files:
        raise AnnotationError(f"no mask rasters under {path}/masks")
    for image_id, mask_path in enumerate(mask_files, start=1):
        mask = np.asarray(Image.open(mask_path).convert("L")) > 0
        height, width = mask.shape
        images.append(
            ImageRecord(
                id=image_id,
                file_name=f"images/{mask_path.stem}.png",
                width=width,
                height=height,
            )
        )
        labels, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
        for component in range(1, count + 1):
            component_mask = labels == component
            instances.append(
                Instance(
                    id=next_instance_id,
                    image_id=image_id,
                    category_id=1,
                    bbox=None,
                    rle=rle_encode(component_mask),
                    rle_size=(height, width),
                )
            )
            next_instance_id += 1
    store = AnnotationStore(images=images, categories=categories, instances=instances)
    return _validate_or_raise(store)


# ---------------------------------------------------------------------------
# bbox derivation


def mask_extent(mask: np.ndarray) -> tuple[float, float, float, float]:
    """Tight (x, y, w, h) box around foreground pixels; raises if empty."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise AnnotationError("mask has no foreground pixels")
    y0, y1 = int(rows[0]), int(rows[-1])
    x0, x1 = int(cols[0]), int(cols[-1])
    return (float(x0), float(y0), float(x1 - x0 + 1), float(y1 - y0 + 1))


def derive_bboxes(store: AnnotationStore) -> AnnotationStore:
    """Fill missing bboxes from mask extents; existing bboxes stay untouched."""
    image_index = {rec.id: rec for rec in store.images}
    derived: list[Instance] = []
    for inst in store.instances:
        if inst.bbox is not None:
            derived.append(inst)
            continue
        rec = image_index[inst.image_id]
        mask = instance_mask(inst, rec.height, rec.width)
        try:
            bbox = mask_extent(mask)
        except AnnotationError as exc:
            raise AnnotationError(f"instance {inst.id}: {exc}") from exc
        derived.append(replace(inst, bbox=bbox))
    return AnnotationStore(
        images=list(store.images),
        categories=list(store.categories),
        instances=derived,
        splits=dict(store.splits),
    )


# ---------------------------------------------------------------------------
# splitting


def split_sizes(n: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    """Deterministic split sizes: floor for test and val, remainder to train."""
    n_test = math.floor(ratios[2] * n)
    n_val = math.floor(ratios[1] * n)
    return (n - n_val - n_test, n_val, n_test)


def split_dataset(store: AnnotationStore, policy: SplitPolicy) -> AnnotationStore:
    """Assign every image to exactly one of train/val/test per the policy."""
    if policy.mode == "predefined":
        assignments = policy.assignments or {}
        missing = [rec.id for rec in store.images if rec.id not in assignments]
        if missing:
            raise AnnotationError(f"predefined split misses images: {missing}")
        bad = {k: v for k, v in assignments.items() if v not in SPLIT_NAMES}
        if bad:
            raise AnnotationError(f"predefined split has unknown names: {bad}")
        splits = {rec.id: assignments[rec.id] for rec in store.images}
    elif policy.mode == "random":
        if not all(0.0 < r < 1.0 for r in policy.ratios):
            raise AnnotationError(f"split fractions must lie in (0, 1): {policy.ratios}")
        if abs(sum(policy.ratios) - 1.0) > 1e-9:
            raise AnnotationError(f"split fractions must sum to 1: {policy.ratios}")
        ids = sorted(rec.id for rec in store.images)
        random.Random(policy.seed).shuffle(ids)
        n_train, n_val, _ = split_sizes(len(ids), policy.ratios)
        splits = {}
        for pos, image_id in enumerate(ids):
            if pos < n_train:
                splits[image_id] = "train"
            elif pos < n_train + n_val:
                splits[image_id] = "val"
            else:
                splits[image_id] = "test"
    else:
        raise AnnotationError(f"unknown split mode {policy.mode!r}")
    return AnnotationStore(
        images=list(store.images),
        categories=list(store.categories),
        instances=list(store.instances),
        splits=splits,
    )


# ---------------------------------------------------------------------------
# writing


def write_coco(store: AnnotationStore, path: str | Path) -> Path:
    """Serialize the store as one COCO-JSON file with a top-level splits map."""
    path = Path(path)
    annotations = []
    for inst in store.instances:
        ann: dict = {
            "id": inst.id,
            "image_id": inst.image_id,
            "category_id": inst.category_id,
            "iscrowd": 0,
        }
        ann["bbox"] = list(inst.bbox) if inst.bbox is not None else None
        if inst.bbox is not None:
            ann["area"] = inst.bbox[2] * inst.bbox[3]
        if inst.polygons is not None:
            ann["segmentation"] = [list(poly) for poly in inst.polygons]
        elif inst.rle is not None:
            ann["segmentation"] = {
                "size": list(inst.rle_size),
                "counts": list(inst.rle),
            }
        annotations.append(ann)
    payload = {
        "images": [
            {
                "id": rec.id,
                "file_name": rec.file_name,
                "width": rec.width,
                "height": rec.height,
            }
            for rec in store.images
        ],
        "categories": [{"id": cat.id, "name": cat.name} for cat in store.categories],
        "annotations": annotations,
        "splits": {str(k): v for k, v in store.splits.items()},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    except OSError as exc:
        raise AnnotationError(f"cannot write {path}: {exc}") from exc
    return path
