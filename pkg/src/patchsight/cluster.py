"""Cluster detection from fruit-level evidence.

Two routes over the same predicted foreground:

  * Output B (baseline): one tight box per 8-connected foreground component.
  * Output A (verified): the same proposals filtered by fruit-level
    aggregation checks (member count, spatial compactness, connectivity) and
    shrunk to the extent of their member fruits.

Compactness is mean pairwise fruit-center distance divided by the proposal
diagonal; connectivity links fruit pairs closer than ``link_radius_factor``
times the mean member diameter and requires one connected component.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .coco import AnnotationStore
from .metrics import MetricReport, map_report

# one 16x16 patch; smaller components are treated as speckle
MIN_COMPONENT_AREA = 256

Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class Fruit:
    center: tuple[float, float]
    area: float
    diameter: float
    box: Box


@dataclass
class FruitEvidence:
    """Per-image fruit observations from a detector or mask components."""

    fruits: list[Fruit]
    source: str

    @classmethod
    def from_detections(cls, boxes: list[Box]) -> "FruitEvidence":
        fruits = []
        for x, y, w, h in boxes:
            fruits.append(
                Fruit(
                    center=(x + w / 2, y + h / 2),
                    area=w * h,
                    diameter=(w + h) / 2,
                    box=(x, y, w, h),
                )
            )
        return cls(fruits=fruits, source="detections")

    @classmethod
    def from_mask(cls, mask: np.ndarray, min_area: int = MIN_COMPONENT_AREA) -> "FruitEvidence":
        fruits = []
        for box, area, center in _components(mask, min_area):
            fruits.append(
                Fruit(
                    center=center,
                    area=float(area),
                    # diameter of the equal-area disk
                    diameter=float(math.sqrt(4.0 * area / math.pi)),
                    box=box,
                )
            )
        return cls(fruits=fruits, source="mask_components")


@dataclass(frozen=True)
class VerifyConfig:
    min_fruits: int = 2
    max_compactness: float = 0.6
    link_radius_factor: float = 2.0
    min_component_area: int = MIN_COMPONENT_AREA

    def __post_init__(self) -> None:
        if self.min_fruits < 2:
            raise ValueError(
                f"a cluster aggregates multiple fruits; min_fruits must be >= 2, "
                f"got {self.min_fruits}"
            )


@dataclass
class ClusterProposal:
    roi: Box
    members: list[int] = field(default_factory=list)
    compactness: float = 0.0
    connected: bool = True
    verdict: str = "accepted"

    @property
    def accepted(self) -> bool:
        return self.verdict == "accepted"


def _components(mask: np.ndarray, min_area: int):
    """Yield (tight box, area, centroid) per 8-connected component >= min_area."""
    mask = np.asarray(mask, dtype=bool)
    labels, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    for index in range(1, count + 1):
        component = labels == index
        area = int(component.sum())
        if area < min_area:
            continue
        rows = np.flatnonzero(component.any(axis=1))
        cols = np.flatnonzero(component.any(axis=0))
        box = (
            float(cols[0]),
            float(rows[0]),
            float(cols[-1] - cols[0] + 1),
            float(rows[-1] - rows[0] + 1),
        )
        ys, xs = np.nonzero(component)
        yield box, area, (float(xs.mean()), float(ys.mean()))


def region_to_boxes(mask: np.ndarray, min_area: int = MIN_COMPONENT_AREA) -> list[Box]:
    """Output B: one tight box per foreground component above the area floor."""
    return [box for box, _, _ in _components(mask, min_area)]


def _members_in_roi(roi: Box, fruits: list[Fruit]) -> list[int]:
    x, y, w, h = roi
    return [
        k
        for k, fruit in enumerate(fruits)
        if x <= fruit.center[0] <= x + w and y <= fruit.center[1] <= y + h
    ]


def _pairwise_distances(centers: list[tuple[float, float]]) -> list[float]:
    return [
        math.dist(centers[a], centers[b])
        for a in range(len(centers))
        for b in range(a + 1, len(centers))
    ]


def _is_connected(centers: list[tuple[float, float]], link_radius: float) -> bool:
    n = len(centers)
    if n <= 1:
        return True
    seen = {0}
    frontier = [0]
    while frontier:
        node = frontier.pop()
        for other in range(n):
            if other not in seen and math.dist(centers[node], centers[other]) <= link_radius:
                seen.add(other)
                frontier.append(other)
    return len(seen) == n


def verify(roi: Box, evidence: FruitEvidence, cfg: VerifyConfig) -> ClusterProposal:
    """Check a proposal against the cluster definition.

    Predicates in order of rejection precedence: enough member fruits,
    member connectivity, spatial compactness.
    """
    members = _members_in_roi(roi, evidence.fruits)
    centers = [evidence.fruits[k].center for k in members]

    diagonal = math.hypot(roi[2], roi[3])
    distances = _pairwise_distances(centers)
    compactness = (sum(distances) / len(distances)) / diagonal if distances else 0.0

    if members:
        mean_diameter = sum(evidence.fruits[k].diameter for k in members) / len(members)
        connected = _is_connected(centers, cfg.link_radius_factor * mean_diameter)
    else:
        connected = True

    if len(members) < cfg.min_fruits:
        verdict = f"rejected:insufficient members ({len(members)} < {cfg.min_fruits})"
    elif not connected:
        verdict = "rejected:disconnected"
    elif compactness > cfg.max_compactness:
        verdict = f"rejected:not compact ({compactness:.3f} > {cfg.max_compactness})"
    else:
        verdict = "accepted"
    return ClusterProposal(
        roi=roi, members=members, compactness=compactness, connected=connected,
        verdict=verdict,
    )


def _union_box(boxes: list[Box]) -> Box:
    x1 = min(b[0] for b in boxes)
    y1 = min(b[1] for b in boxes)
    x2 = max(b[0] + b[2] for b in boxes)
    y2 = max(b[1] + b[3] for b in boxes)
    return (x1, y1, x2 - x1, y2 - y1)


def pipeline_a(
    mask: np.ndarray, evidence: FruitEvidence, cfg: VerifyConfig
) -> tuple[list[Box], list[ClusterProposal]]:
    """Output A: verified proposals, each shrunk to its member fruits' extent."""
    proposals = [
        verify(roi, evidence, cfg)
        for roi in region_to_boxes(mask, cfg.min_component_area)
    ]
    accepted = [
        _union_box([evidence.fruits[k].box for k in proposal.members])
        for proposal in proposals
        if proposal.accepted
    ]
    return accepted, proposals


def pipeline_b(mask: np.ndarray, cfg: VerifyConfig = VerifyConfig()) -> list[Box]:
    """Output B: direct region-to-box fitting, no verification."""
    return region_to_boxes(mask, cfg.min_component_area)


def boxes_to_results(
    boxes_by_image: dict[int, list[Box]], category_id: int, score: float = 1.0
) -> list[dict]:
    """Wrap geometric boxes as COCO-results records for the metrics module."""
    results = []
    for image_id in sorted(boxes_by_image):
        for box in boxes_by_image[image_id]:
            results.append(
                {
                    "image_id": image_id,
                    "category_id": category_id,
                    "bbox": list(box),
                    "score": score,
                }
            )
    return results


def compare_ab(
    outputs_a: dict[int, list[Box]],
    outputs_b: dict[int, list[Box]],
    gt: AnnotationStore,
    split: str = "all",
    model: str = "cluster",
) -> dict[str, MetricReport]:
    """Score both routes against cluster ground truth with the shared metrics."""
    category_id = sorted(cat.id for cat in gt.categories)[0]
    reports = {}
    for name, outputs in (("verified", outputs_a), ("baseline", outputs_b)):
        metrics = map_report(
            boxes_to_results(outputs, category_id), gt, split=split
        )
        reports[name] = MetricReport(
            dataset="clusters", model=f"{model}/{name}", task="det", metrics=metrics
        )
    return reports
