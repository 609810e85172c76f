"""Diagnostics: PCA feature maps, prediction overlays, metric tables."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image, ImageDraw

from .encoder import PatchFeatureMap
from .metrics import DET_COLUMNS, SEG_COLUMNS, MetricReport

GT_COLOR = (40, 200, 40)
PRED_COLOR = (230, 40, 40)
OVERLAP_COLOR = (240, 220, 40)


class VizError(ValueError):
    pass


class ZeroVarianceError(VizError):
    """All pooled patch vectors are identical; no principal directions exist."""


@dataclass
class PcaModel:
    """Top-3 principal directions of pooled patch features.

    ``components`` rows are orthonormal with the deterministic sign
    convention that each row's largest-magnitude coordinate is positive;
    ``variance_fractions`` are sorted non-increasing. A ``degenerate`` model
    (zero variance fallback) projects everything to mid-gray.
    """

    mean: np.ndarray
    components: np.ndarray
    variance_fractions: np.ndarray
    degenerate: bool = False


def _pool_vectors(maps: list[PatchFeatureMap]) -> np.ndarray:
    vectors = [m.data.reshape(m.data.shape[0], -1).T for m in maps]
    return np.concatenate(vectors, axis=0).astype(np.float64)


def fit_pca(maps: list[PatchFeatureMap], fallback: bool = False) -> PcaModel:
    """Principal-component decomposition of mean-centered pooled patch vectors.

    Raises ZeroVarianceError for constant features unless ``fallback`` is
    set, in which case a degenerate mid-gray model is returned.
    """
    pooled = _pool_vectors(maps)
    n, dim = pooled.shape
    if n < 4:
        raise VizError(f"need at least 4 patch vectors to fit, got {n}")
    if dim < 3:
        raise VizError(f"need at least 3 feature channels, got {dim}")
    mean = pooled.mean(axis=0)
    centered = pooled - mean
    total_variance = float((centered**2).sum())
    if total_variance <= 1e-12:
        if fallback:
            return PcaModel(
                mean=mean,
                components=np.zeros((3, dim)),
                variance_fractions=np.zeros(3),
                degenerate=True,
            )
        raise ZeroVarianceError(
            "all patch vectors identical; pass fallback=True for a uniform-gray model"
        )
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    fractions = (singular**2) / (singular**2).sum()
    components = vt[:3].copy()
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return PcaModel(
        mean=mean, components=components, variance_fractions=fractions[:3]
    )


def project_rgb(fmap: PatchFeatureMap, model: PcaModel) -> np.ndarray:
    """Project a feature map onto the top-3 directions as an (H_p, W_p, 3)
    image, each channel min-max normalized to [0, 1]; constant channels
    (and degenerate models) become 0.5."""
    c, hp, wp = fmap.data.shape
    if model.mean.shape[0] != c:
        raise VizError(f"model dim {model.mean.shape[0]} != feature dim {c}")
    if model.degenerate:
        return np.full((hp, wp, 3), 0.5)
    vectors = fmap.data.reshape(c, -1).T.astype(np.float64) - model.mean
    projected = vectors @ model.components.T
    image = projected.reshape(hp, wp, 3)
    out = np.empty_like(image)
    for ch in range(3):
        channel = image[:, :, ch]
        lo, hi = channel.min(), channel.max()
        out[:, :, ch] = 0.5 if hi - lo < 1e-12 else (channel - lo) / (hi - lo)
    return out


def upscale_grid(grid_rgb: np.ndarray, factor: int = 16) -> np.ndarray:
    """Nearest-neighbor upscale of a patch-grid RGB map for display."""
    return np.repeat(np.repeat(grid_rgb, factor, axis=0), factor, axis=1)


def save_rgb(image01: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raster = (np.clip(image01, 0.0, 1.0) * 255).round().astype(np.uint8)
    Image.fromarray(raster).save(path)
    return path


# ---------------------------------------------------------------------------
# overlays


def _draw_box(draw: ImageDraw.ImageDraw, box, color, width=2) -> None:
    x, y, w, h = box
    draw.rectangle([x, y, x + w, y + h], outline=color, width=width)


def _legend(draw: ImageDraw.ImageDraw, entries: list[tuple[str, tuple]]) -> None:
    x, y = 4, 4
    for label, color in entries:
        draw.rectangle([x, y, x + 10, y + 10], fill=color)
        draw.text((x + 14, y), label, fill=(255, 255, 255))
        y += 14


def render_box_overlay(
    image: np.ndarray, pred_boxes: list, gt_boxes: list
) -> np.ndarray:
    """Ground-truth boxes in green, predictions in red, legend embedded."""
    canvas = Image.fromarray(np.asarray(image, dtype=np.uint8)).convert("RGB")
    draw = ImageDraw.Draw(canvas)
    for box in gt_boxes:
        _draw_box(draw, box, GT_COLOR)
    for box in pred_boxes:
        _draw_box(draw, box, PRED_COLOR)
    _legend(draw, [("gt", GT_COLOR), ("pred", PRED_COLOR)])
    return np.asarray(canvas)


def render_mask_overlay(
    image: np.ndarray, pred_mask: np.ndarray, gt_mask: np.ndarray
) -> np.ndarray:
    """Tint gt-only green, prediction-only red, agreement yellow."""
    image = np.asarray(image, dtype=np.uint8)
    if pred_mask.shape != image.shape[:2] or gt_mask.shape != image.shape[:2]:
        raise VizError(
            f"mask size {pred_mask.shape}/{gt_mask.shape} does not match "
            f"image {image.shape[:2]}"
        )
    out = image.astype(np.float64)
    overlap = pred_mask & gt_mask
    regions = (
        (gt_mask & ~overlap, GT_COLOR),
        (pred_mask & ~overlap, PRED_COLOR),
        (overlap, OVERLAP_COLOR),
    )
    for region, color in regions:
        out[region] = 0.5 * out[region] + 0.5 * np.array(color)
    canvas = Image.fromarray(out.round().astype(np.uint8))
    _legend(
        ImageDraw.Draw(canvas),
        [("gt", GT_COLOR), ("pred", PRED_COLOR), ("both", OVERLAP_COLOR)],
    )
    return np.asarray(canvas)


# ---------------------------------------------------------------------------
# tables


def _columns_for(reports: list[MetricReport]) -> tuple[str, ...]:
    column_sets = {tuple(sorted(r.metrics)) for r in reports}
    if len(column_sets) > 1:
        raise VizError(f"reports mix column sets: {sorted(column_sets)}")
    present = column_sets.pop()
    for columns in (SEG_COLUMNS, DET_COLUMNS):
        if tuple(sorted(columns)) == present:
            return columns
    return tuple(sorted(present))


def emit_tables(
    reports: list[MetricReport], out_dir: str | Path, basename: str = "results"
) -> dict[str, Path]:
    """Write CSV and aligned-text tables; best value per column marked with *."""
    if not reports:
        raise VizError("no reports to tabulate")
    columns = _columns_for(reports)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    best = {col: max(r.metrics[col] for r in reports) for col in columns}

    csv_path = out_dir / f"{basename}.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["dataset", "model", *columns])
        for report in reports:
            writer.writerow(
                [report.dataset, report.model]
                + [f"{report.metrics[col]:.3f}" for col in columns]
            )

    name_width = max(
        [len("dataset/model")]
        + [len(f"{r.dataset}/{r.model}") for r in reports]
    )
    lines = [
        f"{'dataset/model':<{name_width}}  "
        + "  ".join(f"{col:>9}" for col in columns)
    ]
    for report in reports:
        cells = []
        for col in columns:
            value = report.metrics[col]
            mark = "*" if value == best[col] else " "
            cells.append(f"{value:8.3f}{mark}")
        lines.append(f"{report.dataset + '/' + report.model:<{name_width}}  " + "  ".join(cells))
    lines.append("(* best per column)")
    txt_path = out_dir / f"{basename}.txt"
    txt_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    fig_path = out_dir / f"{basename}.png"
    render_metric_figure(reports, columns, fig_path)
    return {"csv": csv_path, "txt": txt_path, "figure": fig_path}


def render_metric_figure(
    reports: list[MetricReport], columns: tuple[str, ...], path: str | Path
) -> Path:
    """Grouped bar chart of every report across the shared metric columns."""
    path = Path(path)
    labels = [f"{r.dataset}/{r.model}" for r in reports]
    x = np.arange(len(columns))
    width = 0.8 / max(len(reports), 1)
    fig, ax = plt.subplots(figsize=(1.8 + 1.4 * len(columns), 3.6))
    for k, report in enumerate(reports):
        values = [report.metrics[col] for col in columns]
        ax.bar(x + k * width, values, width, label=labels[k])
    ax.set_xticks(x + width * (len(reports) - 1) / 2)
    ax.set_xticklabels(columns)
    ax.set_ylabel("percent")
    ax.set_ylim(0, 105)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
