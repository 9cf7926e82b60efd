"""
evalkit.py - Normalization, rendering and scoring of explanation maps

Stand-ins for expert visual assessment: how much attribution falls on the
annotated lesion (localization) and how similar two methods' maps are
(agreement). Also confusion matrices and their rendering.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Literal, Optional, Sequence, Union

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage, stats

from attribution import ExplanationMap, reduce_channels
from errors import ParameterError, ShapeError, UndefinedMetricError

logger = logging.getLogger(__name__)

NormMode = Literal["abs_minmax", "signed_minmax"]
Colormap = Literal["grayscale", "red_blue"]

METRIC_HEADER = ("image", "method", "metric", "value")


def _interpolated_lut(anchors: Sequence[tuple[float, tuple[int, int, int]]]) -> np.ndarray:
    positions = np.linspace(0.0, 1.0, 256)
    xs = [a[0] for a in anchors]
    channels = [
        np.interp(positions, xs, [a[1][c] for a in anchors]) for c in range(3)
    ]
    return np.round(np.stack(channels, axis=1)).astype(np.uint8)


# Diverging blue-white-red; index 255 is the darkest red
RED_BLUE_LUT = _interpolated_lut(
    [
        (0.0, (5, 48, 97)),
        (0.25, (67, 147, 195)),
        (0.5, (247, 247, 247)),
        (0.75, (214, 96, 77)),
        (1.0, (103, 0, 31)),
    ]
)
GRAYSCALE_LUT = np.repeat(np.arange(256, dtype=np.uint8)[:, None], 3, axis=1)
COLORMAPS = {"grayscale": GRAYSCALE_LUT, "red_blue": RED_BLUE_LUT}


@dataclass(frozen=True, eq=False)
class AnnotationMask:
    grid: np.ndarray
    provenance: Literal["synthetic", "human"] = "synthetic"

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=bool)
        if grid.ndim != 2:
            raise ShapeError(f"Annotation mask must be [H,W], got {grid.shape}")
        object.__setattr__(self, "grid", grid)

    @property
    def area_fraction(self) -> float:
        return float(self.grid.mean())

    @property
    def is_empty(self) -> bool:
        return not self.grid.any()


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    counts: np.ndarray
    row_normalized: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        total = self.total
        return float(np.trace(self.counts)) / total if total else 0.0


# Normalization


def normalize_map(
    emap: Union[ExplanationMap, np.ndarray], mode: NormMode = "abs_minmax"
) -> np.ndarray:
    """Channel-reduce a raw map and min-max scale it into [0,1]

    abs_minmax reduces channels by sum of absolute values, signed_minmax by
    plain sum. A constant map normalizes to all zeros.
    """
    raw = emap.raw if isinstance(emap, ExplanationMap) else np.asarray(emap)
    if mode not in ("abs_minmax", "signed_minmax"):
        raise ParameterError(f"Unknown normalization mode '{mode}'")
    reduced = reduce_channels(raw, signed=mode == "signed_minmax").astype(np.float64)
    lo, hi = reduced.min(), reduced.max()
    if hi == lo:
        return np.zeros_like(reduced)
    return np.clip((reduced - lo) / (hi - lo), 0.0, 1.0)


# Rendering


def mask_boundary(mask: Union[AnnotationMask, np.ndarray]) -> np.ndarray:
    """Pixels of the mask that touch its outside (4-connectivity)"""
    grid = mask.grid if isinstance(mask, AnnotationMask) else np.asarray(mask, bool)
    inner = ndimage.binary_erosion(grid, border_value=0)
    return grid & ~inner


def render_heatmap(
    normalized: np.ndarray,
    colormap: Colormap = "red_blue",
    overlay: Optional[np.ndarray] = None,
    edge: Optional[Union[AnnotationMask, np.ndarray]] = None,
    alpha: float = 0.5,
) -> Image.Image:
    """Map a [0,1] heatmap to an 8-bit RGB image

    Args:
        normalized: [H,W] values in [0,1]
        colormap: "grayscale" or "red_blue"
        overlay: optional [3,H,W] image in [0,1] blended underneath
        edge: optional mask whose boundary is drawn in white
        alpha: heatmap weight when blending with the overlay
    """
    v = np.asarray(normalized, dtype=np.float64)
    if v.ndim != 2:
        raise ShapeError(f"Heatmap must be [H,W], got {v.shape}")
    if np.any(v < 0) or np.any(v > 1) or not np.all(np.isfinite(v)):
        raise ParameterError("Heatmap values must lie in [0,1]")
    lut = COLORMAPS[colormap]
    rgb = lut[np.round(v * 255).astype(np.intp)]

    if overlay is not None:
        base = np.asarray(overlay, dtype=np.float64).transpose(1, 2, 0) * 255.0
        if base.shape != rgb.shape:
            raise ShapeError(f"Overlay shape {base.shape} does not match {rgb.shape}")
        rgb = np.round(alpha * rgb + (1.0 - alpha) * base).astype(np.uint8)

    if edge is not None:
        rgb = rgb.copy()
        rgb[mask_boundary(edge)] = 255
    return Image.fromarray(rgb)


def image_to_uint8(image: np.ndarray) -> Image.Image:
    """[3,H,W] image in [0,1] -> RGB image"""
    arr = np.round(np.clip(image, 0, 1).transpose(1, 2, 0) * 255.0).astype(np.uint8)
    return Image.fromarray(arr)


def render_panel(
    tiles: Sequence[Image.Image], labels: Sequence[str], gap: int = 4, label_height: int = 14
) -> Image.Image:
    """Lay tiles out left to right with a caption above each"""
    width = sum(t.width for t in tiles) + gap * (len(tiles) - 1)
    height = max(t.height for t in tiles) + label_height
    panel = Image.new("RGB", (width, height), (255, 255, 255))
    draw = ImageDraw.Draw(panel)
    x = 0
    for tile, label in zip(tiles, labels):
        draw.text((x + 1, 1), label, fill=(0, 0, 0))
        panel.paste(tile, (x, label_height))
        x += tile.width + gap
    return panel


def save_png(image: Image.Image, path: Union[str, Path]) -> None:
    image.save(path, format="PNG")


# Confusion matrix


def confusion_matrix(
    labels: Sequence[int], predictions: Sequence[int], c: int
) -> ConfusionMatrix:
    """counts[i][j] = #samples with label i predicted as j; rows normalized to 1"""
    if len(labels) != len(predictions):
        raise ShapeError(
            f"{len(labels)} labels but {len(predictions)} predictions"
        )
    labels = np.asarray(labels, dtype=np.intp)
    predictions = np.asarray(predictions, dtype=np.intp)
    for name, ids in (("label", labels), ("prediction", predictions)):
        if ids.size and (ids.min() < 0 or ids.max() >= c):
            raise ParameterError(f"{name} id out of range for {c} classes")

    counts = np.zeros((c, c), dtype=np.int64)
    np.add.at(counts, (labels, predictions), 1)
    totals = counts.sum(axis=1, keepdims=True)
    row_normalized = np.divide(
        counts, totals, out=np.zeros((c, c), dtype=np.float64), where=totals > 0
    )
    return ConfusionMatrix(counts=counts, row_normalized=row_normalized)


def write_confusion_csv(
    cm: ConfusionMatrix, path: Union[str, Path], class_names: Sequence[str]
) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["true\\predicted", *class_names])
        for name, row in zip(class_names, cm.row_normalized):
            writer.writerow([name, *(f"{100 * v:.2f}" for v in row)])
        writer.writerow(["accuracy", f"{100 * cm.accuracy:.2f}"])


def render_confusion(
    cm: ConfusionMatrix, class_names: Sequence[str], cell: int = 56
) -> Image.Image:
    """Grid of row-normalized percentages (two decimals), darker = larger"""
    c = cm.counts.shape[0]
    margin = 80
    img = Image.new("RGB", (margin + c * cell, margin + c * cell), (255, 255, 255))
    draw = ImageDraw.Draw(img)
    for i, name in enumerate(class_names):
        draw.text((4, margin + i * cell + cell // 2 - 6), name[:12], fill=(0, 0, 0))
        draw.text((margin + i * cell + 2, margin - 14), name[:8], fill=(0, 0, 0))
    for i in range(c):
        for j in range(c):
            v = float(cm.row_normalized[i, j])
            shade = int(round(255 * (1 - v)))
            box = (
                margin + j * cell,
                margin + i * cell,
                margin + (j + 1) * cell - 1,
                margin + (i + 1) * cell - 1,
            )
            draw.rectangle(box, fill=(shade, shade, 255), outline=(160, 160, 160))
            text_fill = (255, 255, 255) if v > 0.5 else (0, 0, 0)
            draw.text((box[0] + 6, box[1] + cell // 2 - 6), f"{100 * v:.2f}", fill=text_fill)
    return img


# Localization and agreement


def topk_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Flat indices of the k largest values; ties go to the lowest index"""
    flat = np.asarray(values).ravel()
    if not 1 <= k <= flat.size:
        raise ParameterError(f"k must be in [1, {flat.size}], got {k}")
    return np.argsort(-flat, kind="stable")[:k]


def localization_score(
    normalized: np.ndarray,
    mask: AnnotationMask,
    variant: Literal["mass_in_mask", "topk_in_mask"] = "mass_in_mask",
    k: Optional[int] = None,
) -> float:
    """Fraction of attribution mass (or of the top-k pixels) inside the mask

    k defaults to the mask area.

    Raises:
        UndefinedMetricError: empty mask, or a zero-sum map for mass_in_mask
    """
    v = np.asarray(normalized, dtype=np.float64)
    grid = mask.grid
    if v.shape != grid.shape:
        raise ShapeError(f"Map shape {v.shape} does not match mask shape {grid.shape}")
    if mask.is_empty:
        raise UndefinedMetricError("Localization is undefined for an empty mask")

    if variant == "mass_in_mask":
        total = v.sum()
        if total <= 0:
            raise UndefinedMetricError("mass_in_mask needs a map with positive sum")
        return float(v[grid].sum() / total)
    if variant == "topk_in_mask":
        k = int(grid.sum()) if k is None else k
        top = topk_indices(v, k)
        return float(grid.ravel()[top].mean())
    raise ParameterError(f"Unknown localization variant '{variant}'")


def agreement(
    map_a: np.ndarray,
    map_b: np.ndarray,
    metric: Literal["spearman", "topk_iou"] = "spearman",
    k: Optional[int] = None,
) -> float:
    """Similarity of two normalized maps

    spearman: rank correlation over pixels with average ranks on ties.
    topk_iou: intersection over union of the two top-k pixel sets.
    """
    a = np.asarray(map_a, dtype=np.float64)
    b = np.asarray(map_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"Map shapes differ: {a.shape} vs {b.shape}")

    if metric == "spearman":
        if np.ptp(a) == 0 or np.ptp(b) == 0:
            raise UndefinedMetricError("Spearman correlation is undefined for a constant map")
        rank_a = stats.rankdata(a.ravel(), method="average")
        rank_b = stats.rankdata(b.ravel(), method="average")
        rho = np.corrcoef(rank_a, rank_b)[0, 1]
        return float(np.clip(rho, -1.0, 1.0))
    if metric == "topk_iou":
        if k is None:
            raise ParameterError("topk_iou needs k")
        top_a = set(topk_indices(a, k).tolist())
        top_b = set(topk_indices(b, k).tolist())
        return len(top_a & top_b) / len(top_a | top_b)
    raise ParameterError(f"Unknown agreement metric '{metric}'")


def write_metric_rows(
    path: Union[str, Path], rows: Iterable[tuple[str, str, str, float]]
) -> None:
    """Write (image, method, metric, value) rows as CSV"""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(METRIC_HEADER)
        for image, method, metric, value in rows:
            writer.writerow([image, method, metric, f"{value:.6f}"])
    logger.info("Wrote %s", path)
