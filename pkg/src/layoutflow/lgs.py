"""Miniature layout-grounding score over an analytic oracle detector.

The detector quantizes every pixel to the nearest reference color (the
8-color shape palette plus the 3 neutral backgrounds), runs 8-connected
components per palette color, keeps components of at least 4 pixels, and
classifies shape from how much of the component's tight box it fills.
Scoring matches detections to condition instances greedily by IoU under a
shape-label constraint, reports the global mean IoU over all condition
instances, and — for matches above IoU 0.5 — re-classifies the predicted
crop to measure color and shape accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .geometry import BBox, iou
from .vocab import BACKGROUNDS, COLORS, SHAPES

# Fill-ratio bands measured on the renderer across box sides 6..32:
# triangles reach at most 0.619, circles span [0.750, 0.889], squares are
# exactly 1.0.  Thresholds sit at the midpoints of the gaps.
CIRCLE_MIN_FILL = 0.6845
SQUARE_MIN_FILL = 0.9444
MIN_COMPONENT_AREA = 4
GATE_IOU = 0.5

_PALETTE_NAMES = tuple(COLORS)
_REFERENCE_NAMES = _PALETTE_NAMES + tuple(BACKGROUNDS)
_REFERENCE_RGB = np.array(
    [[int(round(c * 255)) for c in rgb] for rgb in list(COLORS.values()) + list(BACKGROUNDS.values())],
    dtype=np.int32,
)
_EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


def classify_fill(ratio: float) -> str:
    if ratio >= SQUARE_MIN_FILL:
        return "square"
    if ratio >= CIRCLE_MIN_FILL:
        return "circle"
    return "triangle"


def quantize(image_u8: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> (H, W) index into the reference color list."""
    if image_u8.ndim != 3 or image_u8.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {image_u8.shape}")
    px = image_u8.astype(np.int32)
    dist = ((px[:, :, None, :] - _REFERENCE_RGB[None, None, :, :]) ** 2).sum(axis=3)
    return dist.argmin(axis=2)


@dataclass(frozen=True)
class Detection:
    bbox: BBox  # normalized
    color: str
    shape: str
    pixel_box: tuple[int, int, int, int]  # x1, y1, x2, y2 end-exclusive
    area: int


@dataclass(frozen=True)
class Condition:
    bbox: BBox
    color: str | None
    shape: str | None


def oracle_detect(image_u8: np.ndarray) -> list[Detection]:
    h, w = image_u8.shape[:2]
    labels = quantize(image_u8)
    detections: list[Detection] = []
    for color_idx, color in enumerate(_PALETTE_NAMES):
        mask = labels == color_idx
        if not mask.any():
            continue
        comp, n_comp = ndimage.label(mask, structure=_EIGHT_CONNECTED)
        for comp_id, slc in enumerate(ndimage.find_objects(comp), start=1):
            if slc is None:
                continue
            # the slice may overlap other components; count only this one's pixels
            region = comp[slc] == comp_id
            area = int(region.sum())
            if area < MIN_COMPONENT_AREA:
                continue
            y1, y2 = slc[0].start, slc[0].stop
            x1, x2 = slc[1].start, slc[1].stop
            ratio = area / ((x2 - x1) * (y2 - y1))
            detections.append(
                Detection(
                    bbox=BBox(x1 / w, y1 / h, (x2 - x1) / w, (y2 - y1) / h),
                    color=color,
                    shape=classify_fill(ratio),
                    pixel_box=(x1, y1, x2, y2),
                    area=area,
                )
            )
    return detections


def description_labels(description: str) -> tuple[str | None, str | None]:
    """First palette color word and first shape word of a description."""
    words = description.lower().split()
    color = next((wd for wd in words if wd in COLORS), None)
    shape = next((wd for wd in words if wd in SHAPES), None)
    return color, shape


def match_and_score(
    detections: list[Detection], conditions: list[Condition]
) -> tuple[list[float], list[int | None]]:
    """Greedy one-to-one matching under shape-label equality.

    Candidate (condition, detection) pairs require equal shape labels; they
    are taken in descending IoU order.  Returns per-condition IoU (0 when
    unmatched) and the matched detection index per condition.
    """
    candidates = []
    for ci, cond in enumerate(conditions):
        if cond.shape is None:
            continue
        for di, det in enumerate(detections):
            if det.shape != cond.shape:
                continue
            value = iou(cond.bbox, det.bbox)
            if value > 0.0:
                candidates.append((value, ci, di))
    candidates.sort(key=lambda item: (-item[0], item[1], item[2]))
    ious = [0.0] * len(conditions)
    matched: list[int | None] = [None] * len(conditions)
    used_c: set[int] = set()
    used_d: set[int] = set()
    for value, ci, di in candidates:
        if ci in used_c or di in used_d:
            continue
        used_c.add(ci)
        used_d.add(di)
        ious[ci] = value
        matched[ci] = di
    return ious, matched


def classify_crop(image_u8: np.ndarray, pixel_box: tuple[int, int, int, int]) -> tuple[str | None, str | None]:
    """Dominant palette color of the crop and the shape of its mask."""
    x1, y1, x2, y2 = pixel_box
    crop = image_u8[y1:y2, x1:x2]
    if crop.size == 0:
        return None, None
    labels = quantize(crop)
    counts = [(labels == i).sum() for i in range(len(_PALETTE_NAMES))]
    if max(counts) == 0:
        return None, None
    color_idx = int(np.argmax(counts))
    mask = labels == color_idx
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    tight = mask[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]
    return _PALETTE_NAMES[color_idx], classify_fill(float(tight.mean()))


@dataclass
class LgsReport:
    miou: float
    color_acc: float
    shape_acc: float
    n_instances: int
    gated_count: int
    gate_empty: bool
    per_image: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "color_acc": self.color_acc,
            "shape_acc": self.shape_acc,
            "n_instances": self.n_instances,
            "gated_count": self.gated_count,
            "gate_empty": self.gate_empty,
            "per_image": self.per_image,
        }


def evaluate_images(records: list[tuple[np.ndarray, list[Condition]]]) -> LgsReport:
    """Score (image, conditions) pairs; the mean IoU runs over every
    condition instance globally, accuracies only over gated matches."""
    all_ious: list[float] = []
    color_checked = color_correct = 0
    shape_checked = shape_correct = 0
    gated_count = 0
    per_image = []
    for index, (image, conditions) in enumerate(records):
        detections = oracle_detect(image)
        ious, matched = match_and_score(detections, conditions)
        gated = []
        for cond, value, di in zip(conditions, ious, matched):
            if di is None or value <= GATE_IOU:
                continue
            gated_count += 1
            gated.append(di)
            crop_color, crop_shape = classify_crop(image, detections[di].pixel_box)
            if cond.color is not None:
                color_checked += 1
                color_correct += int(crop_color == cond.color)
            if cond.shape is not None:
                shape_checked += 1
                shape_correct += int(crop_shape == cond.shape)
        all_ious.extend(ious)
        per_image.append(
            {"index": index, "ious": [round(v, 6) for v in ious], "n_detections": len(detections)}
        )
    if not all_ious:
        raise ConfigError("evaluation saw no condition instances")
    gate_empty = gated_count == 0
    return LgsReport(
        miou=float(np.mean(all_ious)),
        color_acc=0.0 if color_checked == 0 else color_correct / color_checked,
        shape_acc=0.0 if shape_checked == 0 else shape_correct / shape_checked,
        n_instances=len(all_ious),
        gated_count=gated_count,
        gate_empty=gate_empty,
        per_image=per_image,
    )


def format_table(report: LgsReport) -> str:
    rows = [
        ("mIoU", f"{report.miou:.4f}"),
        ("color_acc", f"{report.color_acc:.4f}"),
        ("shape_acc", f"{report.shape_acc:.4f}"),
        ("instances", str(report.n_instances)),
        ("gated", str(report.gated_count)),
    ]
    if report.gate_empty:
        rows.append(("gate_empty", "true"))
    width = max(len(name) for name, _ in rows)
    return "\n".join(f"{name:<{width}}  {value}" for name, value in rows)
