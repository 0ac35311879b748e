"""Procedural flat-shape scenes with per-instance box annotations.

Scenes are rejection-sampled (shape, color, integer pixel box per instance),
rendered back-to-front with hard edges in exact palette colors, and written
as PNG + JSON pairs under images/NNNNN.png and annotations/NNNNN.json.  The
annotation schema is::

    {"global_caption": str,
     "image_info": {"height": int, "width": int},
     "instance_info": [{"bbox": [x1, y1, x2, y2],   # pixels, end-exclusive
                        "description": str,
                        "detail_description": str}, ...]}
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .batching import collate_layouts
from .config import DataConfig, ModelConfig
from .errors import AnnotationError, ConfigError, GenerationError
from .geometry import BBox
from .layout import Instance, Layout, TextContent
from .model import collate_prompts
from .vocab import BACKGROUNDS, COLORS, SHAPES, article, encode_prompt, tokenize

PLACEMENT_ATTEMPTS = 100

COLOR_U8 = {name: tuple(int(round(c * 255)) for c in rgb) for name, rgb in COLORS.items()}
BACKGROUND_U8 = {name: tuple(int(round(c * 255)) for c in rgb) for name, rgb in BACKGROUNDS.items()}


# -- scene specification -------------------------------------------------


@dataclass(frozen=True)
class ShapeInstance:
    shape: str  # circle | square | triangle
    color: str  # palette color name
    box: tuple[int, int, int, int]  # x1, y1, x2, y2 pixels, end-exclusive

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.color not in COLORS:
            raise ValueError(f"unknown color {self.color!r}")
        x1, y1, x2, y2 = self.box
        if not (x2 > x1 and y2 > y1 and x1 >= 0 and y1 >= 0):
            raise ValueError(f"bad box {self.box}")


@dataclass(frozen=True)
class SceneSpec:
    instances: tuple[ShapeInstance, ...]  # back-to-front draw order
    background: str
    image_size: int

    def __post_init__(self):
        if self.background not in BACKGROUNDS:
            raise ValueError(f"unknown background {self.background!r}")
        for inst in self.instances:
            if inst.box[2] > self.image_size or inst.box[3] > self.image_size:
                raise ValueError(f"box {inst.box} exceeds image size {self.image_size}")


def scene_caption(spec: SceneSpec) -> str:
    phrases = [f"{article(i.color)} {i.color} {i.shape}" for i in spec.instances]
    if len(phrases) == 1:
        listed = phrases[0]
    else:
        listed = ", ".join(phrases[:-1]) + " and " + phrases[-1]
    return f"{listed} on {article(spec.background)} {spec.background} background"


# -- rasterization --------------------------------------------------------


def shape_mask(shape: str, w: int, h: int) -> np.ndarray:
    """Boolean (h, w) coverage mask; a pixel is lit when its center falls
    inside the analytic figure inscribed in the box."""
    if w < 1 or h < 1:
        raise ValueError("mask dims must be >= 1")
    ys = np.arange(h)[:, None] + 0.5
    xs = np.arange(w)[None, :] + 0.5
    if shape == "square":
        return np.ones((h, w), dtype=bool)
    if shape == "circle":
        cx, cy = w / 2.0, h / 2.0
        return ((xs - cx) / (w / 2.0)) ** 2 + ((ys - cy) / (h / 2.0)) ** 2 <= 1.0
    if shape == "triangle":
        # apex-up isoceles: top row keeps >= 1 lit pixel, base row spans the box
        frac = np.arange(h)[:, None] / max(h - 1, 1)
        half = np.maximum(frac * w / 2.0, 0.5)
        return np.abs(xs - w / 2.0) <= half
    raise ValueError(f"unknown shape {shape!r}")


def render_scene(spec: SceneSpec) -> np.ndarray:
    """Exact-palette uint8 (H, W, 3) render, instances drawn in order."""
    size = spec.image_size
    canvas = np.empty((size, size, 3), dtype=np.uint8)
    canvas[:] = BACKGROUND_U8[spec.background]
    for inst in spec.instances:
        x1, y1, x2, y2 = inst.box
        mask = shape_mask(inst.shape, x2 - x1, y2 - y1)
        canvas[y1:y2, x1:x2][mask] = COLOR_U8[inst.color]
    return canvas


def image_to_float(image_u8: np.ndarray) -> torch.Tensor:
    """uint8 (H, W, 3) -> float32 (3, H, W) in [0, 1]."""
    return torch.from_numpy(np.ascontiguousarray(image_u8)).permute(2, 0, 1).float() / 255.0


def float_to_image(pixels: torch.Tensor) -> np.ndarray:
    """float (3, H, W) in [0, 1] -> uint8 (H, W, 3), round half away from zero."""
    arr = pixels.detach().clamp(0.0, 1.0).mul(255.0).round().to(torch.uint8)
    return arr.permute(1, 2, 0).numpy()


# -- rejection sampling ----------------------------------------------------


def _boxes_gap_ok(a, b, gap: int) -> bool:
    """True when boxes are separated by at least `gap` pixels."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    return ax2 + gap <= bx1 or bx2 + gap <= ax1 or ay2 + gap <= by1 or by2 + gap <= ay1


def _pixel_overlap(a, b) -> int:
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    return ix * iy


def _placement_ok(box, color, placed: list[ShapeInstance], cfg: DataConfig) -> bool:
    area = (box[2] - box[0]) * (box[3] - box[1])
    for other in placed:
        if cfg.min_gap > 0:
            if not _boxes_gap_ok(box, other.box, cfg.min_gap):
                return False
            continue
        inter = _pixel_overlap(box, other.box)
        if inter:
            other_area = (other.box[2] - other.box[0]) * (other.box[3] - other.box[1])
            union = area + other_area - inter
            if inter / union > cfg.iou_cap:
                return False
            if inter / min(area, other_area) > cfg.occlusion_cap:
                return False
        if color == other.color and not _boxes_gap_ok(box, other.box, cfg.same_color_gap):
            return False
    return True


_COLOR_NAMES = tuple(COLORS)
_BACKGROUND_NAMES = tuple(BACKGROUNDS)


def sample_scene_spec(rng: np.random.Generator, cfg: DataConfig) -> SceneSpec:
    cfg.validate()
    n = int(rng.integers(cfg.n_min, cfg.n_max + 1))
    placed: list[ShapeInstance] = []
    for _ in range(n):
        for _attempt in range(PLACEMENT_ATTEMPTS):
            w = int(rng.integers(cfg.min_side, cfg.max_side + 1))
            h = int(rng.integers(cfg.min_side, cfg.max_side + 1))
            x1 = int(rng.integers(0, cfg.image_size - w + 1))
            y1 = int(rng.integers(0, cfg.image_size - h + 1))
            shape = SHAPES[int(rng.integers(0, len(SHAPES)))]
            color = _COLOR_NAMES[int(rng.integers(0, len(_COLOR_NAMES)))]
            box = (x1, y1, x1 + w, y1 + h)
            if _placement_ok(box, color, placed, cfg):
                placed.append(ShapeInstance(shape, color, box))
                break
        else:
            raise GenerationError(
                f"could not place instance {len(placed) + 1}/{n} after "
                f"{PLACEMENT_ATTEMPTS} attempts"
            )
    background = _BACKGROUND_NAMES[int(rng.integers(0, len(_BACKGROUND_NAMES)))]
    return SceneSpec(tuple(placed), background, cfg.image_size)


# -- annotations ------------------------------------------------------------


@dataclass(frozen=True)
class ImageInfo:
    height: int
    width: int


@dataclass(frozen=True)
class InstanceInfo:
    bbox: tuple[int, int, int, int]  # x1, y1, x2, y2 pixels
    description: str
    detail_description: str


@dataclass(frozen=True)
class Annotation:
    global_caption: str
    image_info: ImageInfo
    instance_info: tuple[InstanceInfo, ...]

    def __post_init__(self):
        for info in self.instance_info:
            x1, y1, x2, y2 = info.bbox
            if not (0 <= x1 < x2 <= self.image_info.width and 0 <= y1 < y2 <= self.image_info.height):
                raise AnnotationError(f"bbox {list(info.bbox)} outside image bounds")


def spec_to_annotation(spec: SceneSpec) -> Annotation:
    infos = []
    for inst in spec.instances:
        desc = f"{inst.color} {inst.shape}"
        detail = (
            f"The {inst.color} {inst.shape} is solid {inst.color}, drawn with "
            f"hard edges on {article(spec.background)} {spec.background} background."
        )
        infos.append(InstanceInfo(inst.box, desc, detail))
    return Annotation(
        global_caption=scene_caption(spec),
        image_info=ImageInfo(height=spec.image_size, width=spec.image_size),
        instance_info=tuple(infos),
    )


def annotation_to_dict(ann: Annotation) -> dict:
    return {
        "global_caption": ann.global_caption,
        "image_info": {"height": ann.image_info.height, "width": ann.image_info.width},
        "instance_info": [
            {
                "bbox": list(info.bbox),
                "description": info.description,
                "detail_description": info.detail_description,
            }
            for info in ann.instance_info
        ],
    }


def _require(mapping: dict, key: str, context: str):
    if not isinstance(mapping, dict):
        raise AnnotationError(f"{context}: expected an object")
    if key not in mapping:
        raise AnnotationError(f"{context}: missing required field {key!r}")
    return mapping[key]


def annotation_from_dict(data: dict, context: str = "annotation") -> Annotation:
    caption = _require(data, "global_caption", context)
    info = _require(data, "image_info", context)
    height = _require(info, "height", f"{context}.image_info")
    width = _require(info, "width", f"{context}.image_info")
    raw_instances = _require(data, "instance_info", context)
    if not isinstance(raw_instances, list):
        raise AnnotationError(f"{context}.instance_info: expected a list")
    instances = []
    for i, entry in enumerate(raw_instances):
        where = f"{context}.instance_info[{i}]"
        bbox = _require(entry, "bbox", where)
        if not (isinstance(bbox, list) and len(bbox) == 4):
            raise AnnotationError(f"{where}.bbox: expected [x1, y1, x2, y2]")
        instances.append(
            InstanceInfo(
                bbox=tuple(int(v) for v in bbox),
                description=str(_require(entry, "description", where)),
                detail_description=str(_require(entry, "detail_description", where)),
            )
        )
    try:
        return Annotation(str(caption), ImageInfo(int(height), int(width)), tuple(instances))
    except (TypeError, ValueError) as exc:
        raise AnnotationError(f"{context}: {exc}") from exc


def write_annotation(ann: Annotation, path: str | Path):
    Path(path).write_text(json.dumps(annotation_to_dict(ann), indent=2) + "\n", encoding="utf-8")


def read_annotation(path: str | Path) -> Annotation:
    p = Path(path)
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise AnnotationError(f"annotation file not found: {p}") from None
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{p}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return annotation_from_dict(raw, context=str(p))


def annotation_to_layout(ann: Annotation, max_instances: int = 24) -> Layout:
    w, h = ann.image_info.width, ann.image_info.height
    instances = []
    for info in ann.instance_info:
        x1, y1, x2, y2 = info.bbox
        box = BBox(x1 / w, y1 / h, (x2 - x1) / w, (y2 - y1) / h)
        ids = tuple(tokenize(info.description))
        if not ids:
            raise AnnotationError(f"instance description {info.description!r} has no tokens")
        instances.append(Instance(TextContent(ids), box))
    return Layout(tuple(instances), max_instances=max_instances)


# -- scene + dataset assembly ----------------------------------------------


def generate_scene(seed: int, cfg: DataConfig) -> tuple[np.ndarray, Annotation, Layout]:
    """Deterministic scene from one seed: uint8 render, annotation, layout."""
    rng = np.random.Generator(np.random.PCG64(seed))
    spec = sample_scene_spec(rng, cfg)
    ann = spec_to_annotation(spec)
    return render_scene(spec), ann, annotation_to_layout(ann)


_MAX_CONSECUTIVE_FAILURES = 1000


def write_dataset(out_dir: str | Path, cfg: DataConfig) -> int:
    """Write cfg.num_images scenes; seeds advance past placement failures.

    Returns the number of images written.  A long unbroken run of placement
    failures means the config cannot be satisfied and raises instead of
    spinning forever.
    """
    cfg.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    written = 0
    seed = cfg.seed
    failures = 0
    while written < cfg.num_images:
        try:
            image, ann, _ = generate_scene(seed, cfg)
        except GenerationError:
            failures += 1
            if failures >= _MAX_CONSECUTIVE_FAILURES:
                raise GenerationError(
                    f"{failures} consecutive placement failures; the data config "
                    "cannot be satisfied"
                ) from None
            seed += 1
            continue
        failures = 0
        Image.fromarray(image).save(out / "images" / f"{written:05d}.png")
        write_annotation(ann, out / "annotations" / f"{written:05d}.json")
        written += 1
        seed += 1
    return written


def load_dataset(dataset_dir: str | Path) -> list[tuple[np.ndarray, Annotation]]:
    root = Path(dataset_dir)
    images_dir = root / "images"
    ann_dir = root / "annotations"
    if not images_dir.is_dir() or not ann_dir.is_dir():
        raise ConfigError(f"{root} is not a dataset directory (need images/ and annotations/)")
    pairs = []
    for png in sorted(images_dir.glob("*.png")):
        ann_path = ann_dir / f"{png.stem}.json"
        if not ann_path.is_file():
            raise AnnotationError(f"missing annotation for {png.name}")
        with Image.open(png) as im:
            image = np.array(im.convert("RGB"))
        pairs.append((image, read_annotation(ann_path)))
    if not pairs:
        raise ConfigError(f"dataset {root} contains no images")
    return pairs


def dataset_to_tensors(pairs: list[tuple[np.ndarray, Annotation]], model_cfg: ModelConfig):
    """Preload (image, annotation) pairs into a TensorizedScenes bundle."""
    from .diffusion import TensorizedScenes

    images = torch.stack([image_to_float(img) for img, _ in pairs])
    prompts = collate_prompts([encode_prompt(ann.global_caption) for _, ann in pairs])
    layouts = [annotation_to_layout(ann, model_cfg.max_instances) for _, ann in pairs]
    batch = collate_layouts(
        layouts,
        grid=model_cfg.grid,
        dense_k=model_cfg.effective_k,
        n_freqs=model_cfg.fourier_freqs,
        visual_patch=model_cfg.visual_patch,
    )
    return TensorizedScenes(images, prompts.ids, prompts.mask, batch)
