"""Synthetic shapes detection data and COCO-JSON loading.

Images are kept as ``uint8`` HxWx3 arrays in memory and converted to
``[0, 1]`` float tensors only when batched, so a dataset written to disk and
read back is bit-identical to the one that was generated.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

logger = logging.getLogger(__name__)

CLASSES = ("circle", "square", "triangle")

Box = tuple[float, float, float, float]


class DatasetError(ValueError):
    """Raised for malformed annotation files or invalid dataset specs."""


@dataclass
class Annotation:
    image_id: int
    boxes: list[Box] = field(default_factory=list)
    class_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.boxes) != len(self.class_ids):
            raise DatasetError(
                f"image {self.image_id}: {len(self.boxes)} boxes but {len(self.class_ids)} class ids"
            )
        for box in self.boxes:
            if not (box[0] < box[2] and box[1] < box[3]):
                raise DatasetError(f"image {self.image_id}: degenerate box {box}")

    def check_bounds(self, width: int, height: int) -> None:
        for x0, y0, x1, y1 in self.boxes:
            if x0 < 0 or y0 < 0 or x1 > width or y1 > height:
                raise DatasetError(
                    f"image {self.image_id}: box {(x0, y0, x1, y1)} outside {width}x{height}"
                )

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass
class Record:
    image_id: int
    file_name: str
    image: np.ndarray  # HxWx3 uint8
    annotation: Annotation

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass
class ImageBatch:
    pixels: torch.Tensor  # NxCxHxW in [0, 1]
    annotations: list[Annotation]

    def __post_init__(self):
        if self.pixels.ndim != 4 or self.pixels.shape[0] < 1:
            raise ValueError(f"expected a non-empty NxCxHxW tensor, got shape {tuple(self.pixels.shape)}")
        if self.pixels.shape[0] != len(self.annotations):
            raise ValueError("pixels and annotations disagree on batch size")

    def __len__(self) -> int:
        return self.pixels.shape[0]

    def with_pixels(self, pixels: torch.Tensor) -> "ImageBatch":
        return ImageBatch(pixels, self.annotations)


@dataclass
class ShapesDatasetSpec:
    num_images: int = 256
    image_size: int = 64
    shapes_per_image: tuple[int, int] = (1, 3)
    min_size: int = 12
    max_size: int = 28
    noise_std: float = 0.08
    background: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.shapes_per_image = tuple(self.shapes_per_image)

    def validate(self) -> None:
        problems = []
        if self.num_images < 1:
            problems.append("num_images must be >= 1")
        if self.image_size < 8:
            problems.append("image_size must be >= 8")
        lo, hi = self.shapes_per_image
        if lo < 0 or hi < lo:
            problems.append(f"shapes_per_image {self.shapes_per_image} is not a valid range")
        if self.min_size < 3 or self.max_size < self.min_size:
            problems.append(f"shape sizes ({self.min_size}, {self.max_size}) are not a valid range")
        if self.max_size > self.image_size:
            problems.append(f"max_size {self.max_size} larger than image_size {self.image_size}")
        if not 0.0 <= self.background <= 1.0 or self.noise_std < 0:
            problems.append("background must lie in [0, 1] and noise_std must be >= 0")
        if problems:
            raise DatasetError("; ".join(problems))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shapes_per_image"] = list(self.shapes_per_image)
        return d


# -- rasterization -----------------------------------------------------------
# Shapes live on the integer pixel grid; boxes use pixel-edge coordinates,
# so a shape covering columns a..b (inclusive) has xmin=a, xmax=b+1.


def shape_mask(kind: str, x0: int, y0: int, size: int, height: int, width: int) -> np.ndarray:
    """Boolean mask of a shape whose bounding square starts at (x0, y0)."""
    rows, cols = np.mgrid[0:height, 0:width]
    half = (size - 1) // 2
    if kind == "square":
        return (cols >= x0) & (cols < x0 + size) & (rows >= y0) & (rows < y0 + size)
    if kind == "circle":
        cx, cy = x0 + half, y0 + half
        return (cols - cx) ** 2 + (rows - cy) ** 2 <= half * half
    if kind == "triangle":
        cx, height_px = x0 + half, 2 * half + 1
        dy = rows - y0
        inside_rows = (dy >= 0) & (dy < height_px)
        return inside_rows & (np.abs(cols - cx) * (height_px - 1) <= half * dy)
    raise ValueError(f"unknown shape kind {kind!r}")


def shape_box(kind: str, x0: int, y0: int, size: int) -> Box:
    """Tight box of the rasterized shape, derived from geometry alone."""
    if kind == "square":
        return (x0, y0, x0 + size, y0 + size)
    extent = 2 * ((size - 1) // 2) + 1
    return (x0, y0, x0 + extent, y0 + extent)


def _overlaps(box: Box, others: Sequence[Box], margin: int) -> bool:
    for o in others:
        if box[0] < o[2] + margin and o[0] < box[2] + margin and box[1] < o[3] + margin and o[1] < box[3] + margin:
            return True
    return False


def _shape_color(rng: np.random.Generator) -> np.ndarray:
    # each channel either dark or bright so shapes stand off the gray background
    bright = rng.random(3) < 0.5
    level = rng.uniform(0.0, 0.25, size=3)
    color = np.where(bright, 1.0 - level, level)
    if np.all(np.abs(color - 0.5) < 0.3):
        color[0] = 1.0
    return color


def render_image(spec: ShapesDatasetSpec, rng: np.random.Generator) -> tuple[np.ndarray, list[Box], list[int], list[tuple]]:
    n = spec.image_size
    canvas = spec.background + spec.noise_std * rng.standard_normal((n, n, 3))
    lo, hi = spec.shapes_per_image
    count = int(rng.integers(lo, hi + 1))
    boxes: list[Box] = []
    class_ids: list[int] = []
    params: list[tuple] = []
    for _ in range(count):
        for _attempt in range(100):
            cls = int(rng.integers(len(CLASSES)))
            size = int(rng.integers(spec.min_size, spec.max_size + 1))
            x0 = int(rng.integers(0, n - size + 1))
            y0 = int(rng.integers(0, n - size + 1))
            box = shape_box(CLASSES[cls], x0, y0, size)
            if not _overlaps(box, boxes, margin=2):
                break
        else:
            continue
        color = _shape_color(rng)
        mask = shape_mask(CLASSES[cls], x0, y0, size, n, n)
        canvas[mask] = color
        boxes.append(box)
        class_ids.append(cls)
        params.append((CLASSES[cls], x0, y0, size))
    image = np.round(np.clip(canvas, 0.0, 1.0) * 255.0).astype(np.uint8)
    return image, boxes, class_ids, params


def generate_shapes(spec: ShapesDatasetSpec, out_dir: str | Path | None = None) -> list[Record]:
    """Generate the synthetic shapes dataset, optionally persisting it.

    When ``out_dir`` is given, images go to ``out_dir/images/*.png`` and the
    annotations to ``out_dir/annotations.json`` (COCO format).
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    records = []
    for image_id in range(spec.num_images):
        image, boxes, class_ids, _ = render_image(spec, rng)
        ann = Annotation(image_id, boxes, class_ids)
        ann.check_bounds(spec.image_size, spec.image_size)
        records.append(Record(image_id, f"{image_id:05d}.png", image, ann))
    if out_dir is not None:
        write_dataset(records, out_dir)
    return records


def to_coco(records: Sequence[Record]) -> dict:
    images, annotations = [], []
    for rec in records:
        images.append({"id": rec.image_id, "file_name": rec.file_name, "width": rec.width, "height": rec.height})
        for (x0, y0, x1, y1), cls in zip(rec.annotation.boxes, rec.annotation.class_ids):
            w, h = x1 - x0, y1 - y0
            annotations.append({
                "id": len(annotations) + 1,
                "image_id": rec.image_id,
                "category_id": cls + 1,
                "bbox": [x0, y0, w, h],
                "area": w * h,
                "iscrowd": 0,
            })
    categories = [{"id": i + 1, "name": name} for i, name in enumerate(CLASSES)]
    return {"images": images, "annotations": annotations, "categories": categories}


def write_dataset(records: Sequence[Record], out_dir: str | Path) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for rec in records:
        Image.fromarray(rec.image, mode="RGB").save(out / "images" / rec.file_name, format="PNG")
    path = out / "annotations.json"
    path.write_text(json.dumps(to_coco(records), indent=1, sort_keys=True))
    return path


def coco_to_xyxy(bbox: Sequence[float]) -> Box:
    x, y, w, h = bbox
    return (x, y, x + w, y + h)


def load_coco_json(path: str | Path, image_root: str | Path | None = None) -> list[Record]:
    """Load a COCO-format annotation file and its images.

    ``image_root`` defaults to an ``images/`` directory next to the JSON file.
    Category ids are remapped to contiguous 0-based class indices in
    ascending id order. Boxes with non-positive width or height are dropped
    with a warning.
    """
    path = Path(path)
    root = Path(image_root) if image_root is not None else path.parent / "images"
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: malformed JSON ({exc})") from exc
    if not isinstance(doc, dict) or not all(k in doc for k in ("images", "annotations", "categories")):
        raise DatasetError(f"{path}: expected 'images', 'annotations' and 'categories' arrays")

    cat_index = {c["id"]: i for i, c in enumerate(sorted(doc["categories"], key=lambda c: c["id"]))}
    per_image: dict[int, list[dict]] = {img["id"]: [] for img in doc["images"]}
    for ann in doc["annotations"]:
        if ann["image_id"] not in per_image:
            raise DatasetError(f"{path}: annotation {ann.get('id')} refers to unknown image {ann['image_id']}")
        per_image[ann["image_id"]].append(ann)

    records = []
    for img in doc["images"]:
        file = root / img["file_name"]
        if not file.exists():
            raise FileNotFoundError(f"image file {file} referenced by {path} is missing")
        with Image.open(file) as im:
            pixels = np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
        boxes, class_ids = [], []
        for ann in per_image[img["id"]]:
            x, y, w, h = ann["bbox"]
            if w <= 0 or h <= 0:
                logger.warning("dropping annotation %s of image %s: non-positive size %sx%s", ann.get("id"), img["id"], w, h)
                continue
            boxes.append(coco_to_xyxy(ann["bbox"]))
            class_ids.append(cat_index[ann["category_id"]])
        records.append(Record(img["id"], img["file_name"], pixels, Annotation(img["id"], boxes, class_ids)))
    return records


def to_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    arr = np.stack(images).astype(np.float32) / 255.0
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def epoch_order(n: int, shuffle_seed: int | None) -> list[int]:
    if shuffle_seed is None:
        return list(range(n))
    return np.random.default_rng(shuffle_seed).permutation(n).tolist()


def batch_iterator(dataset: Sequence[Record], batch_size: int, shuffle_seed: int | None = None) -> Iterator[ImageBatch]:
    """Yield every record exactly once, in batches; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(dataset) == 0:
        raise DatasetError("cannot iterate over an empty dataset")
    order = epoch_order(len(dataset), shuffle_seed)
    for start in range(0, len(order), batch_size):
        chunk = [dataset[i] for i in order[start:start + batch_size]]
        yield ImageBatch(to_tensor([r.image for r in chunk]), [r.annotation for r in chunk])
