"""Grad-CAM on the tapped mid-layer feature and detection overlays."""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib import colormaps
from PIL import Image, ImageDraw, ImageFont

from .dataset import CLASSES, Annotation
from .detector import Detection, Detector, TappedForward

logger = logging.getLogger(__name__)

Target = str | int | Callable[[TappedForward], torch.Tensor]

GT_COLOR = (40, 220, 40)
DET_COLOR = (230, 40, 40)


@dataclass
class Heatmap:
    values: np.ndarray  # HxW in [0, 1]
    image_id: int | None
    target: str


def _target_scalar(tapped: TappedForward, target: Target) -> torch.Tensor:
    if callable(target):
        return target(tapped)
    head = tapped.head
    obj = torch.sigmoid(head[:, 0])
    if target == "objectness":
        return obj.sum()
    if isinstance(target, int):
        return (obj * torch.softmax(head[:, 1:-4], dim=1)[:, target]).sum()
    raise ValueError(f"unknown Grad-CAM target {target!r}")


def normalize(cam: np.ndarray) -> np.ndarray:
    lo, hi = float(cam.min()), float(cam.max())
    if hi - lo <= 0:
        return np.zeros_like(cam)
    return (cam - lo) / (hi - lo)


def grad_cam(detector: Detector, image: torch.Tensor, target: Target = "objectness",
             image_id: int | None = None) -> Heatmap:
    """Grad-CAM of ``target`` with respect to the detector's mid-layer tap.

    Channel weights are the spatially averaged gradients; the rectified
    weighted sum is upsampled bilinearly to the image size and min-max
    normalized. The default target is the summed objectness over all cells;
    an ``int`` selects the class-conditional score.
    """
    pixels = image if image.ndim == 4 else image.unsqueeze(0)
    pixels = pixels.detach()
    with torch.enable_grad():
        tapped = detector.forward_train(pixels, [Annotation(image_id or 0)])
        mid = tapped.mid_feature
        score = _target_scalar(tapped, target)
        grad = None
        if score.requires_grad:
            (grad,) = torch.autograd.grad(score, mid, allow_unused=True)
    desc = target if isinstance(target, str) else (f"class:{target}" if isinstance(target, int) else "custom")
    h, w = pixels.shape[-2:]
    if grad is None or not torch.any(grad != 0):
        logger.warning("grad_cam: target has zero gradient at the tap; returning an empty heatmap")
        return Heatmap(np.zeros((h, w)), image_id, desc)
    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * mid).sum(dim=1, keepdim=True)).detach()
    cam = F.interpolate(cam.double(), size=(h, w), mode="bilinear", align_corners=False)[0, 0]
    return Heatmap(normalize(cam.numpy()), image_id, desc)


def heatmap_mass_inside(heatmap: Heatmap, box: Sequence[float]) -> float:
    """Fraction of total heatmap mass falling inside ``box``."""
    v = heatmap.values
    total = v.sum()
    if total <= 0:
        return 0.0
    x0, y0, x1, y1 = (int(round(c)) for c in box)
    return float(v[y0:y1, x0:x1].sum() / total)


def _to_uint8(image) -> np.ndarray:
    if isinstance(image, torch.Tensor):
        arr = image.detach().cpu()
        if arr.ndim == 4:
            arr = arr[0]
        arr = (arr.clamp(0, 1).permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)
        return arr
    return np.asarray(image, dtype=np.uint8)


def render_overlay(image, detections: Sequence[Detection] = (), annotation: Annotation | None = None,
                   heatmap: Heatmap | None = None, scale: int = 4, heat_alpha: float = 0.45) -> Image.Image:
    """Ground truth as green boxes, detections as red boxes with class/confidence."""
    base = _to_uint8(image).astype(np.float64)
    if heatmap is not None:
        colored = colormaps["jet"](heatmap.values)[..., :3] * 255.0
        base = (1 - heat_alpha) * base + heat_alpha * colored
    img = Image.fromarray(base.round().astype(np.uint8), mode="RGB")
    img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    draw = ImageDraw.Draw(img)
    font = ImageFont.load_default()
    if annotation is not None:
        for box in annotation.boxes:
            draw.rectangle([c * scale for c in box], outline=GT_COLOR, width=2)
    for det in detections:
        box = [c * scale for c in det.box]
        draw.rectangle(box, outline=DET_COLOR, width=2)
        name = CLASSES[det.class_id] if det.class_id < len(CLASSES) else str(det.class_id)
        draw.text((box[0] + 2, box[1] + 1), f"{name} {det.confidence:.2f}", fill=DET_COLOR, font=font)
    return img


def make_grid(panels: Sequence[Image.Image], titles: Sequence[str] | None = None, pad: int = 4) -> Image.Image:
    """Place panels side by side with an optional title strip."""
    strip = 14 if titles else 0
    width = sum(p.width for p in panels) + pad * (len(panels) + 1)
    height = max(p.height for p in panels) + strip + 2 * pad
    grid = Image.new("RGB", (width, height), (255, 255, 255))
    draw = ImageDraw.Draw(grid)
    font = ImageFont.load_default()
    x = pad
    for i, p in enumerate(panels):
        if titles:
            draw.text((x, pad), titles[i], fill=(0, 0, 0), font=font)
        grid.paste(p, (x, pad + strip))
        x += p.width + pad
    return grid


def png_bytes(img: Image.Image) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def overlay_name(image_id: int, model_tag: str, attack_tag: str) -> str:
    return f"{image_id}_{model_tag}_{attack_tag}.png"


def save_png(img: Image.Image, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(png_bytes(img))
    return path
