"""Detector interface with a mid-layer feature tap, plus a toy one-stage detector.

Any detector used by the attack, alignment and training code only has to
implement :meth:`Detector.forward_train` (loss terms + tapped feature) and
:meth:`Detector.forward_infer` (decoded detections).
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import batched_nms

from .dataset import Annotation, ImageBatch


class DivergenceError(FloatingPointError):
    """A loss or gradient became non-finite."""


@dataclass
class DetectorConfig:
    num_classes: int = 3
    stride: int = 16
    backbone_channels: tuple[int, ...] = (16, 32, 48, 64, 64)
    mid_tap: int = -1
    norm_groups: int = 4
    in_channels: int = 3

    def __post_init__(self):
        self.backbone_channels = tuple(self.backbone_channels)

    @property
    def num_downsamples(self) -> int:
        return int(round(math.log2(self.stride)))

    @property
    def tap_index(self) -> int:
        return self.mid_tap % len(self.backbone_channels)

    def validate(self) -> None:
        problems = []
        if self.num_classes < 1:
            problems.append("num_classes must be >= 1")
        if self.stride < 1 or 2 ** self.num_downsamples != self.stride:
            problems.append(f"stride {self.stride} must be a power of two")
        elif self.num_downsamples > len(self.backbone_channels):
            problems.append(f"stride {self.stride} needs at least {self.num_downsamples} backbone blocks")
        if not -len(self.backbone_channels) <= self.mid_tap < len(self.backbone_channels):
            problems.append(f"mid_tap {self.mid_tap} does not name a backbone layer")
        for c in self.backbone_channels:
            if c % self.norm_groups:
                problems.append(f"backbone width {c} not divisible by norm_groups={self.norm_groups}")
        if problems:
            raise ValueError("; ".join(problems))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        return d


@dataclass
class Detection:
    box: tuple[float, float, float, float]
    class_id: int
    confidence: float


@dataclass
class TappedForward:
    total_loss: torch.Tensor | None
    loss_terms: dict[str, torch.Tensor]
    mid_feature: torch.Tensor
    head: torch.Tensor | None = None
    detections: list[list[Detection]] | None = field(default=None, repr=False)


class Detector(nn.Module):
    """Contract for detectors usable with the attack/alignment/training code."""

    config: DetectorConfig

    def forward_train(self, pixels: torch.Tensor, annotations: Sequence[Annotation]) -> TappedForward:
        raise NotImplementedError

    def forward_infer(self, pixels: torch.Tensor, conf_threshold: float, nms_iou: float) -> list[list[Detection]]:
        raise NotImplementedError


class ConvBlock(nn.Sequential):
    def __init__(self, c_in, c_out, stride, groups):
        super().__init__(
            nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False),
            nn.GroupNorm(groups, c_out),
            nn.SiLU(),
        )


class ToyDetector(Detector):
    """Conv backbone + single-scale dense head.

    Each head cell predicts an objectness logit, class logits and a box
    encoded as (sigmoid offset x, sigmoid offset y, log w/stride, log h/stride)
    relative to the cell. A ground-truth box is assigned to the cell holding
    its center.
    """

    def __init__(self, config: DetectorConfig | None = None, seed: int | None = None):
        super().__init__()
        config = config or DetectorConfig()
        config.validate()
        self.config = config
        with torch.random.fork_rng(devices=[]):
            if seed is not None:
                torch.manual_seed(seed)
            blocks, c_in = [], config.in_channels
            n = len(config.backbone_channels)
            for i, c_out in enumerate(config.backbone_channels):
                stride = 2 if i >= n - config.num_downsamples else 1
                blocks.append(ConvBlock(c_in, c_out, stride, config.norm_groups))
                c_in = c_out
            self.backbone = nn.ModuleList(blocks)
            self.head = nn.Sequential(
                nn.Conv2d(c_in, c_in, 3, padding=1),
                nn.SiLU(),
                nn.Conv2d(c_in, 5 + config.num_classes, 1),
            )

    def check_input(self, pixels: torch.Tensor) -> None:
        s = self.config.stride
        if pixels.ndim != 4 or pixels.shape[1] != self.config.in_channels:
            raise ValueError(f"expected Nx{self.config.in_channels}xHxW input, got {tuple(pixels.shape)}")
        if pixels.shape[2] % s or pixels.shape[3] % s:
            raise ValueError(f"input size {tuple(pixels.shape[2:])} not divisible by stride {s}")

    def features(self, pixels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (head output, tapped mid-layer feature)."""
        self.check_input(pixels)
        x, mid = pixels, None
        for i, block in enumerate(self.backbone):
            x = block(x)
            if i == self.config.tap_index:
                mid = x
        return self.head(x), mid

    def forward(self, pixels):
        return self.features(pixels)[0]

    def forward_train(self, pixels, annotations):
        head, mid = self.features(pixels)
        terms = detection_loss(head, annotations, self.config.stride)
        total = terms["objectness"] + terms["classification"] + terms["localization"]
        return TappedForward(total, terms, mid, head)

    def forward_infer(self, pixels, conf_threshold=0.05, nms_iou=0.5):
        head, _ = self.features(pixels)
        return decode_head(head, self.config.stride, conf_threshold, nms_iou)


def build_targets(annotations: Sequence[Annotation], grid: tuple[int, int], stride: int, like: torch.Tensor):
    n = len(annotations)
    gh, gw = grid
    pos = torch.zeros(n, gh, gw, dtype=torch.bool)
    cls = torch.zeros(n, gh, gw, dtype=torch.long)
    box = torch.zeros(n, 4, gh, gw, dtype=like.dtype)
    for b, ann in enumerate(annotations):
        # larger boxes win contested cells
        order = sorted(range(len(ann.boxes)), key=lambda k: (ann.boxes[k][2] - ann.boxes[k][0]) * (ann.boxes[k][3] - ann.boxes[k][1]))
        for k in order:
            x0, y0, x1, y1 = ann.boxes[k]
            cx, cy = (x0 + x1) / 2 / stride, (y0 + y1) / 2 / stride
            j, i = min(int(cx), gw - 1), min(int(cy), gh - 1)
            pos[b, i, j] = True
            cls[b, i, j] = ann.class_ids[k]
            box[b, :, i, j] = torch.tensor(
                [cx - j, cy - i, math.log((x1 - x0) / stride), math.log((y1 - y0) / stride)], dtype=like.dtype
            )
    return pos.to(like.device), cls.to(like.device), box.to(like.device)


def detection_loss(head: torch.Tensor, annotations: Sequence[Annotation], stride: int) -> dict[str, torch.Tensor]:
    """Objectness BCE over all cells + class CE and smooth-L1 box loss on positives.

    Every term is summed over cells and divided by the batch size.
    """
    n, _, gh, gw = head.shape
    pos, cls_t, box_t = build_targets(annotations, (gh, gw), stride, head)
    obj_logit = head[:, 0]
    cls_logit = head[:, 1:-4].permute(0, 2, 3, 1)
    box_pred = torch.cat([torch.sigmoid(head[:, -4:-2]), head[:, -2:]], dim=1).permute(0, 2, 3, 1)

    obj = F.binary_cross_entropy_with_logits(obj_logit, pos.to(head.dtype), reduction="sum") / n
    cls = F.cross_entropy(cls_logit[pos], cls_t[pos], reduction="sum") / n
    loc = F.smooth_l1_loss(box_pred[pos], box_t.permute(0, 2, 3, 1)[pos], reduction="sum") / n
    return {"objectness": obj, "classification": cls, "localization": loc}


@torch.no_grad()
def decode_head(head: torch.Tensor, stride: int, conf_threshold: float, nms_iou: float) -> list[list[Detection]]:
    """Turn raw head activations into per-image detections.

    Confidence is objectness times the top class probability; only cells
    strictly above ``conf_threshold`` are kept. Greedy NMS runs per class and
    results are sorted by descending confidence.
    """
    n, _, gh, gw = head.shape
    height, width = gh * stride, gw * stride
    head = head.detach().float()
    obj = torch.sigmoid(head[:, 0])
    prob, cls = torch.softmax(head[:, 1:-4], dim=1).max(dim=1)
    conf = obj * prob
    ys, xs = torch.meshgrid(torch.arange(gh), torch.arange(gw), indexing="ij")
    cx = (xs + torch.sigmoid(head[:, -4])) * stride
    cy = (ys + torch.sigmoid(head[:, -3])) * stride
    w = stride * torch.exp(head[:, -2].clamp(max=10.0))
    h = stride * torch.exp(head[:, -1].clamp(max=10.0))
    boxes = torch.stack([
        (cx - w / 2).clamp(0, width), (cy - h / 2).clamp(0, height),
        (cx + w / 2).clamp(0, width), (cy + h / 2).clamp(0, height),
    ], dim=-1)

    out = []
    for b in range(n):
        keep = (conf[b] > conf_threshold) & (boxes[b, ..., 2] > boxes[b, ..., 0]) & (boxes[b, ..., 3] > boxes[b, ..., 1])
        bx, sc, cl = boxes[b][keep], conf[b][keep], cls[b][keep]
        idx = batched_nms(bx, sc, cl, nms_iou)
        idx = idx[torch.argsort(sc[idx], descending=True, stable=True)]
        out.append([Detection(tuple(bx[k].tolist()), int(cl[k]), float(sc[k])) for k in idx])
    return out


def forward_train(detector: Detector, batch: ImageBatch) -> TappedForward:
    out = detector.forward_train(batch.pixels, batch.annotations)
    if not torch.isfinite(out.total_loss):
        raise DivergenceError(f"non-finite detection loss: { {k: float(v.detach()) for k, v in out.loss_terms.items()} }")
    return out


def forward_infer(detector: Detector, batch: ImageBatch, conf_threshold: float = 0.05, nms_iou: float = 0.5) -> list[list[Detection]]:
    with torch.no_grad():
        return detector.forward_infer(batch.pixels, conf_threshold, nms_iou)


def clone_frozen(detector: Detector) -> Detector:
    """Independent, non-trainable copy of ``detector`` (used as the KDFA teacher)."""
    teacher = copy.deepcopy(detector)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
        p.grad = None
    return teacher


def build_detector(config: DetectorConfig | None = None, seed: int | None = None) -> ToyDetector:
    return ToyDetector(config, seed=seed)
