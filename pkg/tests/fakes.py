"""Hand-built detectors with analytically known losses and outputs."""

import torch
from torch import nn

from featalign.detector import Detection, DetectorConfig, Detector, TappedForward


class LinearDetector(Detector):
    """Loss = sum(w * x) per image summed over the batch; gradient wrt x is ``w``."""

    def __init__(self, weight: torch.Tensor):
        super().__init__()
        self.config = DetectorConfig(stride=1, backbone_channels=(weight.shape[0],), norm_groups=1)
        self.w = nn.Parameter(weight.clone())

    def forward_train(self, pixels, annotations):
        loss = (pixels * self.w).sum()
        return TappedForward(loss, {"objectness": loss}, pixels * self.w)

    def forward_infer(self, pixels, conf_threshold=0.05, nms_iou=0.5):
        return [[] for _ in range(pixels.shape[0])]


class IdentityTapDetector(Detector):
    """Mid feature is the input itself, so feature perturbation equals input perturbation."""

    def __init__(self):
        super().__init__()
        self.config = DetectorConfig(stride=1, backbone_channels=(3,), norm_groups=1)
        self.scale = nn.Parameter(torch.ones(()))

    def forward_train(self, pixels, annotations):
        loss = self.scale * (pixels ** 2).sum()
        return TappedForward(loss, {"objectness": loss}, pixels)

    def forward_infer(self, pixels, conf_threshold=0.05, nms_iou=0.5):
        return [[] for _ in range(pixels.shape[0])]


class OracleDetector(Detector):
    """Emits exactly the ground-truth boxes it was given, at confidence 1."""

    def __init__(self, dataset):
        super().__init__()
        self.config = DetectorConfig()
        self.dummy = nn.Parameter(torch.zeros(()))
        self.queue = [r.annotation for r in dataset]

    def forward_train(self, pixels, annotations):
        loss = self.dummy * pixels.sum()
        return TappedForward(loss, {"objectness": loss}, pixels)

    def forward_infer(self, pixels, conf_threshold=0.05, nms_iou=0.5):
        out = []
        for _ in range(pixels.shape[0]):
            ann = self.queue.pop(0)
            out.append([Detection(tuple(b), c, 1.0) for b, c in zip(ann.boxes, ann.class_ids)])
        return out
