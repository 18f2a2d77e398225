"""COCO-style AP@0.5, adversarial AP per PGD step count, advAP and acAP."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Sequence

import numpy as np

from .attack import AttackConfig, pgd_attack
from .dataset import Annotation, Record, batch_iterator
from .detector import Detection, Detector, forward_infer

RECALL_POINTS = 101


@dataclass
class EvalConfig:
    attack_epsilon: float = 0.03
    attack_steps: tuple[int, ...] = (1, 3, 5, 10)
    step_size: float | None = None  # None: epsilon / k
    iou_threshold: float = 0.5
    conf_threshold: float = 0.01
    nms_iou: float = 0.5
    batch_size: int = 32

    def __post_init__(self):
        self.attack_steps = tuple(int(k) for k in self.attack_steps)

    def validate(self) -> list[str]:
        problems = []
        if not self.attack_steps or any(k < 1 for k in self.attack_steps):
            problems.append(f"eval.attack_steps must be a non-empty list of positive integers, got {self.attack_steps}")
        if self.attack_epsilon < 0:
            problems.append("eval.attack_epsilon must be >= 0")
        if not 0 < self.iou_threshold <= 1:
            problems.append("eval.iou_threshold must lie in (0, 1]")
        if self.batch_size < 1:
            problems.append("eval.batch_size must be >= 1")
        return problems

    def attack(self, steps: int) -> AttackConfig:
        return AttackConfig(epsilon=self.attack_epsilon, steps=steps, step_size=self.step_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attack_steps"] = list(self.attack_steps)
        return d


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two (xmin, ymin, xmax, ymax) boxes."""
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    if area_a <= 0 or area_b <= 0:
        return 0.0
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


@dataclass
class APResult:
    per_class: dict[int, float]
    mean_ap: float | None  # None when no class has ground truth

    @property
    def defined(self) -> bool:
        return self.mean_ap is not None


def interpolated_ap(tp: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP from a confidence-sorted TP indicator array."""
    if tp.size == 0:
        return 0.0
    tps = np.cumsum(tp.astype(np.int64))
    precision = tps / np.arange(1, len(tps) + 1)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    # recall >= r/100 compared in integers: tps * 100 >= r * num_gt
    steps = RECALL_POINTS - 1
    idx = np.searchsorted(tps * steps, np.arange(RECALL_POINTS) * num_gt, side="left")
    valid = idx < len(precision)
    q = np.zeros(RECALL_POINTS)
    q[valid] = precision[idx[valid]]
    return float(q.mean())


def match_class(detections: Sequence[Sequence[Detection]], annotations: Sequence[Annotation],
                class_id: int, iou_threshold: float) -> tuple[np.ndarray, int]:
    """Greedy matching for one class; returns (TP indicators in rank order, #GT)."""
    gts = [[b for b, c in zip(a.boxes, a.class_ids) if c == class_id] for a in annotations]
    num_gt = sum(len(g) for g in gts)
    pool = [(d.confidence, img, d.box) for img, dets in enumerate(detections) for d in dets if d.class_id == class_id]
    # stable: equal confidences keep input order
    pool.sort(key=lambda t: -t[0])
    taken = [[False] * len(g) for g in gts]
    tp = np.zeros(len(pool))
    for rank, (_, img, box) in enumerate(pool):
        best, best_iou = -1, iou_threshold
        for k, gt in enumerate(gts[img]):
            if taken[img][k]:
                continue
            o = iou(box, gt)
            if o >= best_iou and (best < 0 or o > best_iou):
                best, best_iou = k, o
        if best >= 0:
            taken[img][best] = True
            tp[rank] = 1
    return tp, num_gt


def average_precision(detections: Sequence[Sequence[Detection]], annotations: Sequence[Annotation],
                      iou_threshold: float = 0.5) -> APResult:
    """Per-class COCO-style AP at one IoU threshold, and their mean.

    Classes without ground truth are left out of the mean; detections of
    such classes are ignored.
    """
    if len(detections) != len(annotations):
        raise ValueError("need one detection list per annotated image")
    classes = sorted({c for a in annotations for c in a.class_ids})
    per_class = {}
    for c in classes:
        tp, num_gt = match_class(detections, annotations, c, iou_threshold)
        per_class[c] = interpolated_ap(tp, num_gt)
    mean_ap = float(np.mean(list(per_class.values()))) if per_class else None
    return APResult(per_class, mean_ap)


# -- model-level evaluation --------------------------------------------------


def collect_detections(detector: Detector, dataset: Sequence[Record], config: EvalConfig,
                       attack: AttackConfig | None = None, source: Detector | None = None):
    """Decode detections over ``dataset``, optionally after a PGD attack.

    The attack is white-box against ``detector`` unless ``source`` supplies a
    different model's gradients (transfer setting).
    """
    dets, anns = [], []
    for batch in batch_iterator(dataset, config.batch_size):
        if attack is not None:
            batch = pgd_attack(source or detector, batch, attack).batch
        dets.extend(forward_infer(detector, batch, config.conf_threshold, config.nms_iou))
        anns.extend(batch.annotations)
    return dets, anns


def _score(dets, anns, config) -> float:
    res = average_precision(dets, anns, config.iou_threshold)
    if not res.defined:
        raise ValueError("AP undefined: the evaluation set has no ground-truth boxes")
    return res.mean_ap


def evaluate_clean(detector: Detector, dataset: Sequence[Record], config: EvalConfig | None = None) -> float:
    config = config or EvalConfig()
    return _score(*collect_detections(detector, dataset, config), config)


def evaluate_adversarial(detector: Detector, dataset: Sequence[Record], config: EvalConfig | None = None,
                         source: Detector | None = None) -> tuple[dict[int, float], float]:
    config = config or EvalConfig()
    per_step = {}
    for k in config.attack_steps:
        per_step[k] = _score(*collect_detections(detector, dataset, config, config.attack(k), source), config)
    return per_step, mean(per_step.values())


def mean(values) -> float:
    values = list(values)
    return sum(values) / len(values)


def round_half_up(x: float, places: int = 3) -> float:
    """Round the way printed tables do (0.4795 -> 0.480), immune to binary noise."""
    d = Decimal(repr(x)).quantize(Decimal("1e-9"), rounding=ROUND_HALF_UP)
    return float(d.quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP))


@dataclass
class EvalReport:
    clean_ap: float
    adv_ap_per_step: dict[int, float]
    adv_ap: float
    ac_ap: float
    metadata: dict = field(default_factory=dict)

    def columns(self) -> list[str]:
        return ["clean_ap", *[f"ap_pgd{k}" for k in self.adv_ap_per_step], "adv_ap", "ac_ap"]

    def row(self) -> list[float]:
        return [self.clean_ap, *self.adv_ap_per_step.values(), self.adv_ap, self.ac_ap]

    def to_dict(self) -> dict:
        return {
            "clean_ap": self.clean_ap,
            "adv_ap_per_step": {str(k): v for k, v in self.adv_ap_per_step.items()},
            "adv_ap": self.adv_ap,
            "ac_ap": self.ac_ap,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["clean_ap"], {int(k): v for k, v in d["adv_ap_per_step"].items()}, d["adv_ap"], d["ac_ap"],
                   d.get("metadata", {}))

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(self.columns())
        w.writerow([repr(v) for v in self.row()])
        return buf.getvalue()

    def write(self, directory: str | Path, stem: str = "eval") -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        js = directory / f"{stem}.json"
        js.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        cs = directory / f"{stem}.csv"
        cs.write_text(self.to_csv())
        return js, cs


def compose_report(clean_ap: float, adv_ap_per_step: dict[int, float], metadata: dict | None = None) -> EvalReport:
    if not adv_ap_per_step:
        raise ValueError("need at least one adversarial AP")
    adv = mean(adv_ap_per_step.values())
    return EvalReport(clean_ap, dict(adv_ap_per_step), adv, (clean_ap + adv) / 2, dict(metadata or {}))


def evaluate(detector: Detector, dataset: Sequence[Record], config: EvalConfig | None = None,
             metadata: dict | None = None) -> EvalReport:
    config = config or EvalConfig()
    clean = evaluate_clean(detector, dataset, config)
    per_step, _ = evaluate_adversarial(detector, dataset, config)
    return compose_report(clean, per_step, {"eval_config": config.to_dict(), **(metadata or {})})


def coco_results(detections: Sequence[Sequence[Detection]], image_ids: Sequence[int]) -> list[dict]:
    """Detections in COCO results-JSON form (1-based category ids, xywh boxes)."""
    out = []
    for img, dets in zip(image_ids, detections):
        for d in dets:
            x0, y0, x1, y1 = d.box
            out.append({"image_id": img, "category_id": d.class_id + 1,
                        "bbox": [x0, y0, x1 - x0, y1 - y0], "score": d.confidence})
    return out
