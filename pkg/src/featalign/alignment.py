"""Mid-layer feature alignment: average-pool projection, cosine losses, sensitivity probe."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Iterable

import torch

from .attack import AttackConfig, pgd_attack
from .dataset import ImageBatch
from .detector import Detector

logger = logging.getLogger(__name__)

NORM_EPS = 1e-8


@dataclass
class AlignmentWeights:
    beta: float = 10.0  # SSFA: adversarial vs. the student's own clean features
    gamma: float = 10.0  # KDFA: adversarial vs. the frozen teacher's clean features

    def __post_init__(self):
        if self.beta < 0 or self.gamma < 0:
            raise ValueError(f"alignment weights must be non-negative, got beta={self.beta}, gamma={self.gamma}")

    @property
    def enabled(self) -> bool:
        return self.beta > 0 or self.gamma > 0

    def to_dict(self) -> dict:
        return asdict(self)


def project(mid_feature: torch.Tensor) -> torch.Tensor:
    """Average-pool an NxCxHxW feature map to an NxC descriptor."""
    if mid_feature.ndim != 4:
        raise ValueError(f"expected NxCxHxW feature, got shape {tuple(mid_feature.shape)}")
    if mid_feature.shape[2] == 0 or mid_feature.shape[3] == 0:
        raise ValueError("cannot project a feature map with empty spatial dims")
    return mid_feature.mean(dim=(2, 3))


def cos_sim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine similarity of two NxC tensors; ``1e-8`` pads each norm."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a * b).sum(dim=-1) / ((a.norm(dim=-1) + NORM_EPS) * (b.norm(dim=-1) + NORM_EPS))


def _check_pair(adv_mid: torch.Tensor, target_mid: torch.Tensor, what: str) -> None:
    if adv_mid.shape[:2] != target_mid.shape[:2]:
        raise ValueError(
            f"{what}: student tap {tuple(adv_mid.shape)} incompatible with target {tuple(target_mid.shape)}"
        )


def ssfa_loss(adv_mid: torch.Tensor, clean_mid: torch.Tensor) -> torch.Tensor:
    """Mean of ``1 - cos_sim`` between adversarial and (detached) clean projections."""
    if clean_mid.requires_grad:
        raise ValueError("ssfa_loss: clean features must be detached (stop-grad)")
    _check_pair(adv_mid, clean_mid, "ssfa_loss")
    return (1.0 - cos_sim(project(adv_mid), project(clean_mid))).mean()


def kdfa_loss(adv_mid: torch.Tensor, teacher_mid: torch.Tensor) -> torch.Tensor:
    _check_pair(adv_mid, teacher_mid, "kdfa_loss")
    return (1.0 - cos_sim(project(adv_mid), project(teacher_mid.detach()))).mean()


def alignment_loss(adv_mid, clean_mid, teacher_mid, weights: AlignmentWeights) -> torch.Tensor:
    """``beta * ssfa + gamma * kdfa``; a zero-weighted term is not evaluated."""
    total = adv_mid.new_zeros(())
    if weights.beta > 0:
        total = weights.beta * ssfa_loss(adv_mid, clean_mid)
    if weights.gamma > 0:
        total = total + weights.gamma * kdfa_loss(adv_mid, teacher_mid)
    return total


def _as_batches(data: ImageBatch | Iterable[ImageBatch]) -> Iterable[ImageBatch]:
    return [data] if isinstance(data, ImageBatch) else data


@torch.no_grad()
def _mid(detector: Detector, batch: ImageBatch) -> torch.Tensor:
    return detector.forward_train(batch.pixels, batch.annotations).mid_feature


def mid_layer_sensitivity(detector: Detector, data: ImageBatch | Iterable[ImageBatch], config: AttackConfig) -> float | None:
    """Mean over samples of ||f_mid(x) - f_mid(x_adv)||_2 / ||x - x_adv||_2.

    An empirical lower bound on the Lipschitz constant of the layers up to
    the tap. Samples the attack left unperturbed are skipped; returns
    ``None`` when no sample is usable.
    """
    ratios, skipped = [], 0
    for batch in _as_batches(data):
        adv = pgd_attack(detector, batch, config)
        d_in = (adv.pixels - batch.pixels).flatten(1).norm(dim=1)
        d_mid = (_mid(detector, adv.batch) - _mid(detector, batch)).flatten(1).norm(dim=1)
        valid = d_in > 0
        skipped += int((~valid).sum())
        ratios.append((d_mid[valid] / d_in[valid]).double())
    if skipped:
        logger.warning("mid_layer_sensitivity: %d sample(s) with zero perturbation excluded", skipped)
    ratios = torch.cat(ratios) if ratios else torch.empty(0)
    if ratios.numel() == 0:
        return None
    return float(ratios.mean())


def feature_similarity(detector: Detector, data: ImageBatch | Iterable[ImageBatch], config: AttackConfig) -> float:
    """Mean cosine similarity between clean and adversarial mid-layer projections."""
    sims = []
    for batch in _as_batches(data):
        adv = pgd_attack(detector, batch, config)
        sims.append(cos_sim(project(_mid(detector, adv.batch)), project(_mid(detector, batch))).double())
    return float(torch.cat(sims).mean())
