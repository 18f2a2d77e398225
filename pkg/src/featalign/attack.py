"""L-infinity PGD / FGSM against a detector's total detection loss."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import ClassVar

import torch

from .dataset import ImageBatch
from .detector import Detector, DivergenceError, TappedForward


@dataclass
class AttackConfig:
    """Budget ``epsilon`` (pixel units in [0, 1]) spent over ``steps`` signed steps.

    ``step_size`` defaults to ``epsilon / steps``.
    """

    epsilon: float = 0.03
    steps: int = 1
    step_size: float | None = None
    random_init: bool = False
    seed: int = 0

    targeted: ClassVar[bool] = False

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")

    @property
    def alpha(self) -> float:
        """Per-iteration step size actually used."""
        return self.step_size if self.step_size is not None else self.epsilon / self.steps

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdversarialBatch:
    pixels: torch.Tensor
    source: ImageBatch
    config: AttackConfig

    @property
    def batch(self) -> ImageBatch:
        return ImageBatch(self.pixels, self.source.annotations)

    @property
    def delta(self) -> torch.Tensor:
        return self.pixels - self.source.pixels


@dataclass
class ReuseResult:
    """Output of the first PGD iteration when its clean pass is recycled."""

    adversarial: AdversarialBatch
    clean: TappedForward
    param_grads: list[torch.Tensor] | None


def project(x: torch.Tensor, x0: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Clip to the epsilon box around ``x0``, then to the valid pixel range."""
    return torch.min(torch.max(x, x0 - epsilon), x0 + epsilon).clamp(0.0, 1.0)


def _checked(grad: torch.Tensor) -> torch.Tensor:
    if not torch.isfinite(grad).all():
        raise DivergenceError("non-finite input gradient during attack")
    return grad


def input_gradient(detector: Detector, pixels: torch.Tensor, annotations) -> tuple[torch.Tensor, TappedForward]:
    x = pixels.detach().requires_grad_(True)
    out = detector.forward_train(x, annotations)
    if not torch.isfinite(out.total_loss):
        raise DivergenceError("non-finite detection loss during attack")
    (grad,) = torch.autograd.grad(out.total_loss, x)
    return _checked(grad), out


def _iterate(detector, x0, x, annotations, epsilon, step_size, n_steps):
    for _ in range(n_steps):
        grad, _ = input_gradient(detector, x, annotations)
        x = project(x.detach() + step_size * grad.sign(), x0, epsilon)
    return x.detach()


def _start_point(x0: torch.Tensor, config: AttackConfig) -> torch.Tensor:
    if not config.random_init or config.epsilon == 0:
        return x0.clone()
    gen = torch.Generator().manual_seed(config.seed)
    noise = (torch.rand(x0.shape, generator=gen, dtype=x0.dtype) * 2 - 1) * config.epsilon
    return project(x0 + noise.to(x0.device), x0, config.epsilon)


def pgd_attack(detector: Detector, batch: ImageBatch, config: AttackConfig) -> AdversarialBatch:
    """Untargeted k-step PGD maximizing the detector's total loss.

    Each iteration moves every pixel by ``config.alpha * sign(grad)`` and
    projects back into the epsilon box intersected with [0, 1]. Parameters
    and their ``.grad`` fields are left untouched.
    """
    x0 = batch.pixels.detach()
    x = _start_point(x0, config)
    x = _iterate(detector, x0, x, batch.annotations, config.epsilon, config.alpha, config.steps)
    return AdversarialBatch(x, batch, config)


def fgsm_attack(detector: Detector, batch: ImageBatch, epsilon: float) -> AdversarialBatch:
    return pgd_attack(detector, batch, AttackConfig(epsilon=epsilon, steps=1, random_init=False))


def continue_pgd(detector: Detector, partial: AdversarialBatch, steps: int) -> AdversarialBatch:
    """Run ``steps`` more PGD iterations from an in-progress adversarial batch."""
    cfg = partial.config
    x = _iterate(detector, partial.source.pixels.detach(), partial.pixels, partial.source.annotations,
                 cfg.epsilon, cfg.alpha, steps)
    return AdversarialBatch(x, partial.source, cfg)


def first_step_with_reuse(detector: Detector, batch: ImageBatch, config: AttackConfig, alpha: float) -> ReuseResult:
    """First PGD iteration whose clean forward/backward also feeds the outer update.

    One pass over the clean batch yields the input gradient (for the first
    perturbation), the clean mid-layer feature (detached, the SSFA target)
    and ``alpha``-scaled parameter gradients of the clean detection loss.
    Parameter ``.grad`` fields are not written; the caller accumulates
    ``param_grads`` itself.
    """
    if config.random_init:
        raise ValueError("gradient reuse needs the first PGD iterate to be the clean input; disable random_init")
    x0 = batch.pixels.detach()
    x = x0.clone().requires_grad_(True)
    out = detector.forward_train(x, batch.annotations)
    if not torch.isfinite(out.total_loss):
        raise DivergenceError("non-finite clean detection loss")

    params = [p for p in detector.parameters() if p.requires_grad]
    param_grads = None
    if alpha > 0 and params:
        grads = torch.autograd.grad(out.total_loss, [x, *params], allow_unused=True)
        grad_x = grads[0]
        param_grads = [alpha * (g if g is not None else torch.zeros_like(p)) for g, p in zip(grads[1:], params)]
    else:
        (grad_x,) = torch.autograd.grad(out.total_loss, x)
    x1 = project(x0 + config.alpha * _checked(grad_x).sign(), x0, config.epsilon)

    clean = TappedForward(
        out.total_loss.detach(),
        {k: v.detach() for k, v in out.loss_terms.items()},
        out.mid_feature.detach(),
        out.head.detach() if out.head is not None else None,
    )
    return ReuseResult(AdversarialBatch(x1.detach(), batch, config), clean, param_grads)
