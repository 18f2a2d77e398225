"""Standard, adversarial (alpha-mixed) and feature-aligned adversarial training.

All three modes share one optimizer setup (Adam + optional cosine decay).
Batch order is a pure function of ``(seed, epoch)``, so a run resumed from a
checkpoint at step ``s`` follows the same trajectory as an uninterrupted one.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import pickle
import sys
from dataclasses import asdict, dataclass, field
from itertools import islice
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .alignment import AlignmentWeights, kdfa_loss, ssfa_loss
from .attack import AttackConfig, continue_pgd, first_step_with_reuse
from .dataset import ImageBatch, Record, batch_iterator
from .detector import Detector, DetectorConfig, DivergenceError, ToyDetector, clone_frozen, forward_train

logger = logging.getLogger(__name__)

MODES = ("standard", "at", "fa")
CHECKPOINT_FORMAT = "featalign.checkpoint"
CHECKPOINT_VERSION = 1
PICKLE_PROTOCOL = 4


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "fa"
    alpha: float = 0.5
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(epsilon=0.01, steps=1))
    weights: AlignmentWeights = field(default_factory=AlignmentWeights)
    teacher_checkpoint: str | None = None
    init_checkpoint: str | None = None
    epochs: int = 10
    batch_size: int = 16
    lr: float = 2e-3
    lr_schedule: str = "constant"
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.attack, dict):
            self.attack = AttackConfig(**self.attack)
        if isinstance(self.weights, dict):
            self.weights = AlignmentWeights(**self.weights)

    def validate(self) -> list[str]:
        problems = []
        if self.mode not in MODES:
            problems.append(f"train.mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.alpha <= 1.0:
            problems.append(f"train.alpha must lie in [0, 1], got {self.alpha}")
        if self.epochs < 0:
            problems.append("train.epochs must be >= 0")
        if self.batch_size < 1:
            problems.append("train.batch_size must be >= 1")
        if self.lr <= 0:
            problems.append("train.lr must be > 0")
        if self.lr_schedule not in ("constant", "cosine"):
            problems.append(f"train.lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.attack.random_init and self.mode != "standard":
            problems.append("train.attack.random_init is incompatible with first-iteration gradient reuse")
        return problems

    @property
    def effective_weights(self) -> AlignmentWeights:
        """Alignment weights in force; only feature-aligned mode uses them."""
        return self.weights if self.mode == "fa" else AlignmentWeights(0.0, 0.0)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    step: int
    total_steps: int
    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.LambdaLR
    losses: dict[str, float | None] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)


def make_state(detector: Detector, config: TrainConfig, total_steps: int) -> TrainState:
    params = [p for p in detector.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.lr, weight_decay=config.weight_decay)
    if config.lr_schedule == "cosine":
        def factor(step):
            return 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps) / max(total_steps, 1)))
    else:
        def factor(step):
            return 1.0
    return TrainState(0, total_steps, opt, torch.optim.lr_scheduler.LambdaLR(opt, factor))


def steps_per_epoch(dataset: Sequence[Record], batch_size: int) -> int:
    return math.ceil(len(dataset) / batch_size)


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


# -- single optimization steps ----------------------------------------------


def _finite(losses: dict, where: str) -> None:
    bad = {k: v for k, v in losses.items() if v is not None and not math.isfinite(v)}
    if bad:
        raise DivergenceError(f"non-finite loss in {where}: {bad}")


def standard_step(detector: Detector, batch: ImageBatch, optimizer: torch.optim.Optimizer) -> dict:
    optimizer.zero_grad(set_to_none=True)
    out = forward_train(detector, batch)
    out.total_loss.backward()
    optimizer.step()
    clean = float(out.total_loss.detach())
    return {"adv_det": None, "clean_det": clean, "ssfa": None, "kdfa": None, "total": clean}


def adversarial_gradients(detector: Detector, batch: ImageBatch, config: TrainConfig,
                          teacher: Detector | None = None) -> dict:
    """Accumulate into ``.grad`` the gradient of the mixed objective

        (1 - alpha) * L(x_adv) + alpha * L(x) + beta * SSFA + gamma * KDFA

    reusing the clean pass of the first PGD iteration for the ``alpha`` term
    and the SSFA target. Returns the loss values (floats, ``None`` for terms
    that were not evaluated). Existing ``.grad`` fields are overwritten.
    """
    alpha, w = config.alpha, config.effective_weights
    params = [p for p in detector.parameters() if p.requires_grad]
    reuse = first_step_with_reuse(detector, batch, config.attack, alpha)
    adv = reuse.adversarial
    if config.attack.steps > 1:
        adv = continue_pgd(detector, adv, config.attack.steps - 1)

    for p in params:
        p.grad = None
    losses = {"adv_det": None, "clean_det": float(reuse.clean.total_loss), "ssfa": None, "kdfa": None}
    if alpha < 1.0 or w.enabled:
        out = forward_train(detector, adv.batch)
        objective = (1.0 - alpha) * out.total_loss
        losses["adv_det"] = float(out.total_loss.detach())
        if w.beta > 0:
            ssfa = ssfa_loss(out.mid_feature, reuse.clean.mid_feature)
            objective = objective + w.beta * ssfa
            losses["ssfa"] = float(ssfa.detach())
        if w.gamma > 0:
            if teacher is None:
                raise ValueError("gamma > 0 requires a teacher detector")
            with torch.no_grad():
                teacher_mid = teacher.forward_train(batch.pixels, batch.annotations).mid_feature
            kdfa = kdfa_loss(out.mid_feature, teacher_mid)
            objective = objective + w.gamma * kdfa
            losses["kdfa"] = float(kdfa.detach())
        objective.backward()
    if reuse.param_grads is not None:
        for p, g in zip(params, reuse.param_grads):
            if p.grad is None:
                p.grad = g
            else:
                p.grad.add_(g)

    total = (1.0 - alpha) * losses["adv_det"] if losses["adv_det"] is not None else 0.0
    total += alpha * losses["clean_det"]
    if losses["ssfa"] is not None:
        total += w.beta * losses["ssfa"]
    if losses["kdfa"] is not None:
        total += w.gamma * losses["kdfa"]
    losses["total"] = total
    return losses


def adversarial_step(detector, batch, config, optimizer, teacher=None) -> dict:
    losses = adversarial_gradients(detector, batch, config, teacher)
    _finite(losses, "adversarial step")
    optimizer.step()
    return losses


# -- checkpoints -------------------------------------------------------------


def _checkpoint_payload(detector: Detector, state: TrainState | None, train_config: TrainConfig | None, metadata: dict | None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "detector_config": detector.config.to_dict(),
        "model": detector.state_dict(),
        "step": state.step if state else 0,
        "total_steps": state.total_steps if state else 0,
        "optimizer": state.optimizer.state_dict() if state else None,
        "scheduler": state.scheduler.state_dict() if state else None,
        "losses": dict(state.losses) if state else {},
        "train_config": train_config.to_dict() if train_config else None,
        "metadata": dict(metadata or (state.metadata if state else {})),
    }


def _canonical(obj):
    # pickle memoizes by object identity; rebuilding containers, interning
    # strings and storing tensors as numpy arrays makes the bytes depend on
    # values only
    if isinstance(obj, torch.Tensor):
        return obj.detach().cpu().contiguous().numpy().copy()
    if isinstance(obj, dict):
        return {_canonical(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return type(obj)(_canonical(v) for v in obj)
    if isinstance(obj, str):
        return sys.intern(obj)
    return obj


def _restore(obj):
    if isinstance(obj, np.ndarray):
        return torch.from_numpy(obj)
    if isinstance(obj, dict):
        return {k: _restore(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return type(obj)(_restore(v) for v in obj)
    return obj


def save_checkpoint(path: str | Path, detector: Detector, state: TrainState | None = None,
                    train_config: TrainConfig | None = None, metadata: dict | None = None) -> Path:
    """Write a checkpoint whose bytes depend only on its contents."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = _canonical(_checkpoint_payload(detector, state, train_config, metadata))
    path.write_bytes(pickle.dumps(payload, protocol=PICKLE_PROTOCOL))
    return path


@dataclass
class Checkpoint:
    detector: ToyDetector
    state: TrainState | None
    train_config: TrainConfig | None
    metadata: dict
    raw: dict = field(repr=False)


def load_checkpoint(path: str | Path, expected_config: DetectorConfig | None = None,
                    train_config: TrainConfig | None = None) -> Checkpoint:
    """Restore a detector (and, given ``train_config``, its optimizer state).

    A checkpoint built for a different ``DetectorConfig`` than
    ``expected_config`` is rejected rather than reshaped.
    """
    try:
        raw = _restore(pickle.loads(Path(path).read_bytes()))
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(raw, dict) or raw.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if raw.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {raw.get('version')}")
    det_cfg = DetectorConfig(**raw["detector_config"])
    if expected_config is not None and det_cfg.to_dict() != expected_config.to_dict():
        raise CheckpointError(f"{path}: detector config {det_cfg} does not match expected {expected_config}")
    detector = ToyDetector(det_cfg)
    try:
        detector.load_state_dict(raw["model"])
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters incompatible with config ({exc})") from exc

    saved_train = raw.get("train_config")
    saved_train = TrainConfig(**saved_train) if saved_train else None
    state = None
    if train_config is not None and raw.get("optimizer") is not None:
        state = make_state(detector, train_config, raw["total_steps"])
        state.optimizer.load_state_dict(raw["optimizer"])
        state.scheduler.load_state_dict(raw["scheduler"])
        state.step = raw["step"]
        state.losses = dict(raw.get("losses", {}))
        state.metadata = dict(raw.get("metadata", {}))
    return Checkpoint(detector, state, saved_train, dict(raw.get("metadata", {})), raw)


def parameter_checksum(detector: Detector) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, t in detector.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# -- training loops ----------------------------------------------------------


def _log(log_path: Path | None, record: dict) -> None:
    if log_path is not None:
        with open(log_path, "a") as fh:
            fh.write(json.dumps(record) + "\n")


def fit(detector: Detector, dataset: Sequence[Record], config: TrainConfig, *, teacher: Detector | None = None,
        state: TrainState | None = None, until_step: int | None = None,
        log_path: str | Path | None = None, checkpoint_path: str | Path | None = None) -> TrainState:
    """Run ``config.mode`` training until ``config.epochs`` (or ``until_step``).

    Pass a ``state`` from :func:`load_checkpoint` to resume. When
    ``checkpoint_path`` is set the checkpoint is rewritten at every epoch
    boundary and at the end; a divergence leaves the last good one in place.
    """
    problems = config.validate()
    if problems:
        raise ValueError("; ".join(problems))
    if config.effective_weights.gamma > 0 and teacher is None:
        raise ValueError("feature-aligned training with gamma > 0 needs a teacher")
    per_epoch = steps_per_epoch(dataset, config.batch_size)
    total = config.epochs * per_epoch
    state = state or make_state(detector, config, total)
    stop = total if until_step is None else min(until_step, total)
    log_path = Path(log_path) if log_path is not None else None
    detector.train()

    while state.step < stop:
        epoch, offset = divmod(state.step, per_epoch)
        batches = batch_iterator(dataset, config.batch_size, shuffle_seed=epoch_seed(config.seed, epoch))
        for batch in islice(batches, offset, None):
            if state.step >= stop:
                break
            lr = state.optimizer.param_groups[0]["lr"]
            try:
                if config.mode == "standard":
                    losses = standard_step(detector, batch, state.optimizer)
                else:
                    losses = adversarial_step(detector, batch, config, state.optimizer, teacher)
                _finite(losses, f"step {state.step}")
            except DivergenceError as exc:
                hint = f" (last good checkpoint: {checkpoint_path})" if checkpoint_path else ""
                raise DivergenceError(f"{exc}{hint}") from exc
            state.scheduler.step()
            state.step += 1
            state.losses = losses
            _log(log_path, {"step": state.step, **losses, "lr": lr})
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, detector, state, config)
    return state


def train_standard(detector: Detector, dataset: Sequence[Record], config: TrainConfig, **kw) -> TrainState:
    """Clean training; the result doubles as the KDFA teacher."""
    return fit(detector, dataset, _with_mode(config, "standard"), **kw)


def train_adversarial(detector: Detector, dataset: Sequence[Record], config: TrainConfig, **kw) -> TrainState:
    """Alpha-mixed adversarial training; alignment weights are ignored."""
    return fit(detector, dataset, _with_mode(config, "at"), **kw)


def train_feature_aligned(detector: Detector, dataset: Sequence[Record], config: TrainConfig,
                          teacher: Detector | None = None, **kw) -> TrainState:
    """Adversarial training with SSFA/KDFA.

    Without an explicit ``teacher`` (and ``gamma > 0``) the teacher is loaded
    from ``config.teacher_checkpoint`` or, failing that, bootstrapped by clean
    training of a copy of ``detector``; the student then starts from that
    clean model.
    """
    cfg = _with_mode(config, "fa")
    if cfg.weights.gamma > 0 and teacher is None:
        if cfg.teacher_checkpoint:
            teacher = clone_frozen(load_checkpoint(cfg.teacher_checkpoint, detector.config).detector)
        else:
            teacher = bootstrap_teacher(detector, dataset, cfg)
            detector.load_state_dict(teacher.state_dict())
    if teacher is not None and teacher.config.backbone_channels[teacher.config.tap_index] != \
            detector.config.backbone_channels[detector.config.tap_index]:
        raise ValueError("teacher and student mid-layer taps have different channel counts")
    return fit(detector, dataset, cfg, teacher=teacher, **kw)


def bootstrap_teacher(detector: Detector, dataset: Sequence[Record], config: TrainConfig) -> Detector:
    logger.info("no teacher given: training a clean based model first")
    based = copy.deepcopy(detector)
    train_standard(based, dataset, config)
    return clone_frozen(based)


def train(detector, dataset, config: TrainConfig, teacher=None, **kw) -> TrainState:
    if config.mode == "standard":
        return train_standard(detector, dataset, config, **kw)
    if config.mode == "at":
        return train_adversarial(detector, dataset, config, **kw)
    return train_feature_aligned(detector, dataset, config, teacher=teacher, **kw)


def _with_mode(config: TrainConfig, mode: str) -> TrainConfig:
    if config.mode == mode:
        return config
    cfg = copy.deepcopy(config)
    cfg.mode = mode
    return cfg
