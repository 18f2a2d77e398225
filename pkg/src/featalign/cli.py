"""``featalign`` command line: dataset, train, eval, attack, viz, probe, sweep.

Every config field can be set from a JSON config file (``--config``) and
overridden with a dotted flag, e.g. ``--train.alpha 0.5`` or
``--train.attack.epsilon 0.01``. The fully resolved config is written to
``runs/<name>/config.json``; feeding that file back reproduces the run.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import alignment, evaluation, trainer, viz
from .attack import AttackConfig, pgd_attack
from .dataset import DatasetError, ShapesDatasetSpec, batch_iterator, generate_shapes, load_coco_json, write_dataset
from .detector import DetectorConfig, DivergenceError, ToyDetector, clone_frozen, forward_infer, forward_train
from .evaluation import EvalConfig
from .trainer import CheckpointError, TrainConfig

logger = logging.getLogger("featalign")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2


class ConfigError(ValueError):
    pass


class UsageError(Exception):
    pass


@dataclass
class DataConfig:
    train: ShapesDatasetSpec = field(default_factory=lambda: ShapesDatasetSpec(num_images=1024, seed=1))
    test: ShapesDatasetSpec = field(default_factory=lambda: ShapesDatasetSpec(num_images=128, seed=2))
    train_dir: str | None = None
    test_dir: str | None = None


@dataclass
class VizConfig:
    num_images: int = 4
    target: str = "objectness"
    scale: int = 4


def default_train_config() -> TrainConfig:
    return TrainConfig(epochs=20, lr=2e-3, lr_schedule="cosine")


@dataclass
class RunConfig:
    name: str = "run"
    runs_root: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    train: TrainConfig = field(default_factory=default_train_config)
    finetune_epochs: int = 5
    finetune_lr: float = 1e-3
    eval: EvalConfig = field(default_factory=EvalConfig)
    viz: VizConfig = field(default_factory=VizConfig)

    @property
    def run_dir(self) -> Path:
        return Path(self.runs_root) / self.name

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# -- config plumbing ---------------------------------------------------------

_SECTIONS = {
    "data": DataConfig, "detector": DetectorConfig, "train": TrainConfig,
    "eval": EvalConfig, "viz": VizConfig,
}
_NESTED = {
    ("data", "train"): ShapesDatasetSpec, ("data", "test"): ShapesDatasetSpec,
    ("train", "attack"): AttackConfig, ("train", "weights"): alignment.AlignmentWeights,
}


def _build(cls, values: dict, prefix: tuple):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join('.'.join(prefix + (u,)) for u in sorted(unknown))}")
    kwargs = {}
    for k, v in values.items():
        sub = _NESTED.get(prefix + (k,)) or (_SECTIONS.get(k) if not prefix else None)
        kwargs[k] = _build(sub, v, prefix + (k,)) if sub and isinstance(v, dict) else v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{'.'.join(prefix) or 'config'}: {exc}") from exc


def config_from_dict(d: dict) -> RunConfig:
    return _build(RunConfig, d, ())


def flat_fields(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flat_fields(v, key + "."))
        else:
            out[key] = v
    return out


def parse_value(text: str, current):
    if isinstance(current, (list, tuple)) and not text.strip().startswith("["):
        return [json.loads(t) for t in text.split(",") if t.strip()]
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides: dict) -> dict:
    d = copy.deepcopy(d)
    for dotted, value in overrides.items():
        node = d
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node[p]
        node[leaf] = value
    return d


def validate(cfg: RunConfig) -> None:
    problems = []
    for label, spec in (("data.train", cfg.data.train), ("data.test", cfg.data.test)):
        if label == "data.train" and cfg.data.train_dir or label == "data.test" and cfg.data.test_dir:
            continue
        try:
            spec.validate()
        except ValueError as exc:
            problems.append(f"{label}: {exc}")
    try:
        cfg.detector.validate()
    except ValueError as exc:
        problems.append(f"detector: {exc}")
    if cfg.detector.num_classes != 3 and not cfg.data.train_dir:
        problems.append("detector.num_classes must be 3 for the synthetic shapes data")
    if not (cfg.data.test_dir or cfg.data.test.image_size % cfg.detector.stride == 0):
        problems.append(f"data.test.image_size must be divisible by detector.stride={cfg.detector.stride}")
    if not (cfg.data.train_dir or cfg.data.train.image_size % cfg.detector.stride == 0):
        problems.append(f"data.train.image_size must be divisible by detector.stride={cfg.detector.stride}")
    problems += cfg.train.validate()
    problems += cfg.eval.validate()
    if cfg.finetune_epochs < 0 or cfg.finetune_lr <= 0:
        problems.append("finetune_epochs must be >= 0 and finetune_lr > 0")
    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))


# -- shared helpers ----------------------------------------------------------


def load_split(cfg: RunConfig, split: str):
    directory = getattr(cfg.data, f"{split}_dir")
    if directory:
        return load_coco_json(Path(directory) / "annotations.json")
    return generate_shapes(getattr(cfg.data, split))


def echo_config(cfg: RunConfig) -> Path:
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    path = cfg.run_dir / "config.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return path


def _load_detector(path, cfg: RunConfig):
    return trainer.load_checkpoint(path, cfg.detector).detector


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))
    return path


def _tag(path: str) -> str:
    p = Path(path)
    return p.parent.parent.name if p.parent.name == "checkpoints" else p.stem


# -- commands ----------------------------------------------------------------


def cmd_dataset(cfg: RunConfig, args) -> int:
    out = Path(args.out) if args.out else cfg.run_dir / "data"
    for split in ("train", "test"):
        path = write_dataset(generate_shapes(getattr(cfg.data, split)), out / split)
        print(f"{split}: {path}")
    return EXIT_OK


def run_training(cfg: RunConfig) -> Path:
    """Train per ``cfg.train.mode`` inside ``cfg.run_dir``; returns the final checkpoint."""
    tc = cfg.train
    run = cfg.run_dir
    ckpt_dir = run / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    metrics = run / "metrics.jsonl"
    metrics.unlink(missing_ok=True)
    torch.manual_seed(tc.seed)
    train_set = load_split(cfg, "train")

    if tc.mode == "standard":
        detector = ToyDetector(cfg.detector, seed=tc.seed)
        if tc.init_checkpoint:
            detector = _load_detector(tc.init_checkpoint, cfg)
        trainer.train_standard(detector, train_set, tc, log_path=metrics, checkpoint_path=ckpt_dir / "final.pt")
        return ckpt_dir / "final.pt"

    based = None
    needs_teacher = tc.mode == "fa" and tc.weights.gamma > 0 and not tc.teacher_checkpoint
    if not tc.init_checkpoint or needs_teacher:
        logger.info("training the clean based model first")
        based_cfg = dataclasses.replace(tc, mode="standard", init_checkpoint=None)
        based = ToyDetector(cfg.detector, seed=tc.seed)
        trainer.train_standard(based, train_set, based_cfg, log_path=run / "metrics_based.jsonl",
                               checkpoint_path=ckpt_dir / "based.pt")
    detector = _load_detector(tc.init_checkpoint, cfg) if tc.init_checkpoint else copy.deepcopy(based)
    teacher = None
    if tc.mode == "fa" and tc.weights.gamma > 0:
        teacher = clone_frozen(_load_detector(tc.teacher_checkpoint, cfg) if tc.teacher_checkpoint else based)
    ft = dataclasses.replace(tc, epochs=cfg.finetune_epochs, lr=cfg.finetune_lr)
    trainer.train(detector, train_set, ft, teacher=teacher, log_path=metrics, checkpoint_path=ckpt_dir / "final.pt")
    return ckpt_dir / "final.pt"


def cmd_train(cfg: RunConfig, args) -> int:
    echo_config(cfg)
    path = run_training(cfg)
    print(f"checkpoint: {path}")
    return EXIT_OK


def run_eval(cfg: RunConfig, checkpoint: str | Path, tag: str | None = None) -> evaluation.EvalReport:
    detector = _load_detector(checkpoint, cfg)
    test_set = load_split(cfg, "test")
    tag = tag or _tag(str(checkpoint))
    report = evaluation.evaluate(detector, test_set, cfg.eval, {"checkpoint": str(checkpoint), "model": tag,
                                                                 "dataset": cfg.data.test_dir or cfg.data.test.to_dict()})
    reports = cfg.run_dir / "reports"
    report.write(reports, tag)
    dets, _ = evaluation.collect_detections(detector, test_set, cfg.eval)
    _write_json(reports / f"{tag}_detections.json", evaluation.coco_results(dets, [r.image_id for r in test_set]))
    return report


def cmd_eval(cfg: RunConfig, args) -> int:
    echo_config(cfg)
    rows = []
    tags = args.tags.split(",") if args.tags else [None] * len(args.checkpoint)
    if len(tags) != len(args.checkpoint):
        raise UsageError("--tags needs one tag per --checkpoint")
    for ckpt, tag in zip(args.checkpoint, tags):
        report = run_eval(cfg, ckpt, tag)
        rows.append((report.metadata["model"], report))
        print(f"{report.metadata['model']}: clean AP {report.clean_ap:.3f}  advAP {report.adv_ap:.3f}  acAP {report.ac_ap:.3f}")
    summary = ["model," + ",".join(rows[0][1].columns())]
    summary += [f"{tag}," + ",".join(repr(v) for v in rep.row()) for tag, rep in rows]
    (cfg.run_dir / "reports" / "summary.csv").write_text("\n".join(summary) + "\n")
    return EXIT_OK


def cmd_attack(cfg: RunConfig, args) -> int:
    echo_config(cfg)
    detector = _load_detector(args.checkpoint, cfg)
    attack = AttackConfig(epsilon=cfg.eval.attack_epsilon, steps=cfg.eval.attack_steps[0],
                          step_size=cfg.eval.step_size, random_init=args.random_init)
    test_set = load_split(cfg, "test")
    adv_records, clean_losses, adv_losses, linf = [], [], [], 0.0
    offset = 0
    for batch in batch_iterator(test_set, cfg.eval.batch_size):
        adv = pgd_attack(detector, batch, attack)
        with torch.no_grad():
            clean_losses.append(float(forward_train(detector, batch).total_loss))
            adv_losses.append(float(forward_train(detector, adv.batch).total_loss))
        linf = max(linf, float(adv.delta.abs().max()))
        for i, px in enumerate(adv.pixels):
            rec = copy.copy(test_set[offset + i])
            rec.image = (px.permute(1, 2, 0).numpy() * 255.0).round().astype("uint8")
            adv_records.append(rec)
        offset += len(batch)
    out = cfg.run_dir / "adversarial"
    write_dataset(adv_records, out)
    summary = {"attack": attack.to_dict(), "checkpoint": str(args.checkpoint), "linf": linf,
               "mean_clean_loss": sum(clean_losses) / len(clean_losses),
               "mean_adv_loss": sum(adv_losses) / len(adv_losses), "images": str(out)}
    _write_json(cfg.run_dir / "reports" / "attack.json", summary)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_viz(cfg: RunConfig, args) -> int:
    echo_config(cfg)
    tags = args.tags.split(",") if args.tags else [_tag(c) for c in args.checkpoint]
    if len(tags) != len(args.checkpoint):
        raise UsageError("--tags needs one tag per --checkpoint")
    detectors = [_load_detector(c, cfg) for c in args.checkpoint]
    attack = AttackConfig(epsilon=cfg.eval.attack_epsilon, steps=cfg.eval.attack_steps[0], step_size=cfg.eval.step_size)
    attack_tag = f"pgd{attack.steps}_eps{attack.epsilon:g}" if attack.epsilon > 0 else "clean"
    test_set = load_split(cfg, "test")[: cfg.viz.num_images]
    target = int(cfg.viz.target) if cfg.viz.target.isdigit() else cfg.viz.target
    out = cfg.run_dir / "viz"
    for batch, rec in zip(batch_iterator(test_set, 1), test_set):
        panels = []
        for tag, det in zip(tags, detectors):
            adv = pgd_attack(det, batch, attack).batch
            dets = forward_infer(det, adv, cfg.eval.conf_threshold, cfg.eval.nms_iou)[0]
            heat = viz.grad_cam(det, adv.pixels, target, rec.image_id)
            overlay = viz.render_overlay(adv.pixels, dets, rec.annotation, scale=cfg.viz.scale)
            heat_img = viz.render_overlay(adv.pixels, (), None, heat, scale=cfg.viz.scale)
            pair = viz.make_grid([overlay, heat_img])
            viz.save_png(pair, out / viz.overlay_name(rec.image_id, tag, attack_tag))
            panels.append(pair)
        if len(panels) > 1:
            viz.save_png(viz.make_grid(panels, tags), out / viz.overlay_name(rec.image_id, "grid", attack_tag))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_probe(cfg: RunConfig, args) -> int:
    echo_config(cfg)
    detector = _load_detector(args.checkpoint, cfg)
    attack = AttackConfig(epsilon=cfg.eval.attack_epsilon, steps=cfg.eval.attack_steps[0], step_size=cfg.eval.step_size)
    batches = list(batch_iterator(load_split(cfg, "test"), cfg.eval.batch_size))
    result = {
        "checkpoint": str(args.checkpoint),
        "attack": attack.to_dict(),
        "mid_layer_sensitivity": alignment.mid_layer_sensitivity(detector, batches, attack),
        "feature_cos_sim": alignment.feature_similarity(detector, batches, attack),
    }
    _write_json(cfg.run_dir / "reports" / f"probe_{_tag(args.checkpoint)}.json", result)
    print(json.dumps(result, indent=2))
    return EXIT_OK


def cell_name(alpha: float, epsilon: float) -> str:
    return f"a{alpha:g}_e{epsilon:g}"


def run_sweep(cfg: RunConfig, alphas: list[float], epsilons: list[float]) -> list[dict]:
    """Adversarially train and evaluate one model per (alpha, epsilon) cell.

    Cells share the data, the initialization seed and the clean based model.
    A diverging cell is recorded with empty metrics and the sweep continues.
    """
    if not alphas or not epsilons:
        raise UsageError("--alpha-list and --epsilon-list must be non-empty")
    base = cfg.run_dir
    based_path = base / "checkpoints" / "based.pt"
    if not cfg.train.init_checkpoint and not based_path.exists():
        based_cfg = copy.deepcopy(cfg)
        based_cfg.train = dataclasses.replace(cfg.train, mode="standard")
        based_cfg.name, based_cfg.runs_root = "based", str(base)
        run_training(based_cfg)
        (base / "checkpoints").mkdir(parents=True, exist_ok=True)
        based_path.write_bytes((base / "based" / "checkpoints" / "final.pt").read_bytes())
    init = cfg.train.init_checkpoint or str(based_path)
    rows = []
    for a in alphas:
        for e in epsilons:
            cell = copy.deepcopy(cfg)
            cell.runs_root, cell.name = str(base / "cells"), cell_name(a, e)
            cell.train = dataclasses.replace(cfg.train, mode="at", alpha=a, init_checkpoint=init,
                                             attack=dataclasses.replace(cfg.train.attack, epsilon=e))
            row = {"alpha": a, "epsilon": e, "clean_ap": None, "adv_ap": None, "ac_ap": None}
            try:
                validate(cell)
                echo_config(cell)
                report = run_eval(cell, run_training(cell), "at")
                row.update(clean_ap=report.clean_ap, adv_ap=report.adv_ap, ac_ap=report.ac_ap)
            except DivergenceError as exc:
                logger.warning("cell %s diverged: %s", cell.name, exc)
            rows.append(row)
    return rows


def write_sweep(rows: list[dict], out: Path, alphas, epsilons) -> None:
    out.mkdir(parents=True, exist_ok=True)
    fmt = lambda v: "" if v is None else repr(v)  # noqa: E731
    lines = ["alpha,epsilon,clean_ap,adv_ap,ac_ap"]
    lines += [f"{r['alpha']!r},{r['epsilon']!r},{fmt(r['clean_ap'])},{fmt(r['adv_ap'])},{fmt(r['ac_ap'])}" for r in rows]
    (out / "grid.csv").write_text("\n".join(lines) + "\n")
    lookup = {(r["alpha"], r["epsilon"]): r for r in rows}
    for metric in ("clean_ap", "adv_ap"):
        wide = ["alpha\\epsilon," + ",".join(repr(e) for e in epsilons)]
        wide += [repr(a) + "," + ",".join(fmt(lookup[(a, e)][metric]) for e in epsilons) for a in alphas]
        (out / f"grid_{metric}.csv").write_text("\n".join(wide) + "\n")

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    for ax, metric, title in zip(axes, ("clean_ap", "adv_ap"), ("(a) clean AP", "(b) AP under PGD attack")):
        for a in alphas:
            ys = [lookup[(a, e)][metric] for e in epsilons]
            ax.plot(epsilons, [float("nan") if y is None else y for y in ys], marker="o", label=f"alpha={a:g}")
        ax.set_xlabel("training epsilon")
        ax.set_title(title)
        ax.legend()
    fig.tight_layout()
    fig.savefig(out / "sweep.png", dpi=100, metadata={"Software": None})
    plt.close(fig)


def cmd_sweep(cfg: RunConfig, args) -> int:
    echo_config(cfg)
    alphas = [float(a) for a in args.alpha_list.split(",") if a.strip()]
    epsilons = [float(e) for e in args.epsilon_list.split(",") if e.strip()]
    rows = run_sweep(cfg, alphas, epsilons)
    write_sweep(rows, cfg.run_dir / "reports", alphas, epsilons)
    for r in rows:
        print(r)
    return EXIT_OK


def cmd_config(cfg: RunConfig, args) -> int:
    print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "dataset": cmd_dataset, "train": cmd_train, "eval": cmd_eval, "attack": cmd_attack,
    "viz": cmd_viz, "probe": cmd_probe, "sweep": cmd_sweep, "config": cmd_config,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="featalign", description=__doc__.splitlines()[0].replace("``", ""))
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    defaults = flat_fields(RunConfig().to_dict())

    helps = {
        "dataset": "write the synthetic train/test splits as PNG + COCO JSON",
        "train": "train a detector (--mode standard | at | fa)",
        "eval": "clean AP, per-step adversarial AP, advAP and acAP",
        "attack": "write PGD-attacked copies of the test images",
        "viz": "detection overlays and Grad-CAM maps under attack",
        "probe": "mid-layer sensitivity and clean/adversarial feature similarity",
        "sweep": "alpha x epsilon grid of adversarial training runs",
        "config": "print the fully resolved configuration",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", help="JSON run config (e.g. an echoed runs/<name>/config.json)")
        p.add_argument("--name", help="run directory name under runs_root")
        if name in ("eval", "attack", "viz", "probe", "sweep"):
            p.add_argument("--epsilon", type=float, help="attack budget (eval.attack_epsilon)")
            p.add_argument("--steps", help="comma-separated PGD step counts (eval.attack_steps)")
            p.add_argument("--step-size", type=float, help="fixed PGD step size instead of epsilon/k")
        if name in ("eval", "viz"):
            p.add_argument("--checkpoint", action="append", required=True)
            p.add_argument("--tags", help="comma-separated model tags, one per checkpoint")
        if name in ("attack", "probe"):
            p.add_argument("--checkpoint", required=True)
        if name == "attack":
            p.add_argument("--random-init", action="store_true")
        if name == "train":
            p.add_argument("--mode", choices=trainer.MODES)
            p.add_argument("--teacher", help="KDFA teacher checkpoint (train.teacher_checkpoint)")
            p.add_argument("--init", help="initial weights (train.init_checkpoint)")
        if name == "dataset":
            p.add_argument("--out", help="output directory (default runs/<name>/data)")
        if name == "sweep":
            p.add_argument("--alpha-list", default="0,0.5")
            p.add_argument("--epsilon-list", default="0.01,0.03")
        group = p.add_argument_group("config overrides")
        for key, value in defaults.items():
            if key == "name":  # already a top-level flag
                continue
            group.add_argument(f"--{key}", dest=f"override:{key}", metavar="VALUE",
                               help=f"default: {json.dumps(value)}")
    return parser


def resolve_config(args) -> RunConfig:
    base = RunConfig().to_dict()
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: malformed JSON ({exc})") from exc
        base = apply_overrides(base, flat_fields(loaded))
    defaults = flat_fields(base)
    overrides = {}
    for key, text in vars(args).items():
        if key.startswith("override:") and text is not None:
            dotted = key.split(":", 1)[1]
            overrides[dotted] = parse_value(text, defaults[dotted])
    shortcuts = {
        "name": "name", "mode": "train.mode", "teacher": "train.teacher_checkpoint", "init": "train.init_checkpoint",
        "epsilon": "eval.attack_epsilon", "step_size": "eval.step_size",
    }
    for attr, dotted in shortcuts.items():
        if getattr(args, attr, None) is not None:
            overrides[dotted] = getattr(args, attr)
    if getattr(args, "steps", None):
        overrides["eval.attack_steps"] = [int(s) for s in args.steps.split(",")]
    cfg = config_from_dict(apply_overrides(base, overrides))
    validate(cfg)
    return cfg


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError, CheckpointError, DatasetError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001
        logger.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
