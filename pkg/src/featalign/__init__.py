"""Adversarial training of object detectors with mid-layer feature alignment."""

from .alignment import AlignmentWeights, alignment_loss, cos_sim, kdfa_loss, mid_layer_sensitivity, project, ssfa_loss
from .attack import AdversarialBatch, AttackConfig, fgsm_attack, first_step_with_reuse, pgd_attack
from .dataset import Annotation, ImageBatch, ShapesDatasetSpec, batch_iterator, generate_shapes, load_coco_json
from .detector import Detection, Detector, DetectorConfig, TappedForward, ToyDetector, clone_frozen
from .evaluation import EvalConfig, EvalReport, average_precision, compose_report, evaluate, iou
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train_adversarial, train_feature_aligned, train_standard

__version__ = "0.1.0"
