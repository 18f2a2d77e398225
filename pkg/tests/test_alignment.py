import logging

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from featalign.alignment import (
    AlignmentWeights,
    alignment_loss,
    cos_sim,
    feature_similarity,
    kdfa_loss,
    mid_layer_sensitivity,
    project,
    ssfa_loss,
)
from featalign.attack import AttackConfig
from featalign.dataset import batch_iterator
from featalign.detector import ToyDetector, clone_frozen, forward_train

from conftest import SMALL_CONFIG
from fakes import IdentityTapDetector


def _feat(vec, hw=(2, 3)):
    """NxCxHxW map whose projection is exactly ``vec``."""
    v = torch.as_tensor(vec, dtype=torch.float32)
    if v.ndim == 1:
        v = v[None]
    return v[:, :, None, None].expand(*v.shape, *hw).clone()


def test_cos_sim_examples():
    assert cos_sim(torch.tensor([[1.0, 0.0]]), torch.tensor([[0.0, 1.0]])).item() == 0
    assert cos_sim(torch.tensor([[1.0, 2.0]]), torch.tensor([[2.0, 4.0]])).item() == pytest.approx(1, abs=1e-6)
    v = torch.tensor([[0.3, -1.2, 5.0]])
    assert cos_sim(v, v).item() == pytest.approx(1, abs=1e-6)


def test_cos_sim_zero_vectors_are_finite():
    z = torch.zeros(4, 8)
    assert torch.equal(cos_sim(z, z), torch.zeros(4))
    assert torch.isfinite(cos_sim(z, torch.randn(4, 8))).all()


def test_cos_sim_shape_mismatch():
    with pytest.raises(ValueError):
        cos_sim(torch.zeros(2, 3), torch.zeros(2, 4))


_vec = st.lists(st.floats(-1e3, 1e3, allow_nan=False, width=32), min_size=3, max_size=3)


@settings(max_examples=200, deadline=None)
@given(x=_vec, y=_vec, a=st.floats(0.01, 100), b=st.floats(0.01, 100), sa=st.sampled_from([-1, 1]),
       sb=st.sampled_from([-1, 1]))
def test_cos_sim_scale_invariance(x, y, a, b, sa, sb):
    x, y = torch.tensor([x], dtype=torch.float64), torch.tensor([y], dtype=torch.float64)
    if x.norm() < 1e-2 or y.norm() < 1e-2:
        return
    base = cos_sim(x, y).item()
    scaled = cos_sim(sa * a * x, sb * b * y).item()
    assert -1 - 1e-6 <= base <= 1 + 1e-6
    assert scaled == pytest.approx(sa * sb * base, abs=1e-6)


def test_ssfa_examples():
    a = _feat([1.0, 2.0, -1.0])
    assert ssfa_loss(a, a.clone()).item() == pytest.approx(0, abs=1e-6)
    assert ssfa_loss(_feat([1.0, 0.0]), _feat([0.0, 3.0])).item() == pytest.approx(1, abs=1e-6)
    assert ssfa_loss(_feat([1.0, 2.0]), _feat([-2.0, -4.0])).item() == pytest.approx(2, abs=1e-6)


def test_ssfa_is_batch_mean():
    adv = _feat([[1.0, 0.0], [1.0, 0.0]])
    clean = _feat([[1.0, 0.0], [-1.0, 0.0]])
    assert ssfa_loss(adv, clean).item() == pytest.approx(1.0, abs=1e-6)


def test_kdfa_examples():
    assert kdfa_loss(_feat([0.0, 1.0]), _feat([2.0, 0.0])).item() == pytest.approx(1, abs=1e-6)
    adv, teacher = torch.randn(3, 5, 4, 4), torch.randn(3, 5, 4, 4)
    assert kdfa_loss(adv, 5.0 * teacher).item() == pytest.approx(kdfa_loss(adv, teacher).item(), abs=1e-6)


def test_kdfa_zero_when_teacher_is_student(small_detector, small_batch):
    teacher = clone_frozen(small_detector)
    adv_mid = forward_train(small_detector, small_batch).mid_feature
    t_mid = forward_train(teacher, small_batch).mid_feature
    assert kdfa_loss(adv_mid, t_mid).item() == pytest.approx(0, abs=1e-6)


def test_mismatched_taps_rejected():
    with pytest.raises(ValueError):
        ssfa_loss(torch.randn(2, 4, 3, 3), torch.randn(2, 5, 3, 3))
    with pytest.raises(ValueError):
        kdfa_loss(torch.randn(2, 4, 3, 3), torch.randn(3, 4, 3, 3))


def test_alignment_loss_combinations():
    a, b = _feat([1.0, 0.0]), _feat([0.0, 1.0])
    assert alignment_loss(a, b, b, AlignmentWeights(0, 0)).item() == 0
    assert alignment_loss(a, b, b, AlignmentWeights(10, 10)).item() == pytest.approx(20, abs=1e-5)
    adv, clean = torch.randn(2, 3, 2, 2), torch.randn(2, 3, 2, 2)
    assert torch.equal(alignment_loss(adv, clean, None, AlignmentWeights(1, 0)), ssfa_loss(adv, clean))


def test_zero_loss_iff_positively_colinear():
    v = torch.randn(1, 6)
    assert ssfa_loss(_feat(v), _feat(3 * v)).item() == pytest.approx(0, abs=1e-6)
    assert ssfa_loss(_feat(v), _feat(v + torch.randn(1, 6))).item() > 1e-4


def test_ssfa_rejects_attached_clean_branch():
    with pytest.raises(ValueError):
        ssfa_loss(torch.randn(1, 2, 2, 2), torch.randn(1, 2, 2, 2, requires_grad=True))


def test_ssfa_clean_branch_contributes_no_parameter_gradient(small_detector, small_batch):
    clean_mid = forward_train(small_detector, small_batch).mid_feature.detach()
    assert clean_mid.grad_fn is None
    adv_in = small_batch.pixels + 0.03
    adv_mid = small_detector.forward_train(adv_in, small_batch.annotations).mid_feature
    ssfa_loss(adv_mid, clean_mid).backward()
    through_adv = [p.grad.clone() for p in small_detector.parameters() if p.grad is not None]

    small_detector.zero_grad(set_to_none=True)
    adv_mid = small_detector.forward_train(adv_in, small_batch.annotations).mid_feature
    adv_proj = project(adv_mid)
    target = project(clean_mid)
    (1 - cos_sim(adv_proj, target)).mean().backward()
    manual = [p.grad for p in small_detector.parameters() if p.grad is not None]
    assert all(torch.equal(a, b) for a, b in zip(through_adv, manual))


def test_kdfa_leaves_teacher_grads_empty(small_detector, small_batch):
    teacher = ToyDetector(SMALL_CONFIG, seed=9)  # deliberately trainable
    t_mid = teacher.forward_train(small_batch.pixels, small_batch.annotations).mid_feature
    adv_mid = small_detector.forward_train(small_batch.pixels, small_batch.annotations).mid_feature
    kdfa_loss(adv_mid, t_mid).backward()
    assert all(p.grad is None for p in teacher.parameters())
    assert any(p.grad is not None for p in small_detector.parameters())


def test_project_is_invariant_to_tiling():
    f = torch.randn(2, 5, 3, 4)
    assert torch.allclose(project(f.repeat(1, 1, 3, 2)), project(f), atol=1e-6)
    assert torch.allclose(project(f.repeat_interleave(2, dim=2).repeat_interleave(2, dim=3)), project(f), atol=1e-6)


def test_project_rejects_bad_shapes():
    with pytest.raises(ValueError):
        project(torch.zeros(2, 3))
    with pytest.raises(ValueError):
        project(torch.zeros(2, 3, 0, 4))


def test_sensitivity_identity_tap_is_one(small_batch):
    ratio = mid_layer_sensitivity(IdentityTapDetector(), small_batch, AttackConfig(epsilon=0.02))
    assert ratio == pytest.approx(1.0, abs=1e-6)


def test_sensitivity_undefined_at_zero_epsilon(small_detector, small_batch, caplog):
    with caplog.at_level(logging.WARNING):
        assert mid_layer_sensitivity(small_detector, small_batch, AttackConfig(epsilon=0.0)) is None
    assert "zero perturbation" in caplog.text


def test_sensitivity_over_many_batches(small_detector, small_data):
    ratio = mid_layer_sensitivity(small_detector, batch_iterator(small_data, 8), AttackConfig(epsilon=0.03))
    assert ratio is not None and ratio > 0


def test_feature_similarity_is_one_without_attack(small_detector, small_batch):
    assert feature_similarity(small_detector, small_batch, AttackConfig(epsilon=0.0)) == pytest.approx(1, abs=1e-6)
    assert feature_similarity(small_detector, small_batch, AttackConfig(epsilon=0.1)) < 1


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        AlignmentWeights(-1, 0)
    assert not AlignmentWeights(0, 0).enabled
