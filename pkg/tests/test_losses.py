"""Scalar objectives: closed forms, simplex properties, gradient checks."""

import math

import numpy as np
import pytest
import torch

from advsdg.losses import (
    LossReport,
    consistency_loss,
    kl_divergence,
    soft_dice_loss,
    supervised_loss,
)

from conftest import random_simplex


def _pixelwise(vec, shape=(1, 1, 1)):
    """Broadcast one class distribution to a [B, K, H, W] prediction."""
    b, h, w = shape
    k = len(vec)
    return torch.tensor(vec, dtype=torch.float64).view(1, k, 1, 1).expand(b, k, h, w).clone()


# ------------------------------------------------------------------------- kl


def test_kl_self_is_zero_over_random_simplexes():
    rng = np.random.default_rng(0)
    for _ in range(100):
        p = random_simplex(rng, (2, 4, 3, 3))
        assert abs(float(kl_divergence(p, p))) <= 1e-6


def test_kl_nonnegative_up_to_epsilon_slack():
    rng = np.random.default_rng(1)
    for _ in range(50):
        p = random_simplex(rng, (1, 3, 4, 4))
        q = random_simplex(rng, (1, 3, 4, 4))
        assert float(kl_divergence(p, q)) >= -1e-6


def test_kl_onehot_vs_uniform_is_log2():
    p = _pixelwise([1.0, 0.0], shape=(2, 3, 3))
    q = _pixelwise([0.5, 0.5], shape=(2, 3, 3))
    assert abs(float(kl_divergence(p, q)) - math.log(2.0)) < 1e-4


def test_kl_asymmetry_witness():
    p = _pixelwise([1.0, 0.0])
    q = _pixelwise([0.5, 0.5])
    forward = float(kl_divergence(p, q))
    backward = float(kl_divergence(q, p))
    assert abs(forward - math.log(2.0)) < 1e-4
    # reversed direction hits the epsilon guard on the zero entry: large, finite
    assert backward > 5.0
    assert math.isfinite(backward)
    assert abs(forward - backward) > 1.0


def test_kl_shape_mismatch_rejected():
    p = _pixelwise([0.5, 0.5])
    with pytest.raises(ValueError):
        kl_divergence(p, p[:, :1])
    with pytest.raises(ValueError):
        kl_divergence(p.squeeze(0), p.squeeze(0))
    bad = p.clone()
    bad[0, 0] = 0.9
    with pytest.raises(ValueError):
        kl_divergence(bad, p)


def test_consistency_is_single_direction_kl():
    rng = np.random.default_rng(2)
    p = random_simplex(rng, (2, 3, 4, 4))
    q = random_simplex(rng, (2, 3, 4, 4))
    assert float(consistency_loss(p, q)) == float(kl_divergence(p, q))
    assert abs(float(consistency_loss(p, p))) <= 1e-6
    assert float(consistency_loss(p, q)) != float(consistency_loss(q, p))


# ----------------------------------------------------------------- supervised


def test_supervised_correct_onehot_is_zero():
    pred = _pixelwise([0.0, 1.0, 0.0], shape=(2, 2, 2))
    labels = torch.ones(2, 2, 2, dtype=torch.int64)
    assert abs(float(supervised_loss(pred, labels))) < 1e-6


def test_supervised_uniform_k4_is_log4():
    pred = _pixelwise([0.25, 0.25, 0.25, 0.25], shape=(1, 3, 3))
    labels = torch.zeros(1, 3, 3, dtype=torch.int64)
    assert abs(float(supervised_loss(pred, labels)) - math.log(4.0)) < 1e-4


def test_supervised_half_confidence_is_log2():
    pred = _pixelwise([0.5, 0.5], shape=(1, 2, 2))
    labels = torch.zeros(1, 2, 2, dtype=torch.int64)
    assert abs(float(supervised_loss(pred, labels)) - math.log(2.0)) < 1e-4


def test_supervised_decreases_with_confidence():
    labels = torch.zeros(1, 2, 2, dtype=torch.int64)
    losses = []
    for conf in [0.1, 0.3, 0.5, 0.7, 0.9]:
        pred = _pixelwise([conf, 1.0 - conf], shape=(1, 2, 2))
        losses.append(float(supervised_loss(pred, labels)))
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_supervised_label_validation():
    pred = _pixelwise([0.5, 0.5], shape=(1, 2, 2))
    with pytest.raises(ValueError):
        supervised_loss(pred, torch.full((1, 2, 2), 2, dtype=torch.int64))
    with pytest.raises(ValueError):
        supervised_loss(pred, torch.full((1, 2, 2), -1, dtype=torch.int64))
    with pytest.raises(ValueError):
        supervised_loss(pred, torch.zeros(1, 3, 3, dtype=torch.int64))


def test_dice_term_zero_when_perfect_and_positive_otherwise():
    perfect = _pixelwise([0.0, 1.0], shape=(1, 4, 4))
    labels = torch.ones(1, 4, 4, dtype=torch.int64)
    assert abs(float(soft_dice_loss(perfect, labels))) < 1e-6
    wrong = _pixelwise([1.0, 0.0], shape=(1, 4, 4))
    assert float(soft_dice_loss(wrong, labels)) > 0.5
    plain = float(supervised_loss(wrong, labels))
    with_dice = float(supervised_loss(wrong, labels, dice_weight=0.5))
    assert with_dice > plain


# ------------------------------------------------------------- gradient check


def _fd_check(make_loss, logits_list, tol):
    """Central differences through softmax parameterization in float64."""
    for t in logits_list:
        t.requires_grad_(True)
        if t.grad is not None:
            t.grad = None
    make_loss().backward()
    analytic = torch.cat([t.grad.reshape(-1) for t in logits_list])

    h = 1e-6
    numeric = []
    with torch.no_grad():
        for t in logits_list:
            flat = t.reshape(-1)
            g = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + h
                f_plus = float(make_loss())
                flat[i] = orig - h
                f_minus = float(make_loss())
                flat[i] = orig
                g[i] = (f_plus - f_minus) / (2 * h)
            numeric.append(g)
    numeric = torch.cat(numeric)
    rel = float((numeric - analytic).norm() / analytic.norm())
    assert rel < tol, rel


def test_gradients_match_finite_differences_on_2x2_toys():
    gen = torch.Generator().manual_seed(9)
    logits_p = torch.randn(1, 3, 2, 2, generator=gen, dtype=torch.float64)
    logits_q = torch.randn(1, 3, 2, 2, generator=gen, dtype=torch.float64)
    labels = torch.randint(0, 3, (1, 2, 2), generator=gen)

    _fd_check(lambda: kl_divergence(torch.softmax(logits_p, 1), torch.softmax(logits_q, 1)),
              [logits_p, logits_q], 1e-4)
    _fd_check(lambda: consistency_loss(torch.softmax(logits_p, 1), torch.softmax(logits_q, 1)),
              [logits_p, logits_q], 1e-4)
    _fd_check(lambda: supervised_loss(torch.softmax(logits_p, 1), labels),
              [logits_p], 1e-4)


# ----------------------------------------------------------------- loss report


def test_report_build_satisfies_total_invariants():
    r = LossReport.build(sup_1=0.5, sup_2=0.25, cons=0.125, mi_1=-0.3, mi_2=-0.7)
    assert r.seg_total == 0.5 + 0.25 + 0.125
    assert r.adv_total == 0.125 - 0.3 - 0.7
    r.validate()
    d = r.as_dict()
    assert set(d) == {"sup_1", "sup_2", "cons", "mi_1", "mi_2", "seg_total", "adv_total"}


def test_report_validate_catches_inconsistent_totals():
    r = LossReport(sup_1=1.0, sup_2=0.0, cons=0.0, mi_1=0.0, mi_2=0.0,
                   seg_total=2.0, adv_total=0.0)
    with pytest.raises(ValueError):
        r.validate()


def test_report_defaults_are_zero():
    r = LossReport.build()
    assert r.as_dict() == {k: 0.0 for k in
                           ("sup_1", "sup_2", "cons", "mi_1", "mi_2", "seg_total", "adv_total")}
