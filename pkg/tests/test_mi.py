"""Patch-contrastive regularizer: oracles, closed forms, gradient checks."""

import math

import numpy as np
import pytest
import torch

from advsdg.mi import (
    PatchFeatureExtractor,
    contrastive_mi_loss,
    extract_patch_features,
    positive_log_softmax,
    sample_patch_locations,
)


def _normalized(rng, p, d):
    f = torch.tensor(rng.normal(size=(p, d)), dtype=torch.float64)
    return f / f.norm(dim=-1, keepdim=True)


def _double_loop_oracle(f_src, f_syn, tau, literal_negatives=False):
    """Naive per-pair reimplementation of the patch-contrastive objective."""
    src = f_src.detach().numpy()
    syn = f_syn.detach().numpy()
    p = src.shape[0]
    total = 0.0
    for i in range(p):
        pos = float(syn[i] @ src[i]) / tau
        denom = math.exp(pos)
        for n in range(p):
            if n == i:
                continue
            query = src[i] if literal_negatives else syn[i]
            denom += math.exp(float(query @ src[n]) / tau)
        total += pos - math.log(denom)
    return total / p


# ------------------------------------------------------------ loss closed form


def test_unit_positive_orthogonal_negative_closed_form():
    # P=2, tau=1, positive similarity 1, the single negative orthogonal:
    # per-patch value is log(e / (e + 1)) = -0.31326...
    f = torch.eye(2, dtype=torch.float64)
    loss = float(contrastive_mi_loss(f, f, tau=1.0))
    assert abs(loss - math.log(math.e / (math.e + 1.0))) < 1e-5
    assert abs(loss - (-0.31326)) < 1e-5


def test_perfect_alignment_approaches_zero_from_below():
    f = torch.eye(4, dtype=torch.float64)
    loss = float(contrastive_mi_loss(f, f, tau=0.07))
    assert -1e-4 < loss < 0.0


@pytest.mark.parametrize("p", [2, 3, 8])
def test_matches_double_loop_oracle(p):
    rng = np.random.default_rng(100 + p)
    f_src = _normalized(rng, p, 16)
    f_syn = _normalized(rng, p, 16)
    got = float(contrastive_mi_loss(f_src, f_syn, tau=0.07))
    want = _double_loop_oracle(f_src, f_syn, tau=0.07)
    assert abs(got - want) < 1e-6


def test_literal_negative_variant_matches_its_oracle():
    rng = np.random.default_rng(7)
    f_src = _normalized(rng, 5, 8)
    f_syn = _normalized(rng, 5, 8)
    got = float(contrastive_mi_loss(f_src, f_syn, tau=0.2, literal_negatives=True))
    want = _double_loop_oracle(f_src, f_syn, tau=0.2, literal_negatives=True)
    assert abs(got - want) < 1e-6
    default = float(contrastive_mi_loss(f_src, f_syn, tau=0.2))
    assert abs(got - default) > 1e-6


def test_loss_never_positive():
    rng = np.random.default_rng(3)
    for trial in range(20):
        p = int(rng.integers(2, 9))
        f_src = _normalized(rng, p, 12)
        f_syn = _normalized(rng, p, 12)
        tau = float(rng.uniform(0.05, 1.5))
        assert float(contrastive_mi_loss(f_src, f_syn, tau=tau)) <= 0.0


def test_batched_input_averages_per_element_losses():
    rng = np.random.default_rng(11)
    batch_src = torch.stack([_normalized(rng, 6, 8) for _ in range(3)])
    batch_syn = torch.stack([_normalized(rng, 6, 8) for _ in range(3)])
    got = float(contrastive_mi_loss(batch_src, batch_syn, tau=0.07))
    per = [float(contrastive_mi_loss(batch_src[b], batch_syn[b], tau=0.07))
           for b in range(3)]
    assert abs(got - sum(per) / 3) < 1e-9


def test_shuffling_patch_order_in_both_inputs_leaves_loss_unchanged():
    rng = np.random.default_rng(13)
    f_src = _normalized(rng, 7, 10)
    f_syn = _normalized(rng, 7, 10)
    perm = torch.from_numpy(rng.permutation(7))
    a = float(contrastive_mi_loss(f_src, f_syn, tau=0.07))
    b = float(contrastive_mi_loss(f_src[perm], f_syn[perm], tau=0.07))
    assert abs(a - b) < 1e-9


def test_logit_shift_invariance():
    rng = np.random.default_rng(17)
    pos = torch.tensor(rng.normal(size=5), dtype=torch.float64)
    neg = torch.tensor(rng.normal(size=(5, 4)), dtype=torch.float64)
    base = positive_log_softmax(pos, neg)
    shifted = positive_log_softmax(pos + 3.7, neg + 3.7)
    torch.testing.assert_close(base, shifted, rtol=0, atol=1e-9)


def test_loss_validation():
    f = torch.eye(4, dtype=torch.float64)
    with pytest.raises(ValueError):
        contrastive_mi_loss(f, f, tau=0.0)
    with pytest.raises(ValueError):
        contrastive_mi_loss(f[:1], f[:1], tau=1.0)  # single patch
    with pytest.raises(ValueError):
        contrastive_mi_loss(f, f[:2], tau=1.0)
    with pytest.raises(ValueError):
        contrastive_mi_loss(f * 2.0, f, tau=1.0)  # norm deviates


def test_gradient_wrt_synthesized_features_matches_finite_differences():
    # P=4, D=8, tau=1, float64 central differences; relative error < 1e-4.
    # FD perturbations of 1e-6 stay inside the 1e-3 normalization tolerance.
    rng = np.random.default_rng(23)
    f_src = _normalized(rng, 4, 8)
    f_syn = _normalized(rng, 4, 8).clone().requires_grad_(True)
    contrastive_mi_loss(f_src, f_syn, tau=1.0).backward()
    analytic = f_syn.grad.reshape(-1)

    h = 1e-6
    numeric = torch.zeros_like(analytic)
    with torch.no_grad():
        flat = f_syn.reshape(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + h
            f_plus = float(contrastive_mi_loss(f_src, f_syn, tau=1.0))
            flat[i] = orig - h
            f_minus = float(contrastive_mi_loss(f_src, f_syn, tau=1.0))
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2 * h)

    rel = float((numeric - analytic).norm() / analytic.norm())
    assert rel < 1e-4, rel


# ------------------------------------------------------------ patch locations


def test_full_coverage_when_requesting_whole_map():
    rng = np.random.default_rng(0)
    locs = sample_patch_locations((4, 5), 20, rng)
    assert {tuple(r) for r in locs.tolist()} == {(y, x) for y in range(4) for x in range(5)}


def test_locations_seeded_distinct_and_in_bounds():
    a = sample_patch_locations((6, 6), 10, np.random.default_rng(5))
    b = sample_patch_locations((6, 6), 10, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)
    assert len({tuple(r) for r in a.tolist()}) == 10
    assert a.min() >= 0 and a.max() < 6


def test_location_frequencies_roughly_uniform():
    # 1e4 single-location draws over an 8x8 map: expected count 156.25 per
    # cell, accepted within +-50
    rng = np.random.default_rng(29)
    counts = np.zeros((8, 8), dtype=np.int64)
    for _ in range(10_000):
        y, x = sample_patch_locations((8, 8), 1, rng)[0]
        counts[y, x] += 1
    assert counts.sum() == 10_000
    assert np.abs(counts - 156.25).max() <= 50


def test_location_validation():
    rng = np.random.default_rng(1)
    with pytest.raises(ValueError):
        sample_patch_locations((3, 3), 10, rng)
    with pytest.raises(ValueError):
        sample_patch_locations((3, 3), 0, rng)


# ------------------------------------------------------------------- extractor


def test_rows_unit_norm_and_deterministic():
    torch.manual_seed(0)
    net = PatchFeatureExtractor(in_channels=1, base_width=8, embed_dim=32)
    image = torch.rand(2, 1, 32, 32, generator=torch.Generator().manual_seed(4))
    locs = sample_patch_locations(net.feature_hw(32, 32), 6, np.random.default_rng(2))
    feats = extract_patch_features(image, locs, net)
    assert feats.shape == (2, 6, 32)
    norms = feats.detach().norm(dim=-1)
    torch.testing.assert_close(norms, torch.ones_like(norms), rtol=0, atol=1e-5)
    again = extract_patch_features(image, locs, net)
    assert torch.equal(feats, again)


def test_permuting_locations_permutes_rows():
    torch.manual_seed(1)
    net = PatchFeatureExtractor(in_channels=1, base_width=8, embed_dim=16)
    image = torch.rand(1, 1, 32, 32, generator=torch.Generator().manual_seed(6))
    locs = sample_patch_locations(net.feature_hw(32, 32), 5, np.random.default_rng(3))
    perm = np.random.default_rng(4).permutation(5)
    base = extract_patch_features(image, locs, net)
    shuffled = extract_patch_features(image, locs[perm], net)
    torch.testing.assert_close(shuffled, base[:, perm], rtol=0, atol=0)


def test_feature_hw_matches_encoder_output():
    torch.manual_seed(2)
    net = PatchFeatureExtractor(in_channels=1, base_width=8, embed_dim=16)
    for h, w in [(32, 32), (96, 96), (17, 33)]:
        feat = net.encoder(torch.zeros(1, 1, h, w))
        assert net.feature_hw(h, w) == (feat.shape[2], feat.shape[3])


def test_out_of_bounds_location_rejected():
    torch.manual_seed(3)
    net = PatchFeatureExtractor(in_channels=1, base_width=8, embed_dim=16)
    image = torch.rand(1, 1, 32, 32)
    with pytest.raises(ValueError):
        extract_patch_features(image, np.array([[0, 99]]), net)
    with pytest.raises(ValueError):
        extract_patch_features(image, np.array([[-1, 0]]), net)
    with pytest.raises(ValueError):
        extract_patch_features(image[0], np.array([[0, 0]]), net)
    with pytest.raises(ValueError):
        extract_patch_features(image, np.array([[0, 0, 0]]), net)
