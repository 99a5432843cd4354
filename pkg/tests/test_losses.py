import math

import numpy as np
import pytest
import torch

from cystodx.losses import (
    LossConfig,
    bce,
    classification_loss,
    compound_seg_loss,
    focal,
    masked_multilabel_bce,
    soft_dice_loss,
)


def fd_gradient(fn, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central finite differences of a scalar fn wrt every element of x."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        fp = fn(x).item()
        flat[i] = orig - eps
        fm = fn(x).item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def assert_grad_matches_fd(fn, x: torch.Tensor, rtol: float = 1e-4):
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.detach().clone()
    numeric = fd_gradient(fn, x.detach().clone().double())
    assert torch.allclose(analytic.double(), numeric, rtol=rtol, atol=1e-8), (
        f"max abs diff {(analytic.double() - numeric).abs().max():.3e}"
    )


# ---------------------------------------------------------------------------
# bce
# ---------------------------------------------------------------------------

def test_bce_perfect_prediction_near_zero():
    p = torch.tensor([1.0, 0.0, 1.0])
    y = torch.tensor([1.0, 0.0, 1.0])
    assert bce(p, y).item() < 1e-6


def test_bce_half_probability_is_ln2():
    p = torch.tensor([0.5, 0.5], dtype=torch.float64)
    y = torch.tensor([1.0, 0.0], dtype=torch.float64)
    assert bce(p, y).item() == pytest.approx(math.log(2), abs=1e-9)


def test_bce_symmetry():
    p = torch.rand(16, dtype=torch.float64)
    y = torch.randint(0, 2, (16,)).double()
    assert bce(p, y).item() == pytest.approx(bce(1 - p, 1 - y).item(), rel=1e-12)


def test_bce_shape_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        bce(torch.rand(3), torch.rand(4))


# ---------------------------------------------------------------------------
# focal
# ---------------------------------------------------------------------------

def test_focal_gamma_zero_alpha_half_is_half_bce():
    p = torch.rand(32, dtype=torch.float64)
    y = torch.randint(0, 2, (32,)).double()
    f = focal(p, y, gamma=0.0, alpha=0.5)
    assert f.item() == pytest.approx(0.5 * bce(p, y).item(), rel=1e-12)


def test_focal_hand_value():
    # y=1, p=0.9, gamma=2, alpha=0.25 -> 0.25 * 0.01 * (-ln 0.9)
    p = torch.tensor([0.9], dtype=torch.float64)
    y = torch.tensor([1.0], dtype=torch.float64)
    expected = 0.25 * 0.1 ** 2 * (-math.log(0.9))
    assert focal(p, y, gamma=2.0, alpha=0.25).item() == pytest.approx(expected, rel=1e-9)
    assert expected == pytest.approx(2.634e-4, rel=1e-3)


def test_focal_monotone_to_zero_for_confident_positive():
    ps = torch.linspace(0.5, 0.999, 50, dtype=torch.float64)
    vals = [focal(torch.tensor([p]), torch.tensor([1.0]), 2.0, 0.25).item() for p in ps]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-5


def test_focal_negative_gamma_rejected():
    with pytest.raises(ValueError, match="gamma"):
        focal(torch.rand(4), torch.zeros(4), gamma=-1.0)


def test_focal_dominated_by_scaled_bce_elementwise():
    p = torch.rand(200, dtype=torch.float64)
    y = torch.randint(0, 2, (200,)).double()
    for gamma in (0.0, 0.5, 2.0, 5.0):
        for alpha in (0.25, 0.5, 0.75):
            f = focal(p, y, gamma, alpha, reduction="none")
            b = bce(p, y, reduction="none")
            assert (f <= max(alpha, 1 - alpha) * b + 1e-12).all()


# ---------------------------------------------------------------------------
# dice
# ---------------------------------------------------------------------------

def test_dice_perfect_overlap_zero():
    m = torch.zeros(1, 1, 8, 8)
    m[0, 0, 2:4, 2:4] = 1.0
    loss = soft_dice_loss(m.clone(), m, smooth=1.0)
    assert loss.item() <= 1.0 / (2 * 4 + 1)
    assert loss.item() == pytest.approx(0.0, abs=1e-7)


def test_dice_disjoint_hand_value():
    p = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
    m = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
    p[0, 0, 0, :4] = 1.0
    m[0, 0, 3, :4] = 1.0
    loss = soft_dice_loss(p, m, smooth=1.0)
    assert loss.item() == pytest.approx(1.0 - 1.0 / 9.0, rel=1e-9)  # 0.8889


def test_dice_vacuous_agreement_zero():
    z = torch.zeros(1, 1, 4, 4)
    assert soft_dice_loss(z, z, smooth=1.0).item() == 0.0


def test_dice_invalid_smooth():
    z = torch.zeros(1, 1, 4, 4)
    with pytest.raises(ValueError, match="smooth"):
        soft_dice_loss(z, z, smooth=0.0)


# ---------------------------------------------------------------------------
# compound
# ---------------------------------------------------------------------------

def _seg_fixture():
    g = torch.Generator().manual_seed(5)
    p = torch.rand(2, 1, 8, 8, generator=g, dtype=torch.float64)
    m = (torch.rand(2, 1, 8, 8, generator=g, dtype=torch.float64) > 0.6).double()
    return p, m


def test_compound_endpoints():
    p, m = _seg_fixture()
    only_dice = compound_seg_loss(p, m, LossConfig(compound_weights=(1.0, 0.0)))
    only_bce = compound_seg_loss(p, m, LossConfig(compound_weights=(0.0, 1.0)))
    assert only_dice.item() == pytest.approx(soft_dice_loss(p, m, 1.0).item(), rel=1e-12)
    assert only_bce.item() == pytest.approx(bce(p, m).item(), rel=1e-12)


def test_compound_even_weights_average_components():
    p, m = _seg_fixture()
    combined = compound_seg_loss(p, m, LossConfig(compound_weights=(0.5, 0.5)))
    expected = 0.5 * soft_dice_loss(p, m, 1.0).item() + 0.5 * bce(p, m).item()
    assert abs(combined.item() - expected) < 1e-9


def test_compound_unnormalized_weights_warn():
    p, m = _seg_fixture()
    with pytest.warns(UserWarning, match="normaliz"):
        v = compound_seg_loss(p, m, LossConfig(compound_weights=(1.0, 1.0)))
    ref = compound_seg_loss(p, m, LossConfig(compound_weights=(0.5, 0.5)))
    assert v.item() == pytest.approx(ref.item(), rel=1e-12)


# ---------------------------------------------------------------------------
# masked multi-label bce
# ---------------------------------------------------------------------------

def test_masked_bce_single_confident_entry():
    logits = torch.tensor([[8.0, 0.0, 0.0]])
    targets = torch.tensor([[1.0, 0.0, 0.0]])
    known = torch.tensor([[True, False, False]])
    assert masked_multilabel_bce(logits, targets, known).item() < 1e-3


def test_masked_bce_equals_plain_bce_when_all_known():
    g = torch.Generator().manual_seed(2)
    logits = torch.randn(4, 3, generator=g, dtype=torch.float64)
    targets = torch.randint(0, 2, (4, 3)).double()
    known = torch.ones(4, 3, dtype=torch.bool)
    masked = masked_multilabel_bce(logits, targets, known)
    plain = bce(torch.sigmoid(logits), targets)
    assert masked.item() == pytest.approx(plain.item(), rel=1e-9)


def test_masked_bce_unknown_removes_gradient():
    logits = torch.randn(2, 3, dtype=torch.float64, requires_grad=True)
    targets = torch.ones(2, 3, dtype=torch.float64)
    known = torch.tensor([[True, False, True], [True, True, False]])
    masked_multilabel_bce(logits, targets, known).backward()
    assert logits.grad[0, 1] == 0.0
    assert logits.grad[1, 2] == 0.0
    assert logits.grad[0, 0] != 0.0


def test_masked_bce_all_unknown_errors():
    with pytest.raises(ValueError, match="unknown"):
        masked_multilabel_bce(torch.zeros(2, 3), torch.zeros(2, 3), torch.zeros(2, 3, dtype=torch.bool))


# ---------------------------------------------------------------------------
# gradients vs finite differences (64-bit)
# ---------------------------------------------------------------------------

def _rand_probs(n=8):
    g = torch.Generator().manual_seed(7)
    return torch.rand(n, generator=g, dtype=torch.float64) * 0.9 + 0.05


def test_bce_gradient_matches_fd():
    y = torch.tensor([1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0], dtype=torch.float64)
    assert_grad_matches_fd(lambda p: bce(p, y), _rand_probs())


def test_focal_gradient_matches_fd():
    y = torch.tensor([1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0], dtype=torch.float64)
    assert_grad_matches_fd(lambda p: focal(p, y, 2.0, 0.25), _rand_probs())


def test_dice_gradient_matches_fd():
    g = torch.Generator().manual_seed(9)
    m = (torch.rand(2, 1, 2, 2, generator=g) > 0.5).double()
    p0 = torch.rand(2, 1, 2, 2, generator=g, dtype=torch.float64) * 0.9 + 0.05
    assert_grad_matches_fd(lambda p: soft_dice_loss(p, m, 1.0), p0)


def test_compound_gradient_matches_fd():
    g = torch.Generator().manual_seed(11)
    m = (torch.rand(2, 1, 2, 2, generator=g) > 0.5).double()
    p0 = torch.rand(2, 1, 2, 2, generator=g, dtype=torch.float64) * 0.9 + 0.05
    cfg = LossConfig()
    assert_grad_matches_fd(lambda p: compound_seg_loss(p, m, cfg), p0)


def test_masked_bce_gradient_matches_fd():
    g = torch.Generator().manual_seed(13)
    targets = torch.randint(0, 2, (3, 3)).double()
    known = torch.rand(3, 3, generator=g) > 0.3
    known[0, 0] = True
    z0 = torch.randn(3, 3, generator=g, dtype=torch.float64)
    assert_grad_matches_fd(lambda z: masked_multilabel_bce(z, targets, known), z0)


# ---------------------------------------------------------------------------
# misc properties
# ---------------------------------------------------------------------------

def test_all_losses_nonnegative(rng):
    p = torch.from_numpy(rng.uniform(0.01, 0.99, 16))
    y = torch.from_numpy(rng.integers(0, 2, 16).astype(float))
    assert bce(p, y).item() >= 0
    assert focal(p, y).item() >= 0
    pm = p.reshape(1, 1, 4, 4)
    ym = y.reshape(1, 1, 4, 4)
    assert soft_dice_loss(pm, ym).item() >= 0
    assert compound_seg_loss(pm, ym, LossConfig()).item() >= 0


def test_classification_loss_modes():
    p = torch.tensor([0.7, 0.2], dtype=torch.float64)
    y = torch.tensor([1.0, 0.0], dtype=torch.float64)
    f = classification_loss(p, y, LossConfig(classification_mode="focal"))
    b = classification_loss(p, y, LossConfig(classification_mode="bce"))
    both = classification_loss(p, y, LossConfig(classification_mode="focal+bce"))
    assert both.item() == pytest.approx(f.item() + b.item(), rel=1e-12)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(focal_gamma=-1)
    with pytest.raises(ValueError):
        LossConfig(dice_smooth=0)
    with pytest.raises(ValueError):
        LossConfig(reduction="median")
