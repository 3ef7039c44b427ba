import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fusionlungnet.losses import (
    LossWeights,
    ShapeMismatch,
    focal_loss,
    hybrid_loss,
    iou_loss,
    ssim_loss,
    total_loss,
)
from fusionlungnet.network import SegmentationOutput


def t(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


# ---- independent numpy oracles -------------------------------------------

def focal_oracle(pred, target, alpha, gamma, eps=1e-7):
    total = 0.0
    for p, y in zip(np.ravel(pred), np.ravel(target)):
        p = min(max(p, eps), 1 - eps)
        if y == 1:
            total += -alpha * (1 - p) ** gamma * math.log(p)
        else:
            total += -(1 - alpha) * p**gamma * math.log(1 - p)
    return total / np.size(pred)


def bce_oracle(pred, target, eps=1e-7):
    p = np.clip(np.ravel(pred), eps, 1 - eps)
    y = np.ravel(target)
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))


def ssim_oracle(x, y, c1, c2, window):
    h, w = x.shape
    vals = []
    for i in range(h - window + 1):
        for j in range(w - window + 1):
            px = x[i : i + window, j : j + window].ravel()
            py = y[i : i + window, j : j + window].ravel()
            mx, my = px.mean(), py.mean()
            vx = ((px - mx) ** 2).mean()
            vy = ((py - my) ** 2).mean()
            cxy = ((px - mx) * (py - my)).mean()
            vals.append((2 * mx * my + c1) * (2 * cxy + c2) / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return 1 - float(np.mean(vals))


def iou_oracle(pred, target, eps=1e-6):
    inter = float(np.sum(pred * target))
    return 1 - inter / (float(np.sum(pred) + np.sum(target)) - inter + eps)


# ---- focal ------------------------------------------------------------------

def test_focal_single_pixel():
    value = focal_loss(t([[0.9]]), t([[1.0]]), alpha=0.25, gamma=2.0)
    assert float(value) == pytest.approx(0.25 * 0.1**2 * -math.log(0.9), abs=1e-12)
    assert float(value) == pytest.approx(2.634e-4, abs=1e-7)


def test_focal_perfect():
    target = t(np.random.default_rng(0).integers(0, 2, (8, 8)))
    assert float(focal_loss(target.clone(), target)) < 1e-6


def test_focal_reduces_to_half_bce():
    rng = np.random.default_rng(1)
    pred, target = rng.random((16, 16)), rng.integers(0, 2, (16, 16))
    value = float(focal_loss(t(pred), t(target), alpha=0.5, gamma=0.0))
    assert value == pytest.approx(0.5 * bce_oracle(pred, target), rel=1e-12)


@pytest.mark.parametrize("alpha,gamma", [(0.25, 2.0), (0.7, 0.5), (0.5, 3.0)])
def test_focal_matches_oracle(alpha, gamma):
    rng = np.random.default_rng(2)
    pred, target = rng.random((10, 12)), rng.integers(0, 2, (10, 12))
    assert float(focal_loss(t(pred), t(target), alpha, gamma)) == pytest.approx(
        focal_oracle(pred, target, alpha, gamma), rel=1e-12)


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        focal_loss(t(np.zeros((4, 4))), t(np.zeros((4, 5))))
    with pytest.raises(ShapeMismatch):
        ssim_loss(t(np.zeros((4, 4))), t(np.zeros((5, 4))))
    with pytest.raises(ShapeMismatch):
        iou_loss(t(np.zeros((4, 4))), t(np.zeros((1, 4, 4))))


# ---- ssim -------------------------------------------------------------------

def test_ssim_identical():
    x = t(np.random.default_rng(3).random((20, 20)))
    assert abs(float(ssim_loss(x, x.clone()))) < 1e-6


@pytest.mark.parametrize("a,b", [(0.2, 0.7), (0.5, 0.5), (0.0, 1.0)])
def test_ssim_constants(a, b):
    c1, c2 = 0.01**2, 0.03**2
    value = float(ssim_loss(t(np.full((12, 12), a)), t(np.full((12, 12), b)), c1, c2, 5))
    assert value == pytest.approx(1 - (2 * a * b + c1) / (a * a + b * b + c1), abs=1e-9)


def test_ssim_matches_sliding_window_oracle():
    rng = np.random.default_rng(4)
    x, y = rng.random((11, 11)), rng.integers(0, 2, (11, 11)).astype(float)
    for window in (3, 5, 11):
        assert float(ssim_loss(t(x), t(y), window=window)) == pytest.approx(
            ssim_oracle(x, y, 0.01**2, 0.03**2, window), abs=1e-12)


def test_ssim_window_clipped_to_map():
    rng = np.random.default_rng(5)
    x, y = rng.random((8, 8)), rng.random((8, 8))
    # 11 does not fit an 8x8 map; the largest odd window that does is 7
    assert float(ssim_loss(t(x), t(y), window=11)) == pytest.approx(ssim_oracle(x, y, 1e-4, 9e-4, 7), abs=1e-12)


# ---- iou --------------------------------------------------------------------

def test_iou_exact_match():
    target = np.zeros((8, 8))
    target[2:5, 3:7] = 1
    assert float(iou_loss(t(target), t(target))) == pytest.approx(0.0, abs=1e-6)


def test_iou_half_mask():
    n = 64
    target = np.zeros(n)
    target[: n // 2] = 1
    value = float(iou_loss(t(np.full((8, 8), 0.5)), t(target.reshape(8, 8))))
    # soft IoU (N/4) / (N/2 + N/2 - N/4) = 1/3, up to the epsilon in the denominator
    assert value == pytest.approx(2 / 3, abs=1e-8)
    assert value == pytest.approx(iou_oracle(np.full(n, 0.5), target), abs=1e-15)


def test_iou_empty_prediction():
    target = np.zeros((6, 6))
    target[0, :3] = 1
    assert float(iou_loss(t(np.zeros((6, 6))), t(target))) == pytest.approx(1.0, abs=1e-12)


def test_iou_batch_is_per_sample_mean():
    rng = np.random.default_rng(6)
    pred, target = rng.random((3, 1, 6, 6)), rng.integers(0, 2, (3, 1, 6, 6)).astype(float)
    expected = np.mean([iou_oracle(pred[i], target[i]) for i in range(3)])
    assert float(iou_loss(t(pred), t(target))) == pytest.approx(expected, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_component_ranges(seed):
    rng = np.random.default_rng(seed)
    pred, target = rng.random((12, 12)), rng.integers(0, 2, (12, 12)).astype(float)
    assert float(focal_loss(t(pred), t(target))) >= 0
    assert float(ssim_loss(t(pred), t(target))) >= 0
    assert 0 <= float(iou_loss(t(pred), t(target))) <= 1


# ---- hybrid / total -----------------------------------------------------------

def test_hybrid_linear_combination():
    rng = np.random.default_rng(7)
    pred, target = t(rng.random((12, 12))), t(rng.integers(0, 2, (12, 12)))
    b = hybrid_loss(pred, target)
    assert float(b.hybrid) == pytest.approx(0.3 * float(b.focal) + 0.4 * float(b.ssim) + 0.3 * float(b.iou), abs=1e-12)


def test_hybrid_worked_weights():
    w = LossWeights()
    assert (w.lambda1, w.lambda2, w.lambda3) == (0.3, 0.4, 0.3)
    assert w.combine(0.1, 0.2, 0.3) == 0.20


def test_hybrid_basis_weight_is_focal():
    rng = np.random.default_rng(8)
    pred, target = t(rng.random((12, 12))), t(rng.integers(0, 2, (12, 12)))
    b = hybrid_loss(pred, target, LossWeights(1.0, 0.0, 0.0))
    assert float(b.hybrid) == float(b.focal)


def test_hybrid_perfect_is_zero():
    target = np.zeros((16, 16))
    target[4:10, 3:12] = 1
    assert float(hybrid_loss(t(target), t(target)).hybrid) == pytest.approx(0.0, abs=1e-5)


@pytest.mark.parametrize("scale", [0.5, 2.0, 7.0])
def test_hybrid_scales_with_lambda(scale):
    rng = np.random.default_rng(9)
    pred, target = t(rng.random((12, 12))), t(rng.integers(0, 2, (12, 12)))
    base = float(hybrid_loss(pred, target, LossWeights(0.3, 0.4, 0.3)).hybrid)
    scaled = float(hybrid_loss(pred, target, LossWeights(0.3 * scale, 0.4 * scale, 0.3 * scale)).hybrid)
    assert scaled == pytest.approx(scale * base, rel=1e-12)


@pytest.mark.parametrize("kwargs", [{"lambda1": -0.1}, {"lambda1": 0, "lambda2": 0, "lambda3": 0},
                                    {"focal_alpha": 1.0}, {"focal_gamma": -1}, {"ssim_window": 4}])
def test_weights_validation(kwargs):
    with pytest.raises(ValueError):
        LossWeights(**kwargs)


def _outputs(rng, shape=(2, 1, 16, 16)):
    return SegmentationOutput(t(rng.random(shape)), [t(rng.random(shape)) for _ in range(4)])


def test_total_is_sum_of_hybrids():
    rng = np.random.default_rng(10)
    out = _outputs(rng)
    target = t(rng.integers(0, 2, (2, 1, 16, 16)))
    b = total_loss(out, target)
    expected = sum(float(hybrid_loss(m, target).hybrid) for m in out.maps())
    assert float(b.total) == pytest.approx(expected, abs=1e-12)
    assert float(b.total) == pytest.approx(float(b.primary) + sum(float(s) for s in b.supplementary), abs=1e-12)


def test_total_perfect_is_zero():
    target = np.zeros((1, 1, 16, 16))
    target[..., 3:12, 4:9] = 1
    out = SegmentationOutput(t(target), [t(target) for _ in range(4)])
    assert float(total_loss(out, t(target)).total) == pytest.approx(0.0, abs=1e-4)


def test_total_only_primary_when_supplementary_perfect():
    rng = np.random.default_rng(11)
    target = t(rng.integers(0, 2, (1, 1, 16, 16)))
    out = SegmentationOutput(t(rng.random((1, 1, 16, 16))), [target.clone() for _ in range(4)])
    b = total_loss(out, target)
    assert float(b.total) == pytest.approx(float(hybrid_loss(out.primary, target).hybrid), abs=1e-5)


def test_total_zero_supplementary_weight():
    rng = np.random.default_rng(12)
    out = _outputs(rng)
    target = t(rng.integers(0, 2, (2, 1, 16, 16)))
    b = total_loss(out, target, LossWeights(supplementary_weight=0.0))
    assert float(b.total) == float(hybrid_loss(out.primary, target).hybrid)


def test_total_inference_outputs():
    rng = np.random.default_rng(13)
    target = t(rng.integers(0, 2, (1, 1, 16, 16)))
    out = SegmentationOutput(t(rng.random((1, 1, 16, 16))))
    b = total_loss(out, target)
    assert float(b.total) == float(b.primary)
    row = b.row()
    assert math.isnan(row["sup1"]) and row["total"] == float(b.primary)
