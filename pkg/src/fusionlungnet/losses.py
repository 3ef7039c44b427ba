"""Hybrid segmentation loss: focal + windowed SSIM + soft IoU, summed over
the primary and the four deep-supervision outputs."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

FOCAL_EPS = 1e-7
IOU_EPS = 1e-6


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.3  # focal
    lambda2: float = 0.4  # ssim
    lambda3: float = 0.3  # iou
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    ssim_c1: float = 0.01**2
    ssim_c2: float = 0.03**2
    ssim_window: int = 11
    supplementary_weight: float = 1.0

    def __post_init__(self):
        lams = (self.lambda1, self.lambda2, self.lambda3)
        if min(lams) < 0 or sum(lams) <= 0:
            raise ValueError(f"lambda weights must be >= 0 with a positive sum, got {lams}")
        if not 0 < self.focal_alpha < 1:
            raise ValueError("focal_alpha must lie in (0, 1)")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ValueError("ssim_window must be odd")

    def combine(self, focal, ssim, iou):
        """lambda-weighted sum of the three component losses."""
        return self.lambda1 * focal + self.lambda2 * ssim + self.lambda3 * iou


@dataclass
class LossBreakdown:
    """Scalar tensors; ``hybrid`` (or ``total``) is differentiable."""

    focal: torch.Tensor
    ssim: torch.Tensor
    iou: torch.Tensor
    hybrid: torch.Tensor
    primary: torch.Tensor | None = None
    supplementary: list[torch.Tensor] = field(default_factory=list)
    total: torch.Tensor | None = None

    def row(self) -> dict[str, float]:
        """Flat float record for the step log."""
        out = {"focal": self.focal.item(), "ssim": self.ssim.item(), "iou": self.iou.item()}
        out["primary"] = (self.primary if self.primary is not None else self.hybrid).item()
        for n in range(4):
            out[f"sup{n + 1}"] = self.supplementary[n].item() if n < len(self.supplementary) else float("nan")
        out["total"] = (self.total if self.total is not None else self.hybrid).item()
        return out


def _as_4d(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x[:, None]
    return x


def _check(pred, target):
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    return _as_4d(pred), _as_4d(target).to(pred.dtype)


def focal_loss(pred, target, alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Pixel-mean binary focal loss on probabilities."""
    pred, target = _check(pred, target)
    p = pred.clamp(FOCAL_EPS, 1 - FOCAL_EPS)
    pos = -alpha * (1 - p) ** gamma * torch.log(p)
    neg = -(1 - alpha) * p**gamma * torch.log1p(-p)
    return torch.where(target > 0.5, pos, neg).mean()


def effective_window(window: int, height: int, width: int) -> int:
    """Largest odd window no bigger than ``window`` that fits the map."""
    win = min(window, height, width)
    return win if win % 2 else win - 1


def _window_sums(x: torch.Tensor, win: int, dim: int) -> torch.Tensor:
    c = torch.cumsum(x, dim)
    head = c.narrow(dim, win - 1, 1)
    return torch.cat([head, c.narrow(dim, win, c.shape[dim] - win) - c.narrow(dim, 0, c.shape[dim] - win)], dim)


def box_mean(x: torch.Tensor, win: int) -> torch.Tensor:
    """Mean over every valid ``win x win`` window (stride 1).

    Running sums make this O(1) per pixel. They are accumulated in the input
    dtype; for float32 maps in [0, 1] the rounding error stays near 1e-6,
    well under the SSIM stabilisers.
    """
    return _window_sums(_window_sums(x, win, -2), win, -1) / (win * win)


def ssim_map(pred, target, c1: float = 0.01**2, c2: float = 0.03**2, window: int = 11) -> torch.Tensor:
    """Local SSIM over every valid ``window x window`` patch (uniform weights, stride 1)."""
    pred, target = _check(pred, target)
    win = effective_window(window, *pred.shape[-2:])
    # one separable box filter over all five moment maps
    stacked = torch.cat([pred, target, pred * pred, target * target, pred * target], dim=1)
    pooled = box_mean(stacked, win)
    mu_x, mu_y, xx, yy, xy = pooled.chunk(5, dim=1)
    var_x = xx - mu_x * mu_x
    var_y = yy - mu_y * mu_y
    cov = xy - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return num / den


def ssim_loss(pred, target, c1: float = 0.01**2, c2: float = 0.03**2, window: int = 11) -> torch.Tensor:
    return 1 - ssim_map(pred, target, c1, c2, window).mean()


def iou_loss(pred, target) -> torch.Tensor:
    """1 - soft IoU, computed per sample and averaged over the batch."""
    pred, target = _check(pred, target)
    p = pred.flatten(1)
    t = target.flatten(1)
    inter = (p * t).sum(1)
    union = p.sum(1) + t.sum(1) - inter
    return (1 - inter / (union + IOU_EPS)).mean()


def hybrid_loss(pred, target, w: LossWeights = LossWeights()) -> LossBreakdown:
    focal = focal_loss(pred, target, w.focal_alpha, w.focal_gamma)
    ssim = ssim_loss(pred, target, w.ssim_c1, w.ssim_c2, w.ssim_window)
    iou = iou_loss(pred, target)
    hybrid = w.combine(focal, ssim, iou)
    return LossBreakdown(focal=focal, ssim=ssim, iou=iou, hybrid=hybrid)


def total_loss(outputs, target, w: LossWeights = LossWeights()) -> LossBreakdown:
    """Primary hybrid loss plus the hybrid loss of every supplementary map.

    ``outputs`` is a :class:`~fusionlungnet.network.SegmentationOutput`; its
    supplementary list may be empty (inference-mode forward), in which case
    the total is the primary term alone.
    """
    target = _as_4d(target)
    prim = hybrid_loss(outputs.primary, target, w)
    sup = [hybrid_loss(m, target, w).hybrid for m in outputs.supplementary]
    total = prim.hybrid
    if sup:
        total = total + w.supplementary_weight * torch.stack(sup).sum()
    prim.primary = prim.hybrid
    prim.supplementary = sup
    prim.total = total
    return prim
