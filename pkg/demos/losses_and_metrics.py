"""
Hybrid loss and pixel metrics on toy maps
=========================================

How the three loss terms react to a prediction getting better, and how the
six table metrics are read off a confusion matrix.
"""
import numpy as np
import torch

from fusionlungnet.losses import LossWeights, hybrid_loss
from fusionlungnet.metrics import ConfusionCounts, compute_metrics, confusion, format_table

# a 64x64 target disk
yy, xx = np.mgrid[0:64, 0:64]
target = torch.as_tensor(((yy - 32) ** 2 + (xx - 30) ** 2 < 15**2).astype(np.float32))

# blend from a blurry guess toward the target; every term should fall
w = LossWeights()  # lambda = (0.3, 0.4, 0.3)
guess = torch.full_like(target, 0.5)
for t in (0.0, 0.5, 0.9, 1.0):
    pred = (1 - t) * guess + t * target
    b = hybrid_loss(pred, target, w)
    print(f"t={t:.1f}  focal {b.focal.item():.4f}  ssim {b.ssim.item():.4f}  "
          f"iou {b.iou.item():.4f}  hybrid {b.hybrid.item():.4f}")

# the weighted sum itself is plain arithmetic
print("0.3*0.1 + 0.4*0.2 + 0.3*0.3 =", w.combine(0.1, 0.2, 0.3))

# metrics from counts: 3 TP, 1 FP, 1 FN, 5 TN
report = compute_metrics(ConfusionCounts(3, 1, 1, 5))
print(format_table([("worked example", report)]))
print("MCC =", report.mcc, "= 14/24")

# and from maps: a prediction shifted two pixels off the target
shifted = torch.roll(target, 2, dims=1)
print(format_table([("shifted disk", compute_metrics(confusion(shifted, target)))]))
