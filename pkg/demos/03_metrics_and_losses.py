"""Metrics and losses on hand-made masks.

    python3 demos/03_metrics_and_losses.py
"""
import numpy as np
import torch

from mambacafu import bce_loss, combined_loss, dice_loss, dsc, hd95, iou, segmentation_report

gt = np.zeros((32, 32), np.int64)
gt[8:20, 8:20] = 1
gt[22:28, 4:30] = 2
pred = np.roll(gt, shift=2, axis=1)  # same shapes, shifted two pixels right

for c in (1, 2):
    a, b = pred == c, gt == c
    print(f"class {c}: dsc {dsc(a, b):.3f}  iou {iou(a, b):.3f}  hd95 {hd95(a, b):.2f}")

# Single points three and four pixels apart: distance 5 both ways.
p, q = np.zeros((8, 8), bool), np.zeros((8, 8), bool)
p[0, 0], q[3, 4] = True, True
print("hd95 of two points:", hd95(p, q))

report = segmentation_report(pred, gt, num_classes=3)
print(report.to_json())

# A missing class has no boundary to measure: hd95 is NaN and the class is reported as skipped.
print("skipped:", segmentation_report(np.zeros_like(gt), gt, num_classes=3).skipped_classes)

target = torch.from_numpy(gt)[None]
logits = 20.0 * (torch.nn.functional.one_hot(target, 3).permute(0, 3, 1, 2).float() * 2 - 1)
print(f"perfect logits: dice {dice_loss(logits, target):.2e}, bce {bce_loss(logits, target):.2e}")
noisy = logits * 0.05 + torch.randn_like(logits)
for alpha in (0.0, 0.6, 1.0):
    print(f"alpha={alpha}: combined loss {combined_loss(noisy, target, alpha):.4f}")
