"""IoU gives no gradient between disjoint boxes; the centre term still pulls.

Run: python demos/center_loss.py
"""
import numpy as np

from tinydet import boxes as bx

gt = np.array([20.0, 20.0, 26.0, 26.0])
C = 6.0
print(f"{'dx':>4} {'IoU':>6} {'1-IoU grad':>11} {'centre loss':>12} {'combined grad':>14}")
for dx in (0, 3, 6, 9, 15, 30):
    pred = gt + np.array([dx, 0, dx, 0])
    g_iou = bx.regression_loss_grad(pred, gt, bx.RegLossConfig(alpha1=0.0, alpha2=1.0, C=C))
    g_all = bx.regression_loss_grad(pred, gt, bx.RegLossConfig(alpha1=0.5, alpha2=0.5, C=C))
    print(f"{dx:>4} {float(bx.iou(pred, gt)):>6.3f} {np.linalg.norm(g_iou):>11.4f} "
          f"{float(bx.center_assisted_loss(pred, gt, C)):>12.4f} {np.linalg.norm(g_all):>14.4f}")
