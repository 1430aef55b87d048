"""IoU versus NWD versus SAFit for a one-pixel shift at different object sizes.

Run: python demos/metrics_demo.py
"""
import json
from pathlib import Path

import numpy as np

from tinydet import metrics

C = 12.0
print(f"{'side':>5} {'IoU':>6} {'NWD':>6} {'SAFit':>6}")
for side in (2, 4, 8, 16, 32, 64):
    gt = np.array([10.0, 10.0, 10.0 + side, 10.0 + side])
    pred = gt + np.array([1.0, 1.0, 1.0, 1.0])
    print(f"{side:>5} {float(metrics.iou(pred, gt)):>6.3f} {float(metrics.nwd(pred, gt, C)):>6.3f} "
          f"{float(metrics.safit(pred, gt, C)):>6.3f}")

data = Path(__file__).resolve().parent.parent / "tests" / "data"
rep = metrics.evaluate(metrics.load_detections(data / "dets.json"),
                       metrics.load_ground_truth(data / "gt.json"))
print(json.dumps(rep.to_dict(), indent=2))
