"""Train the full detector on synthetic tiny objects and score it.

Run: python demos/toy_training.py   (about half a minute)
"""
import numpy as np

from tinydet.detector import Detector, DetectorConfig
from tinydet.scenes import SceneConfig, make_dataset
from tinydet.training import mean_center_error, toy_ap50, train

data = make_dataset(200, SceneConfig(seed=0))
train_set, val = data[:180], data[180:]
model = Detector.build(DetectorConfig(), seed=0)
hist = train(model, train_set, steps=300, seed=0)
s = hist.smoothed()
print(f"smoothed loss: step 10 {s[9]:.3f} -> step 300 {s[-1]:.3f} (ratio {s[-1] / s[9]:.2f})")
print(f"wall clock {hist.wall_clock:.1f}s, C = {hist.C:.2f}")
print("held-out AP50:", toy_ap50(model, val))
print(f"held-out mean centre error: {mean_center_error(model, val):.2f}px")
