"""Haar subbands keep every pixel; a strided conv throws most of them away.

Run: python demos/wavelet_stem.py
"""
import numpy as np

from tinydet.detector import Detector, DetectorConfig
from tinydet.rhwd import haar_forward, haar_inverse

rng = np.random.default_rng(0)
img = np.full((1, 1, 8, 8), 0.5)
img[0, 0, 3, 4] = 1.0  # a one-pixel "object"

A, H, V, D = haar_forward(img)
print("approximation band:\n", np.round(A[0, 0], 3))
print("detail energy (H, V, D):", [float((b**2).sum()) for b in (H, V, D)])
print("round-trip error:", float(np.abs(haar_inverse((A, H, V, D)) - img).max()))

# the three stems all reach stride 2 with the same width
x = rng.uniform(0, 1, (1, 3, 64, 64))
for stem in ("largekernel", "focus", "rhwd"):
    model = Detector.build(DetectorConfig(stem=stem), seed=0)
    head, caches = model.forward(x, mode="infer")
    p3, p4, p5 = caches["pyramid"]
    print(f"{stem:12s} P3 {p3[2:]} P4 {p4[2:]} P5 {p5[2:]} head {head.shape}")
