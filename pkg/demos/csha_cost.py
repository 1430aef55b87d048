"""How the sparse sampler's cost grows with input size, next to dense attention.

Run: python demos/csha_cost.py
"""
from tinydet import csha
from tinydet.detector import Detector, DetectorConfig

print(f"{'image':>6} {'sparse':>12} {'dense':>14} {'ratio':>7}")
for size in (32, 64, 128, 256, 512):
    cfg = Detector.build(DetectorConfig(image_size=size)).csha_cfg
    ext = [(size // 8,) * 2, (size // 16,) * 2, (size // 32,) * 2]
    s, d = csha.sparse_flops(ext, cfg), csha.dense_flops(ext, cfg)
    print(f"{size:>6} {s:>12,} {d:>14,} {s / d:>7.3f}")
