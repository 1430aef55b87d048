"""Global relation modelling on P5 and the sparse cross-scale sampler.

Run: python demos/attention_blocks.py
"""
import numpy as np

from tinydet import csha, grm

rng = np.random.default_rng(1)

p5 = rng.standard_normal((1, 32, 4, 4))
params = grm.init_grm(rng, 32, 16, 8)
seq, _ = grm.flatten_with_pos_forward(p5, params)
A = grm.attention_weights(seq, params, 8)
print("attention per head:", A.shape, "row sums within", float(np.abs(A.sum(-1) - 1).max()))
out, _ = grm.grm_forward(p5, params, 8)
print("GRM keeps the shape:", out.shape, "mean |change|", float(np.abs(out - p5).mean()))

cfg = csha.CshaConfig(channels=(16, 32, 32), d_model=32, heads=8, points=4)
p = csha.init_csha(rng, cfg)
p3, p4, p5 = (rng.standard_normal((1, c, s, s)) for c, s in zip(cfg.channels, (16, 8, 4)))
fused, cache = csha.csha_forward(p3, p4, p5, p, cfg)
print("CSHA output:", fused.shape, "(same as P4", p4.shape, ")")

ref = csha.reference_points(8, 8)
print("first reference points:", ref[:3].tolist())
print("initial sampling offsets of head 0:", np.round(csha.radial_offset_bias(8, 4)[0], 3).tolist())
