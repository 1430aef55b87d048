"""A desk-scale single-level detector wiring stem, backbone, SPPF, GRM and CSHA.

    image -> stem (/2) -> backbone -> P3 (/8), P4 (/16), P5 (/32)
    P5 -> [GRM] -> SPPF -> [GRM]          (position per config)
    P4' = CSHA(P3, P4, P5')               (optional)
    merged = P4' + up2(lateral(P5'))
    head(merged) -> (objectness, tx, ty, tw, th) per stride-16 cell
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import core, grm, rhwd
from .core import ConfigError
from .csha import CshaConfig, csha_backward, csha_forward, init_csha

HEAD_STRIDE = 16
HEAD_CHANNELS = 5


@dataclass(frozen=True)
class DetectorConfig:
    stem: str = "rhwd"  # rhwd | largekernel | focus
    grm: str = "grm"  # none | plain_mhsa | grm
    grm_position: str = "after_sppf"  # before_sppf | after_sppf
    csha: bool = True
    loss: str = "iou_plus_center"  # iou_only | iou_plus_center
    widths: tuple[int, int, int, int] = (8, 16, 32, 32)  # stem, P3, P4, P5
    image_size: int = 64
    in_channels: int = 3
    grm_heads: int = 8
    csha_heads: int = 8
    csha_points: int = 4
    csha_d_model: int = 32
    alpha1: float = 0.5
    alpha2: float = 0.5
    C: float | None = None  # None: mean sqrt(w*h) of the training boxes
    zero_overlap_init: bool = False

    def __post_init__(self):
        choices = {"stem": ("rhwd", "largekernel", "focus"),
                   "grm": ("none", "plain_mhsa", "grm"),
                   "grm_position": ("before_sppf", "after_sppf"),
                   "loss": ("iou_only", "iou_plus_center")}
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name}={getattr(self, name)!r} not in {allowed}")
        if self.image_size % 32:
            raise ConfigError(f"image_size {self.image_size} must be divisible by 32")
        if len(self.widths) != 4 or min(self.widths) < 1:
            raise ConfigError(f"widths must be four positive ints, got {self.widths}")
        if self.grm != "none" and self.widths[3] % self.grm_heads:
            raise ConfigError(f"P5 width {self.widths[3]} not divisible by {self.grm_heads} heads")
        if self.widths[3] % 2:
            raise ConfigError("P5 width must be even (SPPF halves it)")

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        d = dict(d)
        if "widths" in d:
            d["widths"] = tuple(d["widths"])
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def table3_configs(**overrides) -> dict[str, DetectorConfig]:
    """The progressive ablation ladder, baseline first."""
    base = dict(stem="largekernel", grm="none", csha=False, loss="iou_only")
    rows = {
        "baseline": base,
        "+rhwd": {**base, "stem": "rhwd"},
        "+grm": {**base, "stem": "rhwd", "grm": "grm"},
        "+csha": {**base, "stem": "rhwd", "grm": "grm", "csha": True},
        "+center_loss": {**base, "stem": "rhwd", "grm": "grm", "csha": True,
                         "loss": "iou_plus_center"},
    }
    return {k: DetectorConfig(**{**v, **overrides}) for k, v in rows.items()}


def ablation_configs(**overrides) -> dict[str, DetectorConfig]:
    """Every ablation row: the ladder plus stem, attention and placement variants."""
    out = dict(table3_configs(**overrides))
    full = DetectorConfig(**overrides)
    for stem in ("largekernel", "focus", "rhwd"):
        out[f"stem={stem}"] = dataclasses.replace(full, stem=stem, grm="none", csha=False,
                                                  loss="iou_only")
    for variant in ("none", "plain_mhsa", "grm"):
        out[f"attention={variant}"] = dataclasses.replace(full, grm=variant, csha=False,
                                                          loss="iou_only")
    for pos in ("before_sppf", "after_sppf"):
        out[f"grm_position={pos}"] = dataclasses.replace(full, grm_position=pos, csha=False,
                                                         loss="iou_only")
    return out


# ---------------------------------------------------------------------------


def _bn_state(c):
    return {"mean": np.zeros(c, dtype=core.DTYPE), "var": np.ones(c, dtype=core.DTYPE)}


# (name, in-width index, out-width index, kernel, stride, padding); index 0 is the stem width
BACKBONE = (
    ("b3.0", 0, 1, 4, 2, 1),
    ("b3.1", 1, 1, 4, 2, 1),
    ("b4.0", 1, 2, 4, 2, 1),
    ("b4.1", 2, 2, 3, 1, 1),
    ("b5.0", 2, 3, 4, 2, 1),
    ("b5.1", 3, 3, 3, 1, 1),
)


@dataclass
class Detector:
    cfg: DetectorConfig
    params: dict = field(default_factory=dict)
    state: dict = field(default_factory=dict)

    @classmethod
    def build(cls, cfg: DetectorConfig, seed: int = 0) -> "Detector":
        rng = np.random.default_rng(seed)
        w0, w3, w4, w5 = cfg.widths
        p, state = rhwd.init_stem(rng, cfg.stem, cfg.in_channels, w0)
        for name, i, o, k, _, _ in BACKBONE:
            p[name + ".w"] = core.init_conv(rng, cfg.widths[o], cfg.widths[i], k)
            p[name + ".gamma"] = np.ones(cfg.widths[o], dtype=core.DTYPE)
            p[name + ".beta"] = np.zeros(cfg.widths[o], dtype=core.DTYPE)
            state[name] = _bn_state(cfg.widths[o])
        hid = w5 // 2
        p["sppf.cv1.w"] = core.init_conv(rng, hid, w5, 1)
        p["sppf.cv1.b"] = np.zeros(hid, dtype=core.DTYPE)
        p["sppf.cv2.w"] = core.init_conv(rng, w5, 4 * hid, 1)
        p["sppf.cv2.b"] = np.zeros(w5, dtype=core.DTYPE)
        if cfg.grm != "none":
            tokens = (cfg.image_size // 32) ** 2
            p.update(grm.init_grm(rng, w5, tokens, cfg.grm_heads, cfg.grm))
        if cfg.csha:
            p.update(init_csha(rng, cls._csha_cfg(cfg)))
        p["lateral.w"] = core.init_conv(rng, w4, w5, 1)
        p["lateral.b"] = np.zeros(w4, dtype=core.DTYPE)
        p["head.0.w"] = core.init_conv(rng, w4, w4, 3)
        p["head.0.b"] = np.zeros(w4, dtype=core.DTYPE)
        p["head.1.w"] = core.init_conv(rng, HEAD_CHANNELS, w4, 1)
        p["head.1.b"] = np.zeros(HEAD_CHANNELS, dtype=core.DTYPE)
        if cfg.zero_overlap_init:
            # tiny boxes pinned near each cell's top-left corner
            p["head.1.w"][1:] = 0.0
            p["head.1.b"][1:] = (-4.0, -4.0, np.log(1 / HEAD_STRIDE), np.log(1 / HEAD_STRIDE))
        return cls(cfg, p, state)

    @staticmethod
    def _csha_cfg(cfg: DetectorConfig) -> CshaConfig:
        return CshaConfig(channels=tuple(cfg.widths[1:]), d_model=cfg.csha_d_model,
                          heads=cfg.csha_heads, points=cfg.csha_points)

    @property
    def csha_cfg(self) -> CshaConfig:
        return self._csha_cfg(self.cfg)

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    # -- forward / backward -------------------------------------------------

    def forward(self, x, mode: str = "train"):
        """Head map (B, 5, S/16, S/16) and the cache for :meth:`backward`."""
        cfg, p = self.cfg, self.params
        if x.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise ConfigError(f"expected input (B, {cfg.in_channels}, {cfg.image_size}, "
                              f"{cfg.image_size}), got {x.shape}")
        caches = {}
        fwd, _ = rhwd.STEMS[cfg.stem]
        h, caches["stem"] = fwd(x, p, self.state, mode)
        feats = {}
        for name, _, _, k, s, pad in BACKBONE:
            h, caches[name] = rhwd.cbs_forward(h, p[name + ".w"], p[name + ".gamma"],
                                               p[name + ".beta"], s, pad, mode, self.state[name])
            feats[name] = h
        p3, p4, p5 = feats["b3.1"], feats["b4.1"], feats["b5.1"]
        caches["pyramid"] = (p3.shape, p4.shape, p5.shape)

        if cfg.grm != "none" and cfg.grm_position == "before_sppf":
            p5, caches["grm"] = grm.grm_forward(p5, p, cfg.grm_heads, cfg.grm)
        p5, caches["sppf"] = sppf_forward(p5, p)
        if cfg.grm != "none" and cfg.grm_position == "after_sppf":
            p5, caches["grm"] = grm.grm_forward(p5, p, cfg.grm_heads, cfg.grm)

        if cfg.csha:
            p4, caches["csha"] = csha_forward(p3, p4, p5, p, self.csha_cfg)
        lat, caches["lateral"] = core.conv2d_forward(p5, p["lateral.w"], p["lateral.b"])
        merged = p4 + core.upsample_nearest(lat, 2)
        y, caches["head.0"] = core.conv2d_forward(merged, p["head.0.w"], p["head.0.b"], 1, 1)
        y, caches["head.act"] = core.silu_forward(y)
        out, caches["head.1"] = core.conv2d_forward(y, p["head.1.w"], p["head.1.b"])
        return out, caches

    def backward(self, dout, caches) -> dict:
        cfg, p = self.cfg, self.params
        grads = {}

        def conv_back(name, d):
            g = core.conv2d_backward(d, caches[name])
            grads[name + ".w"], grads[name + ".b"] = g["w"], g["b"]
            return g["x"]

        dy = conv_back("head.1", dout)
        dy = core.silu_backward(dy, caches["head.act"])["x"]
        dmerged = conv_back("head.0", dy)
        dp5 = conv_back("lateral", core.upsample_nearest_backward(dmerged, 2))
        dp4 = dmerged
        dp3 = None
        if cfg.csha:
            (dp3, dp4, d5), g = csha_backward(dp4, caches["csha"], p)
            grads.update(g)
            dp5 = dp5 + d5
        if cfg.grm != "none" and cfg.grm_position == "after_sppf":
            dp5, g = grm.grm_backward(dp5, caches["grm"], p)
            grads.update(g)
        dp5, g = sppf_backward(dp5, caches["sppf"])
        grads.update(g)
        if cfg.grm != "none" and cfg.grm_position == "before_sppf":
            dp5, g = grm.grm_backward(dp5, caches["grm"], p)
            grads.update(g)

        taps = {"b5.1": dp5, "b4.1": dp4, "b3.1": dp3}
        dh = None
        for name, *_ in reversed(BACKBONE):
            tap = taps.get(name)
            if tap is not None:
                dh = tap if dh is None else dh + tap
            g = rhwd.cbs_backward(dh, caches[name])
            grads[name + ".w"], grads[name + ".gamma"], grads[name + ".beta"] = (
                g["w"], g["gamma"], g["beta"])
            dh = g["x"]
        _, back = rhwd.STEMS[cfg.stem]
        _, g = back(dh, caches["stem"])
        grads.update(g)
        return grads


# ---------------------------------------------------------------------------
# SPPF


def sppf_forward(x, params, prefix="sppf."):
    """1x1 reduce, three chained 5x5 max-pools, concat, 1x1 expand (SiLU after each conv)."""
    y, c1 = core.conv2d_forward(x, params[prefix + "cv1.w"], params[prefix + "cv1.b"])
    y, a1 = core.silu_forward(y)
    pools, pcaches = [y], []
    for _ in range(3):
        z, c = core.max_pool_forward(pools[-1], 5, 1, 2)
        pools.append(z)
        pcaches.append(c)
    cat = np.concatenate(pools, axis=1)
    out, c2 = core.conv2d_forward(cat, params[prefix + "cv2.w"], params[prefix + "cv2.b"])
    out, a2 = core.silu_forward(out)
    return out, (c1, a1, pcaches, c2, a2, prefix)


def sppf_backward(dout, cache):
    c1, a1, pcaches, c2, a2, prefix = cache
    d = core.silu_backward(dout, a2)["x"]
    g2 = core.conv2d_backward(d, c2)
    parts = np.split(g2["x"], 4, axis=1)
    d = parts[3]
    for i in (2, 1, 0):
        d = core.max_pool_backward(d, pcaches[i])["x"] + parts[i]
    d = core.silu_backward(d, a1)["x"]
    g1 = core.conv2d_backward(d, c1)
    return g1["x"], {prefix + "cv1.w": g1["w"], prefix + "cv1.b": g1["b"],
                     prefix + "cv2.w": g2["w"], prefix + "cv2.b": g2["b"]}
