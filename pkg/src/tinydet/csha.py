"""Cross-scale hybrid attention: P4 queries sample P3/P4/P5 sparsely.

Each P4 pixel owns a normalised reference point. A linear head predicts,
per attention head ``m``, level ``l`` and point ``k``, a sampling offset in
the sampled level's pixel units; a second head predicts attention weights
normalised jointly over the ``L*K`` samples of each head. Samples are read
with bilinear interpolation (zero outside the map), weighted, summed, heads
concatenated and projected back to P4's channel count, then added onto P4.

Sample location on level ``l`` for reference ``(u, v)`` is
``(u * W_l - 0.5 + dx, v * H_l - 0.5 + dy)``: with zero offset the sample
sits on the pixel centre that covers the reference point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core
from .core import ConfigError, GeometryError

LEVELS = 3


@dataclass(frozen=True)
class CshaConfig:
    channels: tuple[int, int, int]  # (C3, C4, C5)
    d_model: int = 32
    heads: int = 8
    points: int = 4

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if len(self.channels) != LEVELS:
            raise ConfigError("need channel counts for exactly three levels")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def samples(self) -> int:
        return self.heads * LEVELS * self.points


def radial_offset_bias(heads: int, points: int, radius: float = 1.0) -> np.ndarray:
    """(M, L, K, 2) offsets on a circle, rotated by pi*m/M for head m."""
    m = np.arange(heads)[:, None, None]
    k = np.arange(points)[None, None, :]
    ang = 2 * np.pi * k / points + np.pi * m / heads
    ang = np.broadcast_to(ang, (heads, LEVELS, points))
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=-1)


def init_csha(rng, cfg: CshaConfig, prefix: str = "csha."):
    D = cfg.d_model
    p = {}
    for lvl, c in zip((3, 4, 5), cfg.channels):
        p[f"{prefix}proj{lvl}.w"] = core.init_linear(rng, D, c)
        p[f"{prefix}proj{lvl}.b"] = np.zeros(D, dtype=core.DTYPE)
    p[prefix + "offset.w"] = np.zeros((cfg.samples * 2, D + 2), dtype=core.DTYPE)
    p[prefix + "offset.b"] = radial_offset_bias(cfg.heads, cfg.points).reshape(-1).astype(core.DTYPE)
    p[prefix + "attn.w"] = core.init_linear(rng, cfg.samples, D)
    p[prefix + "attn.b"] = np.zeros(cfg.samples, dtype=core.DTYPE)
    p[prefix + "out.w"] = core.init_linear(rng, cfg.channels[1], D)
    p[prefix + "out.b"] = np.zeros(cfg.channels[1], dtype=core.DTYPE)
    return p


def reference_points(h4: int, w4: int) -> np.ndarray:
    """(h4*w4, 2) pixel-centre references ``((x+0.5)/w4, (y+0.5)/h4)``, row-major."""
    y, x = np.meshgrid(np.arange(h4), np.arange(w4), indexing="ij")
    return np.stack([(x.ravel() + 0.5) / w4, (y.ravel() + 0.5) / h4], axis=-1).astype(core.DTYPE)


def check_pyramid(p3, p4, p5):
    h4, w4 = p4.shape[2:]
    for name, fm, f in (("P3", p3, 2), ("P5", p5, 0.5)):
        want = (h4 * f, w4 * f)
        if fm.shape[2:] != want:
            raise GeometryError(f"{name} extents {fm.shape[2:]} break the stride contract "
                                f"with P4 {p4.shape[2:]} (expected {want})")
    if not (p3.shape[0] == p4.shape[0] == p5.shape[0]):
        raise GeometryError("pyramid levels disagree on batch size")


def _tokens(x):
    B, C, H, W = x.shape
    return x.reshape(B, C, H * W).transpose(0, 2, 1)


def predict_offsets_weights(query, ref, params, cfg: CshaConfig, prefix="csha."):
    """Offsets (B, Nq, M, L, K, 2) and attention (B, Nq, M, L, K) from query tokens.

    The offset head sees the query feature concatenated with its reference
    point; the attention head sees the query feature only.
    """
    B, Nq, D = query.shape
    M, K = cfg.heads, cfg.points
    zin = np.concatenate([query, np.broadcast_to(ref, (B, Nq, 2))], axis=-1)
    off = core.linear(zin, params[prefix + "offset.w"], params[prefix + "offset.b"])
    logits = core.linear(query, params[prefix + "attn.w"], params[prefix + "attn.b"])
    attn = core.softmax(logits.reshape(B, Nq, M, LEVELS * K), axis=-1)
    return off.reshape(B, Nq, M, LEVELS, K, 2), attn.reshape(B, Nq, M, LEVELS, K), zin


def sample_locations(ref, offsets, extents):
    """Pixel-space sample locations (B, Nq, M, K, 2) on a level of ``extents`` (H, W)."""
    H, W = extents
    base = ref * np.array([W, H], dtype=ref.dtype) - 0.5
    return base[None, :, None, None, :] + offsets


def csha_attend_forward(p3, p4, p5, params, cfg: CshaConfig, prefix="csha."):
    """Pre-residual attention output as tokens (B, Nq, C4)."""
    levels = (p3, p4, p5)
    for lvl, fm, c in zip((3, 4, 5), levels, cfg.channels):
        if fm.shape[1] != c:
            raise ConfigError(f"P{lvl} has {fm.shape[1]} channels, configured {c}")
    B = p4.shape[0]
    h4, w4 = p4.shape[2:]
    M, K, dh = cfg.heads, cfg.points, cfg.head_dim
    proj, pcache = [], []
    for lvl, fm in zip((3, 4, 5), levels):
        t, c = core.linear_forward(_tokens(fm), params[f"{prefix}proj{lvl}.w"],
                                   params[f"{prefix}proj{lvl}.b"])
        proj.append(t)
        pcache.append(c)
    query = proj[1]
    Nq = query.shape[1]
    ref = reference_points(h4, w4)
    off, attn, zin = predict_offsets_weights(query, ref, params, cfg, prefix)

    samples, scache = [], []
    for li, fm in enumerate(levels):
        H, W = fm.shape[2:]
        vals = proj[li].reshape(B, H * W, M, dh).transpose(0, 2, 3, 1).reshape(B * M, dh, H, W)
        loc = sample_locations(ref, off[:, :, :, li], (H, W))  # (B, Nq, M, K, 2)
        pts = loc.transpose(0, 2, 1, 3, 4).reshape(B * M, Nq * K, 2)
        s, c = core.bilinear_sample_forward(vals, pts)
        samples.append(s.reshape(B, M, Nq, K, dh))
        scache.append(c)
    S = np.stack(samples, axis=3)  # (B, M, Nq, L, K, dh)
    At = attn.transpose(0, 2, 1, 3, 4)  # (B, M, Nq, L, K)
    heads = np.einsum("bmqlk,bmqlkd->bmqd", At, S)
    cat = heads.transpose(0, 2, 1, 3).reshape(B, Nq, M * dh)
    pre, ocache = core.linear_forward(cat, params[prefix + "out.w"], params[prefix + "out.b"])
    cache = dict(pcache=pcache, query=query, zin=zin, attn=attn, S=S, scache=scache, ocache=ocache,
                 shapes=[fm.shape for fm in levels], prefix=prefix, cfg=cfg)
    return pre, cache


def csha_attend_backward(dpre, cache, params):
    cfg, prefix = cache["cfg"], cache["prefix"]
    M, K, dh, D = cfg.heads, cfg.points, cfg.head_dim, cfg.d_model
    attn, S = cache["attn"], cache["S"]
    B, Nq = dpre.shape[:2]
    grads = {}

    g = core.linear_backward(dpre, cache["ocache"])
    grads[prefix + "out.w"], grads[prefix + "out.b"] = g["w"], g["b"]
    dheads = g["x"].reshape(B, Nq, M, dh).transpose(0, 2, 1, 3)  # (B, M, Nq, dh)
    At = attn.transpose(0, 2, 1, 3, 4)
    dAt = np.einsum("bmqd,bmqlkd->bmqlk", dheads, S)
    dS = At[..., None] * dheads[:, :, :, None, None, :]

    dproj = [None, None, None]
    doff = np.zeros((B, Nq, M, LEVELS, K, 2), dtype=dpre.dtype)
    for li, (_, _, H, W) in enumerate(cache["shapes"]):
        gs = core.bilinear_sample_backward(dS[:, :, :, li].reshape(B * M, Nq * K, dh),
                                           cache["scache"][li])
        dvals = gs["fmap"].reshape(B, M, dh, H * W).transpose(0, 3, 1, 2).reshape(B, H * W, D)
        dproj[li] = dvals
        doff[:, :, :, li] = gs["points"].reshape(B, M, Nq, K, 2).transpose(0, 2, 1, 3, 4)

    dattn = dAt.transpose(0, 2, 1, 3, 4).reshape(B, Nq, M, LEVELS * K)
    p = attn.reshape(B, Nq, M, LEVELS * K)
    dlogits = (p * (dattn - (dattn * p).sum(-1, keepdims=True))).reshape(B, Nq, -1)
    query = cache["query"]
    q2 = query.reshape(-1, D)
    grads[prefix + "attn.w"] = dlogits.reshape(-1, cfg.samples).T @ q2
    grads[prefix + "attn.b"] = dlogits.reshape(-1, cfg.samples).sum(0)
    dquery = dlogits @ params[prefix + "attn.w"]

    doff = doff.reshape(B, Nq, -1)
    zin = cache["zin"]
    grads[prefix + "offset.w"] = doff.reshape(-1, doff.shape[-1]).T @ zin.reshape(-1, D + 2)
    grads[prefix + "offset.b"] = doff.reshape(-1, doff.shape[-1]).sum(0)
    dquery += (doff @ params[prefix + "offset.w"])[..., :D]
    dproj[1] = dproj[1] + dquery

    dlevels = []
    for li, lvl in enumerate((3, 4, 5)):
        gl = core.linear_backward(dproj[li], cache["pcache"][li])
        grads[f"{prefix}proj{lvl}.w"], grads[f"{prefix}proj{lvl}.b"] = gl["w"], gl["b"]
        _, C, H, W = cache["shapes"][li]
        dlevels.append(gl["x"].transpose(0, 2, 1).reshape(B, C, H, W))
    return dlevels, grads


def csha_forward(p3, p4, p5, params, cfg: CshaConfig, prefix="csha.", check_strides=True):
    """Enhanced P4 with the same shape as ``p4``."""
    if check_strides:
        check_pyramid(p3, p4, p5)
    pre, cache = csha_attend_forward(p3, p4, p5, params, cfg, prefix)
    B, C4, H4, W4 = p4.shape
    out = p4 + pre.transpose(0, 2, 1).reshape(B, C4, H4, W4)
    if out.shape != p4.shape:
        raise GeometryError(f"output {out.shape} differs from P4 {p4.shape}")
    return out, cache


def csha_backward(dout, cache, params):
    B, C4 = dout.shape[:2]
    dpre = dout.reshape(B, C4, -1).transpose(0, 2, 1)
    (d3, d4, d5), grads = csha_attend_backward(dpre, cache, params)
    return (d3, d4 + dout, d5), grads


# ---------------------------------------------------------------------------
# dense reference


def dense_attention_matrix(ref, offsets, attn, extents):
    """Per-pixel weights (B, Nq, M, H*W) of a level, from the sparse samples.

    Each sample spreads its attention weight over every pixel with the
    bilinear tent ``max(0, 1-|dx|) * max(0, 1-|dy|)``.
    """
    H, W = extents
    loc = sample_locations(ref, offsets, extents)  # (B, Nq, M, K, 2)
    py, px = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    px = px.ravel().astype(loc.dtype)
    py = py.ravel().astype(loc.dtype)
    kx = np.maximum(0.0, 1.0 - np.abs(loc[..., 0:1] - px))
    ky = np.maximum(0.0, 1.0 - np.abs(loc[..., 1:2] - py))
    return np.einsum("bqmk,bqmkp->bqmp", attn, kx * ky)


def csha_dense_oracle(p3, p4, p5, params, cfg: CshaConfig, prefix="csha."):
    """Full attention of every P4 query over every pixel of all three levels.

    Returns ``(output, weights)`` where ``weights`` is a list of per-level
    (B, Nq, M, H*W) matrices. Used to cross-check the sparse path.
    """
    levels = (p3, p4, p5)
    B = p4.shape[0]
    h4, w4 = p4.shape[2:]
    M, dh = cfg.heads, cfg.head_dim
    proj = [_tokens(fm) @ params[f"{prefix}proj{lvl}.w"].T + params[f"{prefix}proj{lvl}.b"]
            for lvl, fm in zip((3, 4, 5), levels)]
    ref = reference_points(h4, w4)
    off, attn, _ = predict_offsets_weights(proj[1], ref, params, cfg, prefix)
    Nq = proj[1].shape[1]
    heads = np.zeros((B, Nq, M, dh), dtype=p4.dtype)
    weights = []
    for li, fm in enumerate(levels):
        H, W = fm.shape[2:]
        dense = dense_attention_matrix(ref, off[:, :, :, li], attn[:, :, :, li], (H, W))
        vals = proj[li].reshape(B, H * W, M, dh)
        heads += np.einsum("bqmp,bpmd->bqmd", dense, vals)
        weights.append(dense)
    pre = heads.reshape(B, Nq, M * dh) @ params[prefix + "out.w"].T + params[prefix + "out.b"]
    out = p4 + pre.transpose(0, 2, 1).reshape(p4.shape)
    return out, weights


# ---------------------------------------------------------------------------
# analytic FLOP counts

BILINEAR_WEIGHT_FLOPS = 10  # floor, two fractions, four corner products
TENT_FLOPS = 11  # two differences, abs, 1-|.|, clamps, product, scale-and-accumulate


def _shared_flops(extents, cfg: CshaConfig) -> int:
    D = cfg.d_model
    nq = extents[1][0] * extents[1][1]
    n = sum(h * w * c * D * 2 for (h, w), c in zip(extents, cfg.channels))
    n += nq * (D + 2) * cfg.samples * 2 * 2  # offset head
    n += nq * D * cfg.samples * 2 + nq * cfg.samples * 3  # attention head + softmax
    n += nq * D * cfg.channels[1] * 2 + nq * cfg.channels[1]  # output projection + residual
    return n


def sparse_flops(extents, cfg: CshaConfig) -> int:
    """Multiply/add count of :func:`csha_forward` for level extents ``[(H3,W3),(H4,W4),(H5,W5)]``."""
    nq = extents[1][0] * extents[1][1]
    dh = cfg.head_dim
    per_sample = BILINEAR_WEIGHT_FLOPS + 4 * dh * 2 + dh * 2
    return _shared_flops(extents, cfg) + nq * cfg.samples * per_sample


def dense_flops(extents, cfg: CshaConfig) -> int:
    """Multiply/add count of :func:`csha_dense_oracle` for the same geometry."""
    nq = extents[1][0] * extents[1][1]
    n_pix = sum(h * w for h, w in extents)
    dh = cfg.head_dim
    weights = nq * cfg.heads * cfg.points * n_pix * TENT_FLOPS
    aggregate = nq * cfg.heads * n_pix * dh * 2
    return _shared_flops(extents, cfg) + weights + aggregate
