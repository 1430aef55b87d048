"""Global relation modelling over the coarsest pyramid level.

Tokens are the P5 pixels in row-major order. The block adds a learnable
positional embedding, layer-normalises, runs multi-head self-attention and
adds the result back onto P5. ``variant="plain_mhsa"`` drops the positional
embedding and normalisation (the attention-only ablation).
"""

from __future__ import annotations

import numpy as np

from . import core
from .core import ConfigError, GeometryError


def init_grm(rng, channels: int, tokens: int, heads: int = 8, variant: str = "grm",
             prefix: str = "grm.", pos_std: float = 0.02):
    if channels % heads:
        raise ConfigError(f"channels={channels} not divisible by heads={heads}")
    p = {}
    for name in ("wq", "wk", "wv", "wo"):
        p[prefix + name] = core.init_linear(rng, channels, channels)
    if variant == "grm":
        p[prefix + "pos"] = (pos_std * rng.standard_normal((tokens, channels))).astype(core.DTYPE)
        p[prefix + "ln.gamma"] = np.ones(channels, dtype=core.DTYPE)
        p[prefix + "ln.beta"] = np.zeros(channels, dtype=core.DTYPE)
    elif variant != "plain_mhsa":
        raise ConfigError(f"unknown attention variant {variant!r}")
    return p


def flatten_tokens(x):
    """(B, C, H, W) -> (B, H*W, C), tokens ordered row by row."""
    B, C, H, W = x.shape
    return x.reshape(B, C, H * W).transpose(0, 2, 1)


def unflatten_tokens(seq, H: int, W: int):
    B, N, C = seq.shape
    if N != H * W:
        raise GeometryError(f"{N} tokens cannot fill a {H}x{W} map")
    return seq.transpose(0, 2, 1).reshape(B, C, H, W)


def flatten_with_pos_forward(p5, params, prefix="grm."):
    seq = flatten_tokens(p5)
    pos = params[prefix + "pos"]
    if pos.shape[0] != seq.shape[1]:
        raise GeometryError(
            f"positional embedding holds {pos.shape[0]} tokens, map has {seq.shape[1]}")
    out, cache = core.layer_norm_forward(seq + pos, params[prefix + "ln.gamma"],
                                         params[prefix + "ln.beta"])
    return out, cache


def flatten_with_pos_backward(dout, cache, prefix="grm."):
    g = core.layer_norm_backward(dout, cache)
    dseq = g["x"]
    grads = {prefix + "pos": dseq.sum(axis=0), prefix + "ln.gamma": g["gamma"],
             prefix + "ln.beta": g["beta"]}
    return dseq, grads


def mhsa_forward(seq, params, heads: int, prefix="grm."):
    """softmax(Q K^T / sqrt(d)) V per head, heads concatenated then projected by W_O."""
    B, N, C = seq.shape
    if C % heads:
        raise ConfigError(f"channels={C} not divisible by heads={heads}")
    d = C // heads

    def split(t):
        return t.reshape(B, N, heads, d).transpose(0, 2, 1, 3)

    q = split(seq @ params[prefix + "wq"].T)
    k = split(seq @ params[prefix + "wk"].T)
    v = split(seq @ params[prefix + "wv"].T)
    attn = core.softmax(q @ k.transpose(0, 1, 3, 2) / np.sqrt(d), axis=-1)  # (B, M, N, N)
    heads_out = attn @ v  # (B, M, N, d)
    cat = heads_out.transpose(0, 2, 1, 3).reshape(B, N, C)
    out = cat @ params[prefix + "wo"].T
    return out, (seq, q, k, v, attn, cat, heads, prefix)


def mhsa_backward(dout, cache, params):
    seq, q, k, v, attn, cat, heads, prefix = cache
    B, N, C = seq.shape
    d = C // heads
    grads = {prefix + "wo": dout.reshape(-1, C).T @ cat.reshape(-1, C)}
    dcat = dout @ params[prefix + "wo"]
    dh = dcat.reshape(B, N, heads, d).transpose(0, 2, 1, 3)
    dattn = dh @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ dh
    dlogits = attn * (dattn - (dattn * attn).sum(-1, keepdims=True)) / np.sqrt(d)
    dq = dlogits @ k
    dk = dlogits.transpose(0, 1, 3, 2) @ q

    def merge(t):
        return t.transpose(0, 2, 1, 3).reshape(B, N, C)

    dseq = np.zeros_like(seq)
    flat_seq = seq.reshape(-1, C)
    for name, g in (("wq", dq), ("wk", dk), ("wv", dv)):
        g = merge(g)
        grads[prefix + name] = g.reshape(-1, C).T @ flat_seq
        dseq += g @ params[prefix + name]
    return dseq, grads


def attention_weights(seq, params, heads: int, prefix="grm."):
    """The (B, heads, N, N) attention matrix, for inspection."""
    return mhsa_forward(seq, params, heads, prefix)[1][4]


def grm_forward(p5, params, heads: int = 8, variant: str = "grm", prefix="grm."):
    B, C, H, W = p5.shape
    if variant == "grm":
        seq, fcache = flatten_with_pos_forward(p5, params, prefix)
    else:
        seq, fcache = flatten_tokens(p5), None
    att, acache = mhsa_forward(seq, params, heads, prefix)
    return p5 + unflatten_tokens(att, H, W), (fcache, acache, variant, prefix, (H, W))


def grm_backward(dout, cache, params):
    fcache, acache, variant, prefix, (H, W) = cache
    datt = flatten_tokens(dout)
    dseq, grads = mhsa_backward(datt, acache, params)
    if variant == "grm":
        dseq, g = flatten_with_pos_backward(dseq, fcache, prefix)
        grads.update(g)
    return dout + unflatten_tokens(dseq, H, W), grads
