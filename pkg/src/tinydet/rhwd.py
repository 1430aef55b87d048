"""Downsampling stems: residual Haar wavelet (RHWD), large-kernel conv, Focus.

All three halve the spatial extents and emit ``c_out`` channels, so they are
interchangeable at the front of the detector.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import core
from .core import GeometryError


class WaveletSubbands(NamedTuple):
    A: np.ndarray
    H: np.ndarray
    V: np.ndarray
    D: np.ndarray


def _check_even(x):
    for name, n in (("height", x.shape[2]), ("width", x.shape[3])):
        if n % 2:
            raise GeometryError(f"{name}={n} must be even for a 2x2 decomposition")


def haar_forward(x) -> WaveletSubbands:
    """Single-level orthonormal 2-D Haar transform, channel by channel.

    For every 2x2 block ``[[a, b], [c, d]]``::

        A = (a + b + c + d) / 2     H = (a - b + c - d) / 2
        V = (a + b - c - d) / 2     D = (a - b - c + d) / 2
    """
    _check_even(x)
    a = x[:, :, 0::2, 0::2]
    b = x[:, :, 0::2, 1::2]
    c = x[:, :, 1::2, 0::2]
    d = x[:, :, 1::2, 1::2]
    return WaveletSubbands(
        (a + b + c + d) / 2, (a - b + c - d) / 2, (a + b - c - d) / 2, (a - b - c + d) / 2
    )


def haar_inverse(bands) -> np.ndarray:
    A, H, V, D = bands
    if not (A.shape == H.shape == V.shape == D.shape):
        raise GeometryError("subbands must share one shape")
    B, C, h, w = A.shape
    x = np.empty((B, C, 2 * h, 2 * w), dtype=np.result_type(A, H, V, D))
    x[:, :, 0::2, 0::2] = (A + H + V + D) / 2
    x[:, :, 0::2, 1::2] = (A - H + V - D) / 2
    x[:, :, 1::2, 0::2] = (A + H - V - D) / 2
    x[:, :, 1::2, 1::2] = (A - H - V + D) / 2
    return x


def haar_concat(x):
    """(B, C, H, W) -> (B, 4C, H/2, W/2) ordered A, H, V, D."""
    return np.concatenate(haar_forward(x), axis=1)


def haar_concat_backward(dout):
    # the transform is orthonormal, so its adjoint is its inverse
    return haar_inverse(np.split(dout, 4, axis=1))


def space_to_depth(x):
    """2x2 pixel unshuffle: channels x4, extents /2 (top-left, top-right, bottom-left, bottom-right)."""
    _check_even(x)
    return np.concatenate(
        [x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2], x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2]], axis=1
    )


def space_to_depth_backward(dout):
    tl, tr, bl, br = np.split(dout, 4, axis=1)
    B, C, h, w = tl.shape
    dx = np.empty((B, C, 2 * h, 2 * w), dtype=dout.dtype)
    dx[:, :, 0::2, 0::2] = tl
    dx[:, :, 0::2, 1::2] = tr
    dx[:, :, 1::2, 0::2] = bl
    dx[:, :, 1::2, 1::2] = br
    return dx


# ---------------------------------------------------------------------------
# weights


def init_stem(rng, variant: str, c_in: int, c_out: int, prefix: str = "stem."):
    """Parameters and BN running state for one stem variant."""
    p, state = {}, {}
    if variant in ("rhwd", "largekernel"):
        p[prefix + "global.w"] = core.init_conv(rng, c_out, c_in, 6)
        p[prefix + "global.gamma"] = np.ones(c_out, dtype=core.DTYPE)
        p[prefix + "global.beta"] = np.zeros(c_out, dtype=core.DTYPE)
        state[prefix + "global"] = _bn_state(c_out)
    if variant == "rhwd":
        p[prefix + "local.w"] = core.init_conv(rng, c_out, 4 * c_in, 3)
        p[prefix + "local.b"] = np.zeros(c_out, dtype=core.DTYPE)
    if variant == "focus":
        p[prefix + "focus.w"] = core.init_conv(rng, c_out, 4 * c_in, 3)
        p[prefix + "focus.gamma"] = np.ones(c_out, dtype=core.DTYPE)
        p[prefix + "focus.beta"] = np.zeros(c_out, dtype=core.DTYPE)
        state[prefix + "focus"] = _bn_state(c_out)
    if not p:
        raise core.ConfigError(f"unknown stem variant {variant!r}")
    return p, state


def _bn_state(c):
    return {"mean": np.zeros(c, dtype=core.DTYPE), "var": np.ones(c, dtype=core.DTYPE)}


# ---------------------------------------------------------------------------
# conv + BN + SiLU unit, shared with the backbone


def cbs_forward(x, w, gamma, beta, stride, padding, mode="train", state=None):
    y, c1 = core.conv2d_forward(x, w, None, stride, padding)
    z, c2 = core.batch_norm_forward(y, gamma, beta, mode=mode, state=state)
    out, c3 = core.silu_forward(z)
    return out, (c1, c2, c3)


def cbs_backward(dout, cache):
    c1, c2, c3 = cache
    dz = core.silu_backward(dout, c3)["x"]
    g2 = core.batch_norm_backward(dz, c2)
    g1 = core.conv2d_backward(g2["x"], c1)
    return {"x": g1["x"], "w": g1["w"], "gamma": g2["gamma"], "beta": g2["beta"]}


# ---------------------------------------------------------------------------
# stems


def largekernel_forward(image, params, state=None, mode="train", prefix="stem."):
    """SiLU(BN(Conv6x6, stride 2, pad 2)): the global branch on its own."""
    st = state.get(prefix + "global") if state is not None else None
    out, cache = cbs_forward(image, params[prefix + "global.w"], params[prefix + "global.gamma"],
                             params[prefix + "global.beta"], 2, 2, mode, st)
    return out, (prefix, cache)


def largekernel_backward(dout, cache):
    prefix, c = cache
    g = cbs_backward(dout, c)
    return g["x"], {prefix + "global.w": g["w"], prefix + "global.gamma": g["gamma"],
                    prefix + "global.beta": g["beta"]}


def rhwd_forward(image, params, state=None, mode="train", prefix="stem."):
    """Global large-kernel branch plus SiLU(Conv3x3(Haar subbands)), added."""
    _check_even(image)
    g, gcache = largekernel_forward(image, params, state, mode, prefix)
    bands = haar_concat(image)
    y, ccache = core.conv2d_forward(bands, params[prefix + "local.w"], params[prefix + "local.b"], 1, 1)
    loc, scache = core.silu_forward(y)
    if loc.shape != g.shape:
        raise GeometryError(f"branch shapes differ: global {g.shape}, local {loc.shape}")
    return g + loc, (prefix, gcache, ccache, scache)


def rhwd_backward(dout, cache):
    prefix, gcache, ccache, scache = cache
    dimg, grads = largekernel_backward(dout, gcache)
    dy = core.silu_backward(dout, scache)["x"]
    gc = core.conv2d_backward(dy, ccache)
    grads[prefix + "local.w"] = gc["w"]
    grads[prefix + "local.b"] = gc["b"]
    return dimg + haar_concat_backward(gc["x"]), grads


def focus_forward(image, params, state=None, mode="train", prefix="stem."):
    """Space-to-depth followed by Conv3x3 + BN + SiLU."""
    s2d = space_to_depth(image)
    st = state.get(prefix + "focus") if state is not None else None
    out, cache = cbs_forward(s2d, params[prefix + "focus.w"], params[prefix + "focus.gamma"],
                             params[prefix + "focus.beta"], 1, 1, mode, st)
    return out, (prefix, cache)


def focus_backward(dout, cache):
    prefix, c = cache
    g = cbs_backward(dout, c)
    return space_to_depth_backward(g["x"]), {
        prefix + "focus.w": g["w"], prefix + "focus.gamma": g["gamma"], prefix + "focus.beta": g["beta"]}


STEMS = {
    "rhwd": (rhwd_forward, rhwd_backward),
    "largekernel": (largekernel_forward, largekernel_backward),
    "focus": (focus_forward, focus_backward),
}
