"""Dense numpy primitives with hand-written backward passes.

Every differentiable primitive comes as a ``*_forward`` / ``*_backward`` pair.
The forward returns ``(out, cache)``; the backward takes the upstream gradient
and the cache and returns a dict of gradients keyed by the forward's argument
names. Plain-named helpers (``conv2d``, ``silu``, ...) return the forward value
only.

Feature maps are laid out (batch, channel, row, col); token sequences are
(batch, token, channel).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ConfigError(ValueError):
    """Invalid hyper-parameter or operand shape."""


class GeometryError(ConfigError):
    """Spatial extents that violate an operation's geometry contract."""


def set_dtype(dtype) -> None:
    """Switch the default float type used by initialisers (float64 or float32)."""
    global DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float64, np.float32):
        raise ConfigError(f"unsupported dtype {dtype}")
    DTYPE = dtype.type


# ---------------------------------------------------------------------------
# initialisation


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


def init_conv(rng, out_c: int, in_c: int, k: int) -> np.ndarray:
    return xavier_uniform(rng, (out_c, in_c, k, k), in_c * k * k, out_c * k * k)


def init_linear(rng, out_c: int, in_c: int) -> np.ndarray:
    return xavier_uniform(rng, (out_c, in_c), in_c, out_c)


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, k: int, stride: int, padding: int, name: str = "extent") -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise GeometryError(
            f"{name}={size} incompatible with kernel {k}, stride {stride}, padding {padding}: "
            f"({size} + 2*{padding} - {k}) is not a non-negative multiple of {stride}"
        )
    return span // stride + 1


def conv2d_forward(x, w, b=None, stride: int = 1, padding: int = 0):
    if stride < 1 or padding < 0:
        raise ConfigError(f"bad stride/padding {stride}/{padding}")
    if x.ndim != 4 or w.ndim != 4:
        raise ConfigError(f"conv2d expects rank-4 input and kernel, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    O, Ci, kh, kw = w.shape
    if Ci != C:
        raise ConfigError(f"in_channels: kernel expects {Ci}, input has {C}")
    if b is not None and b.shape != (O,):
        raise ConfigError(f"bias length {b.shape} != out_channels {O}")
    Ho = conv_output_size(H, kh, stride, padding, "height")
    Wo = conv_output_size(W, kw, stride, padding, "width")

    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (B, C, Ho, Wo, kh, kw) x (O, C, kh, kw) -> (B, Ho, Wo, O)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b[None, :, None, None]
    out = np.ascontiguousarray(out)
    return out, (win, x.shape, w, stride, padding, b is not None)


def conv2d_backward(dout, cache):
    win, xshape, w, stride, padding, has_bias = cache
    B, C, H, W = xshape
    O, _, kh, kw = w.shape
    Ho, Wo = dout.shape[2:]
    grads = {"w": np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3]))}
    if has_bias:
        grads["b"] = dout.sum(axis=(0, 2, 3))
    # (B, O, Ho, Wo) x (O, C, kh, kw) -> (B, Ho, Wo, C, kh, kw)
    dcols = np.tensordot(dout, w, axes=([1], [0]))
    dxp = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    grads["x"] = dxp[:, :, padding : padding + H, padding : padding + W] if padding else dxp
    return grads


def conv2d(x, w, b=None, stride=1, padding=0):
    return conv2d_forward(x, w, b, stride, padding)[0]


# ---------------------------------------------------------------------------
# normalisation


def batch_norm_forward(x, gamma, beta, eps: float = 1e-5, mode: str = "train", state=None,
                       momentum: float = 0.03):
    """Per-channel batch normalisation.

    In ``train`` mode the batch statistics are used and, when ``state`` (a dict
    with ``mean``/``var``) is given, the running statistics are updated in
    place. In ``infer`` mode the running statistics are used.
    """
    if eps <= 0:
        raise ConfigError(f"epsilon must be positive, got {eps}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ConfigError(f"gamma/beta must have length {C}")
    if mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        if state is not None:
            n = x.size // C
            state["mean"] *= 1 - momentum
            state["mean"] += momentum * mean
            state["var"] *= 1 - momentum
            state["var"] += momentum * var * (n / max(n - 1, 1))
    elif mode == "infer":
        if state is None:
            raise ConfigError("inference-mode batch_norm needs running statistics")
        mean, var = state["mean"], state["var"]
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, (xhat, inv_std, gamma, mode)


def batch_norm_backward(dout, cache):
    xhat, inv_std, gamma, mode = cache
    grads = {
        "gamma": (dout * xhat).sum(axis=(0, 2, 3)),
        "beta": dout.sum(axis=(0, 2, 3)),
    }
    dxhat = dout * gamma[None, :, None, None]
    if mode == "train":
        m = dout.size // dout.shape[1]
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        grads["x"] = inv_std[None, :, None, None] / m * (m * dxhat - s1 - xhat * s2)
    else:
        grads["x"] = dxhat * inv_std[None, :, None, None]
    return grads


def batch_norm(x, gamma, beta, eps=1e-5, mode="train", state=None):
    return batch_norm_forward(x, gamma, beta, eps, mode, state)[0]


def layer_norm_forward(x, gamma, beta, eps: float = 1e-5):
    """Normalise each token over its channel (last) axis."""
    if eps <= 0:
        raise ConfigError(f"epsilon must be positive, got {eps}")
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ConfigError(f"gamma/beta must have length {C}")
    mean = x.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + eps)
    xhat = (x - mean) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, gamma)


def layer_norm_backward(dout, cache):
    xhat, inv_std, gamma = cache
    lead = tuple(range(dout.ndim - 1))
    dxhat = dout * gamma
    C = dout.shape[-1]
    dx = inv_std / C * (
        C * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True)
    )
    return {"x": dx, "gamma": (dout * xhat).sum(axis=lead), "beta": dout.sum(axis=lead)}


def layer_norm(x, gamma, beta, eps=1e-5):
    return layer_norm_forward(x, gamma, beta, eps)[0]


# ---------------------------------------------------------------------------
# elementwise / dense


def sigmoid(x):
    # split by sign so neither branch overflows
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else out[()]


def silu_forward(x):
    s = sigmoid(np.asarray(x, dtype=np.result_type(x, np.float32)))
    return x * s, (x, s)


def silu_backward(dout, cache):
    x, s = cache
    return {"x": dout * s * (1.0 + x * (1.0 - s))}


def silu(x):
    return silu_forward(x)[0]


def linear_forward(x, w, b=None):
    """``x @ w.T + b`` over the last axis; ``w`` is (out, in)."""
    if x.shape[-1] != w.shape[1]:
        raise ConfigError(f"linear: input has {x.shape[-1]} features, weights expect {w.shape[1]}")
    out = x @ w.T
    if b is not None:
        out = out + b
    return out, (x, w, b is not None)


def linear_backward(dout, cache):
    x, w, has_bias = cache
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    grads = {"x": dout @ w, "w": d2.T @ x2}
    if has_bias:
        grads["b"] = d2.sum(axis=0)
    return grads


def linear(x, w, b=None):
    return linear_forward(x, w, b)[0]


def softmax(logits, axis: int = -1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_forward(logits, axis: int = -1):
    p = softmax(logits, axis)
    return p, (p, axis)


def softmax_backward(dout, cache):
    p, axis = cache
    return {"logits": p * (dout - (dout * p).sum(axis=axis, keepdims=True))}


# ---------------------------------------------------------------------------
# bilinear sampling


def bilinear_sample_forward(fmap, points):
    """Sample ``fmap`` (B, C, H, W) at continuous pixel coordinates.

    ``points`` is (B, N, 2) holding (x, y); integer coordinates hit pixel
    centres exactly. Neighbours outside the map contribute zero.
    Returns (B, N, C).
    """
    B, C, H, W = fmap.shape
    if points.shape[0] != B or points.shape[-1] != 2:
        raise ConfigError(f"points must be (B={B}, N, 2), got {points.shape}")
    x = points[..., 0]
    y = points[..., 1]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    flat = fmap.reshape(B, C, H * W).transpose(0, 2, 1)  # (B, HW, C)
    bidx = np.arange(B)[:, None]

    corners = []
    out = np.zeros((B, points.shape[1], C), dtype=np.result_type(fmap, points))
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            idx = np.where(valid, yi * W + xi, 0)
            wx = fx if dx else 1.0 - fx
            wy = fy if dy else 1.0 - fy
            wgt = wx * wy * valid
            vals = flat[bidx, idx] * valid[..., None]  # (B, N, C)
            out += wgt[..., None] * vals
            corners.append((dx, dy, idx, valid, vals))
    return out, (fmap.shape, fx, fy, corners)


def bilinear_sample_backward(dout, cache):
    (B, C, H, W), fx, fy, corners = cache
    dflat = np.zeros((B * H * W, C), dtype=dout.dtype)
    dpts = np.zeros(fx.shape + (2,), dtype=dout.dtype)
    offset = (np.arange(B) * H * W)[:, None]
    for dx, dy, idx, valid, vals in corners:
        wx = fx if dx else 1.0 - fx
        wy = fy if dy else 1.0 - fy
        wgt = wx * wy * valid
        np.add.at(dflat, (idx + offset).ravel(), (wgt[..., None] * dout).reshape(-1, C))
        g = (dout * vals).sum(-1)
        dpts[..., 0] += g * (1.0 if dx else -1.0) * wy
        dpts[..., 1] += g * (1.0 if dy else -1.0) * wx
    dmap = dflat.reshape(B, H * W, C).transpose(0, 2, 1).reshape(B, C, H, W)
    return {"fmap": dmap, "points": dpts}


def bilinear_sample(fmap, points):
    return bilinear_sample_forward(fmap, points)[0]


# ---------------------------------------------------------------------------
# pooling / resampling


def max_pool_forward(x, k: int, stride: int = 1, padding: int = 0):
    B, C, H, W = x.shape
    Ho = conv_output_size(H, k, stride, padding, "height")
    Wo = conv_output_size(W, k, stride, padding, "width")
    xp = x
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win.reshape(B, C, Ho, Wo, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape, k, stride, padding)


def max_pool_backward(dout, cache):
    arg, (B, C, H, W), k, stride, padding = cache
    Ho, Wo = dout.shape[2:]
    dxp = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            mask = arg == i * k + j
            if mask.any():
                dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dout * mask
    return {"x": dxp[:, :, padding : padding + H, padding : padding + W]}


def max_pool(x, k, stride=1, padding=0):
    return max_pool_forward(x, k, stride, padding)[0]


def upsample_nearest(x, factor: int = 2):
    return x.repeat(factor, axis=2).repeat(factor, axis=3)


def upsample_nearest_backward(dout, factor: int = 2):
    B, C, H, W = dout.shape
    return dout.reshape(B, C, H // factor, factor, W // factor, factor).sum(axis=(3, 5))


# ---------------------------------------------------------------------------
# optimisation


def sgd_step(params: dict, grads: dict, lr: float, weight_decay: float = 0.0) -> None:
    """In-place ``w <- w - lr * (g + weight_decay * w)`` for every named array."""
    if lr < 0 or weight_decay < 0:
        raise ConfigError("lr and weight_decay must be non-negative")
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            continue
        w -= lr * (g + weight_decay * w)


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4
    passed: bool = True

    def merge(self, other: "GradCheckReport", prefix: str = "") -> "GradCheckReport":
        for k, v in other.errors.items():
            self.errors[prefix + k] = v
        self.passed = self.passed and other.passed
        return self

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "tolerance": self.tolerance,
                "max_error": self.max_error, "errors": dict(self.errors)}


def relative_error(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def grad_check(loss_fn, arrays: dict, analytic: dict, tolerance: float = 1e-4, h: float = 1e-5,
               max_entries: int | None = None, rng: np.random.Generator | None = None
               ) -> GradCheckReport:
    """Compare ``analytic`` gradients with central differences of ``loss_fn()``.

    ``arrays`` are perturbed in place, so ``loss_fn`` must read them on every
    call. With ``max_entries`` set, at most that many entries per array are
    probed (chosen with ``rng``).
    """
    rng = rng or np.random.default_rng(0)
    report = GradCheckReport(tolerance=tolerance)
    for name, arr in arrays.items():
        if name not in analytic:
            raise KeyError(f"no analytic gradient for {name!r}")
        a = np.asarray(analytic[name]).reshape(-1)
        if a.size != arr.size:
            raise ConfigError(f"gradient for {name!r} has {a.size} entries, array has {arr.size}")
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise ConfigError(f"array {name!r} must be contiguous to perturb in place")
        idx = np.arange(arr.size)
        if max_entries is not None and arr.size > max_entries:
            idx = rng.choice(arr.size, max_entries, replace=False)
        worst = 0.0
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = loss_fn()
            flat[i] = old - h
            fm = loss_fn()
            flat[i] = old
            num = (fp - fm) / (2 * h)
            worst = max(worst, float(relative_error(a[i], num)))
        report.errors[name] = worst
    report.passed = all(e <= tolerance for e in report.errors.values())
    return report


def grad_check_op(forward, backward, inputs: dict, tolerance: float = 1e-4, rng=None,
                  wrt=None, **kwargs) -> GradCheckReport:
    """Grad-check a primitive pair against the scalar ``sum(forward(...) * R)``.

    ``R`` is a fixed random projection so every output entry matters.
    """
    rng = rng or np.random.default_rng(0)
    out, cache = forward(**inputs, **kwargs)
    proj = rng.standard_normal(out.shape)
    grads = backward(proj, cache)
    names = wrt if wrt is not None else [k for k in inputs if k in grads]
    arrays = {k: inputs[k] for k in names}

    def loss():
        return float((forward(**inputs, **kwargs)[0] * proj).sum())

    return grad_check(loss, arrays, grads, tolerance=tolerance, rng=rng)
