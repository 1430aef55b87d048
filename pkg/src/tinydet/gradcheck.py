"""Finite-difference suites for every hand-written backward pass."""

from __future__ import annotations

import numpy as np

from . import boxes as bx
from . import core, grm, rhwd
from .core import GradCheckReport, grad_check, grad_check_op
from .csha import CshaConfig, csha_backward, csha_forward, init_csha

TOL = 1e-4
END_TO_END_TOL = 1e-3


def _block_check(forward, backward, x, params, rng, tol=TOL, max_entries=None):
    """Check a block whose backward returns ``(dx, grads)`` under a random projection."""
    out, cache = forward(x, params)
    proj = rng.standard_normal(out.shape)
    dx, grads = backward(proj, cache)
    arrays = {"x": x, **params}
    analytic = {"x": dx, **grads}

    def loss():
        return float((forward(x, params)[0] * proj).sum())

    return grad_check(loss, arrays, analytic, tol, max_entries=max_entries, rng=rng)


def check_core(seed: int = 0) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    rep = GradCheckReport(tolerance=TOL)
    r = rng.standard_normal
    cases = {
        "silu": (core.silu_forward, core.silu_backward, {"x": r((2, 3, 4, 4))}, {}),
        "conv2d": (core.conv2d_forward, core.conv2d_backward,
                   {"x": r((2, 3, 6, 6)), "w": r((4, 3, 3, 3)), "b": r(4)},
                   {"stride": 1, "padding": 1}),
        "conv2d_s2": (core.conv2d_forward, core.conv2d_backward,
                      {"x": r((1, 2, 8, 8)), "w": r((3, 2, 6, 6)), "b": r(3)},
                      {"stride": 2, "padding": 2}),
        "batch_norm": (core.batch_norm_forward, core.batch_norm_backward,
                       {"x": r((3, 2, 3, 3)), "gamma": r(2), "beta": r(2)}, {}),
        "layer_norm": (core.layer_norm_forward, core.layer_norm_backward,
                       {"x": r((2, 5, 6)), "gamma": r(6), "beta": r(6)}, {}),
        "linear": (core.linear_forward, core.linear_backward,
                   {"x": r((2, 5, 4)), "w": r((3, 4)), "b": r(3)}, {}),
        "softmax": (core.softmax_forward, core.softmax_backward, {"logits": r((3, 7))}, {}),
        "bilinear_sample": (core.bilinear_sample_forward, core.bilinear_sample_backward,
                            {"fmap": r((2, 3, 5, 6)),
                             "points": rng.uniform(-1.5, 6.5, size=(2, 9, 2))}, {}),
        "max_pool": (core.max_pool_forward, core.max_pool_backward, {"x": r((2, 2, 6, 6))},
                     {"k": 5, "stride": 1, "padding": 2}),
    }
    for name, (fwd, bwd, inputs, kw) in cases.items():
        rep.merge(grad_check_op(fwd, bwd, inputs, TOL, rng, **kw), name + ".")
    state = {"mean": r(2), "var": rng.uniform(0.5, 2, 2)}
    rep.merge(grad_check_op(core.batch_norm_forward, core.batch_norm_backward,
                            {"x": r((2, 2, 3, 3)), "gamma": r(2), "beta": r(2)}, TOL, rng,
                            mode="infer", state=state), "batch_norm_infer.")
    return rep


def check_rhwd(seed: int = 0) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    rep = GradCheckReport(tolerance=TOL)
    for variant, (fwd, bwd) in rhwd.STEMS.items():
        params, _ = rhwd.init_stem(rng, variant, 3, 4)
        for k, v in params.items():
            params[k] = v + 0.1 * rng.standard_normal(v.shape)
        x = rng.standard_normal((2, 3, 8, 8))
        rep.merge(_block_check(lambda x, p: fwd(x, p), bwd, x, params, rng), variant + ".")
    return rep


def check_grm(seed: int = 0) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    rep = GradCheckReport(tolerance=TOL)
    C, H, W, heads = 8, 3, 3, 2
    for variant in ("grm", "plain_mhsa"):
        params = grm.init_grm(rng, C, H * W, heads, variant)
        if variant == "grm":
            params["grm.pos"] += rng.standard_normal(params["grm.pos"].shape)
            params["grm.ln.gamma"] += 0.1 * rng.standard_normal(C)
            params["grm.ln.beta"] += 0.1 * rng.standard_normal(C)
        x = rng.standard_normal((2, C, H, W))
        rep.merge(_block_check(lambda x, p: grm.grm_forward(x, p, heads, variant),
                               lambda d, c: grm.grm_backward(d, c, params),
                               x, params, rng), variant + ".")
    return rep


def random_csha_case(rng, channels=(4, 6, 8), d_model=8, heads=2, points=2, hw4=(4, 4), batch=2):
    cfg = CshaConfig(channels=channels, d_model=d_model, heads=heads, points=points)
    params = init_csha(rng, cfg)
    # generic offsets keep samples off the integer lattice where bilinear has kinks
    params["csha.offset.w"] = 0.3 * rng.standard_normal(params["csha.offset.w"].shape)
    params["csha.offset.b"] += rng.uniform(-0.5, 0.5, params["csha.offset.b"].shape)
    params["csha.attn.b"] = rng.standard_normal(params["csha.attn.b"].shape)
    h4, w4 = hw4
    p3 = rng.standard_normal((batch, channels[0], 2 * h4, 2 * w4))
    p4 = rng.standard_normal((batch, channels[1], h4, w4))
    p5 = rng.standard_normal((batch, channels[2], h4 // 2, w4 // 2))
    return cfg, params, p3, p4, p5


def check_csha(seed: int = 0) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    cfg, params, p3, p4, p5 = random_csha_case(rng)
    out, cache = csha_forward(p3, p4, p5, params, cfg)
    proj = rng.standard_normal(out.shape)
    (d3, d4, d5), grads = csha_backward(proj, cache, params)
    arrays = {"p3": p3, "p4": p4, "p5": p5, **params}
    analytic = {"p3": d3, "p4": d4, "p5": d5, **grads}

    def loss():
        return float((csha_forward(p3, p4, p5, params, cfg)[0] * proj).sum())

    return grad_check(loss, arrays, analytic, TOL, rng=rng)


def check_losses(seed: int = 0, n: int = 20, tol: float = TOL) -> GradCheckReport:
    """Regression-loss gradient on random overlapping box pairs."""
    rng = np.random.default_rng(seed)
    rep = GradCheckReport(tolerance=tol)
    cfg = bx.RegLossConfig(alpha1=0.7, alpha2=0.3, C=5.0)
    worst = 0.0
    for _ in range(n):
        gt = np.array([10.0, 10.0, 10 + rng.uniform(3, 8), 10 + rng.uniform(3, 8)])
        pred = gt + rng.uniform(-1.5, 1.5, 4)
        pred[2:] = np.maximum(pred[2:], pred[:2] + 0.5)
        a = bx.regression_loss_grad(pred, gt, cfg)
        r = grad_check(lambda: bx.regression_loss(pred, gt, cfg), {"pred": pred}, {"pred": a}, tol)
        worst = max(worst, r.errors["pred"])
    rep.errors["regression_loss.pred"] = worst
    rep.passed = worst <= tol
    return rep


def check_detector(seed: int = 0, max_entries: int | None = 40) -> GradCheckReport:
    """End-to-end check of the full detector loss on one frozen 32x32 image."""
    from .detector import Detector, DetectorConfig
    from .scenes import SceneConfig, gen_scene
    from .training import batch_targets, detection_loss, reg_config

    rng = np.random.default_rng(seed)
    cfg = DetectorConfig(widths=(4, 8, 8, 8), image_size=32, csha_d_model=8, csha_points=2)
    model = Detector.build(cfg, seed)
    model.params["csha.offset.w"] += 0.3 * rng.standard_normal(model.params["csha.offset.w"].shape)
    model.params["csha.offset.b"] += rng.uniform(-0.5, 0.5, model.params["csha.offset.b"].shape)
    img, boxes = gen_scene(rng, SceneConfig(size=32, objects=(2, 2), min_size=3, max_size=6))
    x = img[None].copy()
    obj_t, box_t = batch_targets([boxes], (2, 2))
    rcfg = reg_config(model, 5.0)

    def loss():
        head, _ = model.forward(x, "train")
        return detection_loss(head, obj_t, box_t, rcfg)[0].total

    head, cache = model.forward(x, "train")
    _, dhead = detection_loss(head, obj_t, box_t, rcfg)
    grads = model.backward(dhead, cache)
    return grad_check(loss, dict(model.params), grads, END_TO_END_TOL,
                      max_entries=max_entries, rng=rng)


SUITES = {
    "core": check_core,
    "rhwd": check_rhwd,
    "grm": check_grm,
    "csha": check_csha,
    "losses": check_losses,
    "detector": check_detector,
}


def run(module: str = "all", seed: int = 0) -> GradCheckReport:
    names = list(SUITES) if module == "all" else [module]
    rep = GradCheckReport(tolerance=TOL)
    for name in names:
        sub = SUITES[name](seed)
        rep.merge(sub, name + ".")
    return rep
