"""Toy detector wiring: geometry, configuration coverage, SPPF and end-to-end gradients."""

import dataclasses

import numpy as np
import pytest

from tinydet import core
from tinydet.core import ConfigError
from tinydet.detector import (Detector, DetectorConfig, ablation_configs, sppf_backward,
                              sppf_forward, table3_configs)
from tinydet.gradcheck import check_detector

from test_core import conv_loop, pool_loop


def sppf_params(rng, c):
    hid = c // 2
    return {"sppf.cv1.w": rng.standard_normal((hid, c, 1, 1)), "sppf.cv1.b": rng.standard_normal(hid),
            "sppf.cv2.w": rng.standard_normal((c, 4 * hid, 1, 1)), "sppf.cv2.b": rng.standard_normal(c)}


def silu(x):
    return x / (1 + np.exp(-x))


class TestGeometry:
    def test_head_shape(self):
        model = Detector.build(DetectorConfig(), seed=0)
        head, _ = model.forward(np.random.default_rng(0).uniform(0, 1, (1, 3, 64, 64)))
        assert head.shape == (1, 5, 4, 4)

    @pytest.mark.parametrize("stem", ["rhwd", "largekernel", "focus"])
    def test_pyramid_strides(self, stem):
        model = Detector.build(DetectorConfig(stem=stem, image_size=128), seed=0)
        _, caches = model.forward(np.zeros((1, 3, 128, 128)))
        assert [s[2:] for s in caches["pyramid"]] == [(16, 16), (8, 8), (4, 4)]

    def test_same_seed_same_weights(self):
        a = Detector.build(DetectorConfig(), seed=3)
        b = Detector.build(DetectorConfig(), seed=3)
        c = Detector.build(DetectorConfig(), seed=4)
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
        assert any(not np.array_equal(a.params[k], c.params[k]) for k in a.params)

    def test_wrong_input_shape(self):
        with pytest.raises(ConfigError):
            Detector.build(DetectorConfig()).forward(np.zeros((1, 3, 32, 32)))


class TestConfigs:
    def test_table_rows(self):
        rows = table3_configs()
        assert list(rows) == ["baseline", "+rhwd", "+grm", "+csha", "+center_loss"]
        assert rows["baseline"] == DetectorConfig(stem="largekernel", grm="none", csha=False,
                                                  loss="iou_only")
        assert rows["+center_loss"] == DetectorConfig()

    def test_every_ablation_row_runs(self):
        x = np.random.default_rng(0).uniform(0, 1, (2, 3, 64, 64))
        for name, cfg in ablation_configs().items():
            head, _ = Detector.build(cfg).forward(x)
            assert head.shape == (2, 5, 4, 4) and np.isfinite(head).all(), name

    def test_round_trip_dict(self):
        cfg = DetectorConfig(stem="focus", grm="plain_mhsa", C=4.5)
        assert DetectorConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("bad", [dict(stem="vgg"), dict(grm="ffn"), dict(image_size=48),
                                     dict(loss="giou"), dict(widths=(8, 16, 32, 12))])
    def test_rejects_bad_fields(self, bad):
        with pytest.raises(ConfigError):
            DetectorConfig(**bad)

    def test_unknown_field(self):
        with pytest.raises(ConfigError):
            DetectorConfig.from_dict({"depth": 3})


class TestSppf:
    def test_constant_map(self):
        rng = np.random.default_rng(0)
        p = sppf_params(rng, 4)
        out, _ = sppf_forward(np.full((1, 4, 3, 3), 0.7), p)
        assert out.shape == (1, 4, 3, 3)
        np.testing.assert_allclose(out, out[:, :, :1, :1] * np.ones((1, 1, 3, 3)), atol=1e-14)

    def test_compositional_oracle(self):
        rng = np.random.default_rng(1)
        p = sppf_params(rng, 4)
        x = rng.standard_normal((1, 4, 5, 6))
        y = silu(conv_loop(x, p["sppf.cv1.w"], p["sppf.cv1.b"], 1, 0))
        m1 = pool_loop(y, 5, 1, 2)
        m2 = pool_loop(m1, 5, 1, 2)
        m3 = pool_loop(m2, 5, 1, 2)
        ref = silu(conv_loop(np.concatenate([y, m1, m2, m3], 1), p["sppf.cv2.w"], p["sppf.cv2.b"], 1, 0))
        np.testing.assert_allclose(sppf_forward(x, p)[0], ref, atol=1e-10)

    def test_gradcheck(self):
        rng = np.random.default_rng(2)
        p = sppf_params(rng, 4)
        x = rng.standard_normal((2, 4, 4, 4))
        out, cache = sppf_forward(x, p)
        proj = rng.standard_normal(out.shape)
        dx, grads = sppf_backward(proj, cache)
        rep = core.grad_check(lambda: float((sppf_forward(x, p)[0] * proj).sum()),
                              {"x": x, **p}, {"x": dx, **grads})
        assert rep.passed, rep.errors


class TestBackward:
    @pytest.mark.parametrize("name", ["baseline", "+center_loss"])
    def test_grads_cover_every_parameter(self, name):
        cfg = dataclasses.replace(table3_configs()[name], image_size=32, widths=(4, 8, 8, 8))
        model = Detector.build(cfg)
        head, caches = model.forward(np.random.default_rng(0).uniform(0, 1, (2, 3, 32, 32)))
        grads = model.backward(np.ones_like(head), caches)
        assert set(grads) == set(model.params)
        assert all(grads[k].shape == v.shape for k, v in model.params.items())

    def test_end_to_end_gradcheck(self):
        rep = check_detector(seed=0)
        assert rep.passed, {k: v for k, v in rep.errors.items() if v > rep.tolerance}
        assert rep.tolerance == 1e-3
