"""Synthetic tiny-object scenes and the portable any-map image files."""

import numpy as np
import pytest
from scipy import ndimage

from tinydet.core import ConfigError
from tinydet.scenes import BACKGROUND, SceneConfig, gen_scene, make_dataset, read_pnm, write_pnm


def test_clean_single_object_is_boxed():
    cfg = SceneConfig(objects=(1, 1), clutter=0.0)
    for seed in range(20):
        img, boxes = gen_scene(np.random.default_rng(seed), cfg)
        assert len(boxes) == 1
        mask = (np.abs(img - BACKGROUND) > 1e-12).any(axis=0)
        _, n = ndimage.label(mask)
        assert n == 1
        ys, xs = np.nonzero(mask)
        assert boxes[0] == (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)


def test_same_seed_is_bit_identical():
    a = make_dataset(5, SceneConfig(seed=11))
    b = make_dataset(5, SceneConfig(seed=11))
    for (ia, ba), (ib, bb) in zip(a, b):
        assert ia.tobytes() == ib.tobytes() and ba == bb
    assert make_dataset(1, SceneConfig(seed=12))[0][0].tobytes() != a[0][0].tobytes()


def test_boxes_in_bounds_and_size_range():
    cfg = SceneConfig(objects=(3, 3), seed=5)
    boxes = []
    for img, bs in make_dataset(400, cfg):
        assert img.min() >= 0 and img.max() <= 1
        boxes += bs
    assert len(boxes) >= 1000
    b = np.array(boxes)
    assert (b[:, :2] >= 0).all() and (b[:, 2:] <= cfg.size).all()
    wh = b[:, 2:] - b[:, :2]
    assert (wh >= cfg.min_size).all() and (wh <= cfg.max_size).all()


def test_cell_band_places_centres():
    cfg = SceneConfig(cell_band=(6, 10), seed=2)
    for _, boxes in make_dataset(30, cfg):
        for b in boxes:
            for c in ((b[0] + b[2]) / 2 % 16, (b[1] + b[3]) / 2 % 16):
                assert 6 <= c <= 10


@pytest.mark.parametrize("bad", [dict(size=48), dict(max_size=16), dict(min_size=5, max_size=4),
                                 dict(objects=(3, 1))])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        SceneConfig(**bad)


@pytest.mark.parametrize("channels", [1, 3])
def test_pnm_round_trip(tmp_path, channels):
    img = np.random.default_rng(0).integers(0, 256, (channels, 8, 6)) / 255.0
    path = tmp_path / ("x.ppm" if channels == 3 else "x.pgm")
    write_pnm(path, img)
    np.testing.assert_allclose(read_pnm(path), img, atol=1e-12)
    assert path.read_bytes()[:2] == (b"P6" if channels == 3 else b"P5")
