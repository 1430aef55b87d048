"""Haar transform, the residual wavelet stem and the two comparison stems."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tinydet import rhwd
from tinydet.core import GeometryError
from tinydet.gradcheck import check_rhwd


def haar_blocks(x):
    """Direct per-block formulas, one 2x2 block at a time."""
    B, C, H, W = x.shape
    out = np.zeros((4, B, C, H // 2, W // 2))
    for n in range(B):
        for c in range(C):
            for i in range(H // 2):
                for j in range(W // 2):
                    a, b = x[n, c, 2 * i, 2 * j], x[n, c, 2 * i, 2 * j + 1]
                    cc, d = x[n, c, 2 * i + 1, 2 * j], x[n, c, 2 * i + 1, 2 * j + 1]
                    out[:, n, c, i, j] = [(a + b + cc + d) / 2, (a - b + cc - d) / 2,
                                          (a + b - cc - d) / 2, (a - b - cc + d) / 2]
    return out


class TestHaar:
    def test_constant_image(self):
        bands = rhwd.haar_forward(np.full((1, 2, 4, 6), 1.5))
        np.testing.assert_array_equal(bands.A, 3.0)
        for d in (bands.H, bands.V, bands.D):
            np.testing.assert_array_equal(d, 0.0)

    def test_single_block(self):
        A, H, V, D = rhwd.haar_forward(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert (A.item(), H.item(), V.item(), D.item()) == (5.0, -1.0, -2.0, 0.0)

    def test_matches_block_formulas(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 6, 4))
        np.testing.assert_allclose(np.stack(rhwd.haar_forward(x)), haar_blocks(x), atol=1e-14)

    def test_parseval(self):
        x = np.random.default_rng(1).standard_normal((1, 3, 8, 8))
        energy = sum((b**2).sum() for b in rhwd.haar_forward(x))
        assert abs(energy - (x**2).sum()) <= 1e-10

    def test_odd_extent_names_axis(self):
        with pytest.raises(GeometryError, match="width"):
            rhwd.haar_forward(np.zeros((1, 1, 4, 5)))

    def test_inverse_trivial_cases(self):
        z = np.zeros((1, 2, 3, 3))
        np.testing.assert_array_equal(rhwd.haar_inverse((z, z, z, z)), 0.0)
        img = rhwd.haar_inverse((np.full((1, 1, 2, 2), 2 * 0.7), z[:, :1, :2, :2],
                                 z[:, :1, :2, :2], z[:, :1, :2, :2]))
        np.testing.assert_allclose(img, 0.7)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.floats(-3, 3), st.floats(-3, 3),
           st.integers(0, 2**31 - 1))
    def test_linearity(self, h, w, alpha, beta, seed):
        rng = np.random.default_rng(seed)
        x, y = rng.standard_normal((2, 1, 2, 2 * h, 2 * w))
        lhs = rhwd.haar_forward(alpha * x + beta * y)
        for l, bx, by in zip(lhs, rhwd.haar_forward(x), rhwd.haar_forward(y)):
            np.testing.assert_allclose(l, alpha * bx + beta * by, atol=1e-10)


class TestStems:
    @pytest.mark.parametrize("variant", ["rhwd", "largekernel", "focus"])
    def test_output_shape(self, variant):
        rng = np.random.default_rng(0)
        params, state = rhwd.init_stem(rng, variant, 3, 32)
        fwd, _ = rhwd.STEMS[variant]
        out, _ = fwd(rng.standard_normal((1, 3, 64, 64)), params, state)
        assert out.shape == (1, 32, 32, 32)

    def test_zero_image_zero_output(self):
        params, _ = rhwd.init_stem(np.random.default_rng(0), "rhwd", 3, 8)
        out, _ = rhwd.rhwd_forward(np.zeros((2, 3, 8, 8)), params)
        np.testing.assert_array_equal(out, 0.0)

    def test_zero_local_branch_equals_largekernel(self):
        rng = np.random.default_rng(1)
        params, _ = rhwd.init_stem(rng, "rhwd", 3, 8)
        params["stem.local.w"][:] = 0.0
        x = rng.standard_normal((2, 3, 16, 16))
        full, _ = rhwd.rhwd_forward(x, params)
        glob, _ = rhwd.largekernel_forward(x, params)
        np.testing.assert_array_equal(full, glob)

    def test_space_to_depth_block(self):
        out = rhwd.space_to_depth(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
        assert out.shape == (1, 4, 1, 1)
        assert sorted(out.ravel()) == [1.0, 2.0, 3.0, 4.0]

    def test_focus_identity_conv_picks_top_left(self):
        x = np.random.default_rng(2).uniform(0, 1, (1, 1, 6, 6))
        w = np.zeros((1, 4, 3, 3))
        w[0, 0, 1, 1] = 1.0
        from tinydet import core
        out = core.conv2d(rhwd.space_to_depth(x), w, padding=1)
        np.testing.assert_array_equal(out[0, 0], x[0, 0, 0::2, 0::2])

    def test_running_state_moves_in_train_only(self):
        rng = np.random.default_rng(3)
        params, state = rhwd.init_stem(rng, "rhwd", 3, 4)
        x = rng.standard_normal((2, 3, 8, 8)) + 2
        rhwd.rhwd_forward(x, params, state, "infer")
        np.testing.assert_array_equal(state["stem.global"]["mean"], 0.0)
        rhwd.rhwd_forward(x, params, state, "train")
        assert np.abs(state["stem.global"]["mean"]).max() > 0


def test_stem_gradients():
    rep = check_rhwd(seed=0)
    assert rep.passed, rep.errors
