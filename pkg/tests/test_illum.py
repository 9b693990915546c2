import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from afif4.illum import (
    build_surround,
    convolve,
    convolve_array,
    default_scale,
    rescale_unit,
    ssr_enhance,
    ssr_response,
)
from afif4.imagecore import ImageBuffer
from oracles import naive_convolve, naive_gaussian_weights, scalar_ssr


class TestSurround:
    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.3, 6.0), st.integers(0, 4))
    def test_unit_sum_positive_symmetric(self, G, extra):
        s = build_surround(G, math.ceil(2 * G) + extra)
        w = s.weights
        assert abs(w.sum() - 1.0) < 1e-9
        assert np.all(w > 0)
        assert np.array_equal(w, w[::-1, ::-1])
        assert np.allclose(w, w.T, rtol=0, atol=1e-15)

    def test_center_weight_direct_sum(self):
        Z = sum(math.exp(-(i * i + j * j)) for i in range(-2, 3) for j in range(-2, 3))
        s = build_surround(1.0, 2)
        assert abs(s.weights[2, 2] - 1.0 / Z) < 1e-12

    def test_matches_naive_weights(self):
        s = build_surround(2.5, 6)
        assert np.max(np.abs(s.weights - naive_gaussian_weights(2.5, 6))) < 1e-15

    def test_errors(self):
        with pytest.raises(ValueError):
            build_surround(0.0, 3)
        with pytest.raises(ValueError):
            build_surround(-1.0)
        with pytest.raises(ValueError):
            build_surround(2.0, 3)

    def test_defaults(self):
        assert default_scale(40, 64) == 16.0
        assert build_surround(1.2).radius == 4


class TestConvolve:
    def test_constant_preserved(self):
        img = ImageBuffer.constant(12, 9, 0.3)
        out = convolve(img, build_surround(1.5))
        assert np.allclose(out.pixels, 0.3, rtol=0, atol=1e-12)

    def test_impulse_reproduces_kernel(self):
        arr = np.zeros((9, 9))
        arr[4, 4] = 1.0
        s = build_surround(1.0, 2)
        out = convolve_array(arr[:, :, None], s)[:, :, 0]
        assert np.max(np.abs(out[2:7, 2:7] - s.weights)) < 1e-12
        assert np.max(np.abs(out - naive_convolve(arr, s.weights))) < 1e-12

    def test_naive_oracle_random(self, rng):
        arr = rng.random((16, 16, 3))
        s = build_surround(2.0, 5)
        out = convolve_array(arr, s)
        for c in range(3):
            assert np.max(np.abs(out[:, :, c] - naive_convolve(arr[:, :, c], s.weights))) < 1e-9


class TestSSR:
    def test_constant_maps_to_half(self):
        img = ImageBuffer.constant(10, 10, 0.42, channels=3)
        s = build_surround(2.0)
        assert np.max(np.abs(ssr_response(img.pixels, s))) < 1e-12
        assert np.all(ssr_enhance(img, s).pixels == 0.5)

    def test_scale_invariance(self, rng):
        arr = rng.random((16, 16, 1)) + 0.1
        s = build_surround(2.0)
        k = 3.7
        # eps scales with the input so that log k cancels exactly
        a = ssr_response(arr, s, eps=1e-3)
        b = ssr_response(k * arr, s, eps=k * 1e-3)
        assert np.max(np.abs(a - b)) < 1e-6

    def test_scalar_oracle(self, rng):
        arr = rng.random((16, 16))
        s = build_surround(1.5, 4)
        eps = 1 / 255
        got = ssr_response(arr, s, eps)[:, :, 0]
        assert np.max(np.abs(got - scalar_ssr(arr, s.weights, eps))) < 1e-9

    def test_output_range(self, random_image):
        out = ssr_enhance(random_image(20, 14, 3))
        assert out.pixels.min() == 0.0 and out.pixels.max() == 1.0

    def test_eps_guard(self, random_image):
        with pytest.raises(ValueError):
            ssr_response(random_image().pixels, build_surround(1.0), eps=0.0)

    def test_rescale_flat(self):
        assert np.all(rescale_unit(np.full((3, 3), 7.0)) == 0.5)
