import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from riinterp import nd
from riinterp.model import compute_importance, softmax_splat
from riinterp.nd import Tensor
from riinterp.projection import ProjectionConfig, RangeImage

from gradcheck import assert_grads_match


def random_flow(rng, h, w, scale=1.5):
    f = rng.uniform(-scale, scale, size=(2, h, w))
    # stay off integer displacements where bilinear weights have kinks
    frac = f - np.round(f)
    f[np.abs(frac) < 0.05] += 0.1
    return f


class TestBackwarp:
    def test_zero_flow_identity(self):
        img = np.random.default_rng(0).normal(size=(3, 5, 6)).astype(np.float32)
        out = nd.backwarp(Tensor(img), Tensor(np.zeros((2, 5, 6), dtype=np.float32)))
        np.testing.assert_array_equal(out.data, img)

    def test_integer_shift(self):
        ramp = np.tile(np.arange(6.0), (4, 1))[None]
        flow = np.zeros((2, 4, 6))
        flow[0] = 1.0
        out = nd.backwarp(Tensor(ramp), Tensor(flow)).data[0]
        np.testing.assert_array_equal(out[:, :5], ramp[0, :, 1:])
        np.testing.assert_array_equal(out[:, 5], 0.0)

    def test_gradients(self):
        rng = np.random.default_rng(1)
        wts = rng.normal(size=(2, 5, 6))
        assert_grads_match(lambda a, f: nd.tsum(nd.backwarp(a, f) * Tensor(wts)),
                           [rng.normal(size=(2, 5, 6)), random_flow(rng, 5, 6)])


def correlation_oracle(f1, f2, r):
    c, h, w = f1.shape
    d = 2 * r + 1
    out = np.zeros((d * d, h, w))
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            ch = (dy + r) * d + (dx + r)
            for y in range(h):
                for x in range(w):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w:
                        out[ch, y, x] = sum(f1[k, y, x] * f2[k, yy, xx] for k in range(c)) / c
    return out


class TestCorrelation:
    def test_constant_self_similarity(self):
        f = np.full((4, 6, 6), 1.5)
        out = nd.correlation(Tensor(f), Tensor(f), 1).data
        assert out[4, 3, 3] == pytest.approx(1.5 ** 2)

    def test_radius_zero(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(2, 3, 4, 5))
        out = nd.correlation(Tensor(a), Tensor(b), 0).data
        assert out.shape == (1, 4, 5)
        np.testing.assert_allclose(out[0], (a * b).sum(0) / 3)

    def test_loop_oracle(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(2, 3, 5, 6))
        np.testing.assert_allclose(nd.correlation(Tensor(a), Tensor(b), 2).data,
                                   correlation_oracle(a, b, 2), rtol=1e-5, atol=1e-12)

    def test_negative_radius(self):
        with pytest.raises(ValueError):
            nd.correlation(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 2, 2))), -1)

    def test_gradients(self):
        rng = np.random.default_rng(4)
        wts = rng.normal(size=(9, 4, 5))
        assert_grads_match(lambda a, b: nd.tsum(nd.correlation(a, b, 1) * Tensor(wts)),
                           [rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 4, 5))])


class TestSoftmaxSplat:
    def test_zero_flow_identity(self):
        rng = np.random.default_rng(5)
        src = rng.normal(size=(3, 6, 7)).astype(np.float32)
        out, cover = softmax_splat(Tensor(src), Tensor(np.zeros((2, 6, 7), np.float32)),
                                   Tensor(np.full((1, 6, 7), -1.3, np.float32)))
        np.testing.assert_allclose(out.data, src, rtol=0, atol=1e-6)
        assert cover.all()

    def test_two_pixel_collision(self):
        src = np.zeros((1, 1, 3))
        src[0, 0, 0], src[0, 0, 2] = 2.0, 7.0
        flow = np.zeros((2, 1, 3))
        flow[0, 0, 0], flow[0, 0, 2] = 1.0, -1.0
        z = np.array([[[-0.5, 0.0, -5.0]]])
        mask = np.array([[[1, 0, 1]]], dtype=bool)
        out, cover = softmax_splat(Tensor(src), Tensor(flow), Tensor(z), mask)
        expected = (np.exp(-0.5) * 2.0 + np.exp(-5.0) * 7.0) / (np.exp(-0.5) + np.exp(-5.0))
        assert out.data[0, 0, 1] == pytest.approx(expected, abs=1e-12)
        assert cover[0].tolist() == [[False, True, False]]
        assert out.data[0, 0, 0] == 0.0 and out.data[0, 0, 2] == 0.0

    def test_constant_image_partition_of_unity(self):
        rng = np.random.default_rng(6)
        src = np.full((2, 8, 8), 4.25)
        out, cover = softmax_splat(Tensor(src), Tensor(random_flow(rng, 8, 8)), Tensor(np.zeros((1, 8, 8))))
        np.testing.assert_allclose(out.data[:, cover[0]], 4.25, rtol=1e-12)
        np.testing.assert_array_equal(out.data[:, ~cover[0]], 0.0)

    def test_gradients(self):
        rng = np.random.default_rng(7)
        wts = rng.normal(size=(2, 5, 5))

        def f(src, flow, z):
            out, _ = softmax_splat(src, flow, z)
            return nd.tsum(out * Tensor(wts))

        assert_grads_match(f, [rng.normal(size=(2, 5, 5)), random_flow(rng, 5, 5, 0.8),
                               rng.normal(size=(1, 5, 5))])


class TestImportance:
    def _ri(self, ranges, valid):
        cfg = ProjectionConfig(1, len(ranges))
        data = np.zeros((5, 1, len(ranges)), dtype=np.float32)
        data[0, 0] = ranges
        data[1, 0] = ranges
        data[4, 0] = valid
        return RangeImage(data, cfg)

    def test_near_point_dominates(self):
        z = compute_importance(self._ri([5.0, 50.0], [1, 1])).data[0, 0]
        assert np.exp(z[0]) / np.exp(z[1]) == pytest.approx(np.exp(4.5), rel=1e-5)
        assert np.exp(z[0]) / np.exp(z[1]) == pytest.approx(90.0, rel=0.01)

    def test_equal_ranges_uniform(self):
        z = compute_importance(self._ri([12.0, 12.0, 12.0], [1, 1, 1])).data
        assert np.all(z == z.flat[0])

    def test_invalid_never_wins(self):
        z = compute_importance(self._ri([80.0, 0.0], [1, 0])).data[0, 0]
        assert np.exp(z[0] - z[1]) == pytest.approx(np.exp(12.0), rel=1e-5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.2, 3.0))
def test_splat_convex_bounds(seed, scale):
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(2, 6, 6))
    out, cover = softmax_splat(Tensor(src), Tensor(rng.uniform(-scale, scale, (2, 6, 6))),
                               Tensor(rng.normal(size=(1, 6, 6))))
    for c in range(2):
        vals = out.data[c][cover[0]]
        assert np.all(vals >= src[c].min() - 1e-12) and np.all(vals <= src[c].max() + 1e-12)
    assert np.all(out.data[:, ~cover[0]] == 0)
