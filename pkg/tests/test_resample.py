import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from joem.embedding import SemanticTable
from joem.errors import InvalidInput, InvalidParameter, UnknownClass
from joem.resample import (bilinear_upsample, interpolated_semantic_map, nn_downsample,
                           resize_bilinear, stack_semantic)


def scalar_bilinear(src, out_h, out_w):
    """Per-pixel reference: half-pixel centres, edge replication."""
    h, w = len(src), len(src[0])
    out = [[0.0] * out_w for _ in range(out_h)]
    for i in range(out_h):
        y = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1)
        y0 = int(y)
        y1 = min(y0 + 1, h - 1)
        a = y - y0
        for j in range(out_w):
            x = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1)
            x0 = int(x)
            x1 = min(x0 + 1, w - 1)
            b = x - x0
            out[i][j] = ((1 - a) * (1 - b) * src[y0][x0] + (1 - a) * b * src[y0][x1]
                         + a * (1 - b) * src[y1][x0] + a * b * src[y1][x1])
    return np.array(out)


def table_of(n, dim=3, seed=0):
    rng = np.random.default_rng(seed)
    return SemanticTable({c: rng.standard_normal(dim) for c in range(n)})


class TestNearestDownsample:
    def test_identity(self):
        m = np.arange(16).reshape(4, 4)
        np.testing.assert_array_equal(nn_downsample(m, 1), m)

    def test_constant(self):
        np.testing.assert_array_equal(nn_downsample(np.full((4, 4), 3), 2), np.full((2, 2), 3))

    def test_checkerboard_against_index_oracle(self):
        m = np.indices((4, 4)).sum(axis=0) % 2
        out = nn_downsample(m, 2)
        # centre of cell (i, j) falls on source pixel (2i + 1, 2j + 1)
        oracle = np.array([[m[2 * i + 1, 2 * j + 1] for j in range(2)] for i in range(2)])
        np.testing.assert_array_equal(out, oracle)
        np.testing.assert_array_equal(out, np.zeros((2, 2)))

    def test_non_divisible_clamps(self):
        m = np.arange(25).reshape(5, 5)
        out = nn_downsample(m, 2)
        assert out.shape == (3, 3)
        np.testing.assert_array_equal(out[:, 0], [m[1, 1], m[3, 1], m[4, 1]])

    @pytest.mark.parametrize("r", [0, -1, 1.5])
    def test_bad_factor(self, r):
        with pytest.raises(InvalidParameter):
            nn_downsample(np.zeros((4, 4), dtype=int), r)

    def test_float_mask_rejected(self):
        with pytest.raises(InvalidInput):
            nn_downsample(np.zeros((4, 4)), 2)


class TestBilinear:
    def test_frozen_two_by_two(self):
        out = bilinear_upsample(np.array([[0.0, 1.0], [2.0, 3.0]])[..., None], 2)[..., 0]
        expected = np.array([[0.0, 0.25, 0.75, 1.0],
                             [0.5, 0.75, 1.25, 1.5],
                             [1.5, 1.75, 2.25, 2.5],
                             [2.0, 2.25, 2.75, 3.0]])
        np.testing.assert_allclose(out, expected, atol=1e-15)
        np.testing.assert_allclose(out, scalar_bilinear([[0, 1], [2, 3]], 4, 4), atol=1e-15)

    @pytest.mark.parametrize("shape,r", [((3, 5), 2), ((2, 2), 4), ((4, 3), 3)])
    def test_matches_scalar_reference(self, shape, r):
        src = np.random.default_rng(1).standard_normal(shape)
        out = bilinear_upsample(src[..., None], r)[..., 0]
        np.testing.assert_allclose(out, scalar_bilinear(src.tolist(), shape[0] * r, shape[1] * r),
                                   atol=1e-12)

    def test_identity(self):
        x = np.random.default_rng(2).standard_normal((3, 4, 2))
        np.testing.assert_array_equal(bilinear_upsample(x, 1), x)

    @given(st.floats(-1e3, 1e3), st.integers(1, 5))
    def test_constant_exact(self, k, r):
        out = bilinear_upsample(np.full((3, 2, 2), k), r)
        assert np.all(out == k)

    @settings(max_examples=30)
    @given(arrays(np.float64, (3, 3, 2), elements=st.floats(-10, 10)),
           arrays(np.float64, (3, 3, 2), elements=st.floats(-10, 10)),
           st.floats(-3, 3), st.floats(-3, 3))
    def test_linear(self, a, b, alpha, beta):
        lhs = bilinear_upsample(alpha * a + beta * b, 3)
        rhs = alpha * bilinear_upsample(a, 3) + beta * bilinear_upsample(b, 3)
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)

    def test_empty_rejected(self):
        with pytest.raises(InvalidInput):
            bilinear_upsample(np.zeros((0, 2, 1)), 2)
        with pytest.raises(InvalidInput):
            resize_bilinear(np.zeros((0, 2)), 3, 3)


class TestStacking:
    def test_single_pixel(self):
        t = table_of(3)
        np.testing.assert_array_equal(stack_semantic(np.array([[2]]), t)[0, 0], t.vector(2))

    def test_rows(self):
        t = table_of(3)
        out = stack_semantic(np.array([[1, 1], [2, 2]]), t)
        np.testing.assert_array_equal(out[0], [t.vector(1)] * 2)
        np.testing.assert_array_equal(out[1], [t.vector(2)] * 2)

    def test_missing_class_names_id(self):
        with pytest.raises(UnknownClass, match="7"):
            stack_semantic(np.array([[7]]), table_of(3))

    @given(st.integers(1, 4))
    def test_r1_is_stack(self, seed):
        m = np.random.default_rng(seed).integers(0, 3, (6, 5))
        t = table_of(3)
        a = interpolated_semantic_map(m, t, 1)
        assert a.tobytes() == stack_semantic(m, t).tobytes()

    @pytest.mark.parametrize("r", [2, 3, 4])
    def test_constant_mask(self, r):
        t = table_of(3)
        out = interpolated_semantic_map(np.full((8, 8), 1), t, r)
        assert np.all(out == t.vector(1))

    def test_vertical_split_composition(self):
        t = table_of(2)
        m = np.zeros((16, 16), dtype=int)
        m[:, 8:] = 1
        out = interpolated_semantic_map(m, t, 4)
        small = stack_semantic(nn_downsample(m, 4), t)
        np.testing.assert_allclose(out, bilinear_upsample(small, 4), atol=1e-15)
        sa, sb = t.vector(0), t.vector(1)
        # columns further than r from the boundary hold the exact vectors
        assert np.all(out[:, :4] == sa) and np.all(out[:, 12:] == sb)
        # the band is a convex combination with alpha from the scalar reference
        col = scalar_bilinear([[1.0, 1.0, 0.0, 0.0]], 1, 16)[0]
        for j in range(16):
            np.testing.assert_allclose(out[3, j], col[j] * sa + (1 - col[j]) * sb, atol=1e-12)
        assert np.all((col >= 0) & (col <= 1))

    @settings(max_examples=25)
    @given(st.integers(0, 10_000), st.sampled_from([2, 3, 4]))
    def test_convex_hull(self, seed, r):
        rng = np.random.default_rng(seed)
        t = SemanticTable({c: np.eye(4)[c] for c in range(4)})
        m = rng.integers(0, 4, (9, 7))
        out = interpolated_semantic_map(m, t, r)
        # with one-hot vectors, convexity means non-negative weights summing to 1
        assert np.all(out >= -1e-12)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
        present = set(np.unique(nn_downsample(m, r)).tolist())
        absent = [c for c in range(4) if c not in present]
        assert np.all(out[..., absent] == 0)
