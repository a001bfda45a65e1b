import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import firereg.tensor as T
from firereg.tensor import ShapeError, Tensor
from firereg.warp import (
    affine_grid,
    bending_energy,
    compose,
    compose_affine,
    displacement_grid,
    identity_affine,
    identity_grid,
    jacobian_det_map,
    sample,
    sample_nearest,
)

from conftest import check_grads


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


def linear_image(shape, coef, offset=0.3):
    """f(p) = coef . p + offset on the normalized grid, one channel."""
    g = identity_grid(shape, np.float64).data
    return (np.tensordot(coef, g, axes=1) + offset)[None]


small_affine = arrays(np.float64, (2, 3), elements=st.floats(-0.15, 0.15)).map(
    lambda d: identity_affine(2, np.float64) + d
)


class TestGrids:
    def test_identity_grid_examples(self):
        np.testing.assert_array_equal(identity_grid((3,)).data[0], [-1, 0, 1])
        g = identity_grid((2, 2)).data
        np.testing.assert_array_equal(g[0], [[-1, -1], [1, 1]])
        np.testing.assert_array_equal(g[1], [[-1, 1], [-1, 1]])
        with pytest.raises(ShapeError):
            identity_grid((1, 4))

    def test_affine_grid_examples(self):
        shape = (5, 4)
        np.testing.assert_array_equal(affine_grid(identity_affine(2), shape).data, identity_grid(shape).data)
        a = identity_affine(2)
        a[:, 2] = [0.25, -0.5]
        np.testing.assert_allclose(
            affine_grid(a, shape).data,
            identity_grid(shape).data + np.array([0.25, -0.5])[:, None, None], atol=1e-7,
        )
        with pytest.raises(ShapeError):
            affine_grid(identity_affine(3), shape)

    def test_affine_grid_matches_pointwise_product(self, rng):
        # oracle: explicit A @ [p; 1] per grid point
        a = rng.normal(size=(2, 3))
        shape = (4, 6)
        g = affine_grid(t64(a), shape).data
        base = identity_grid(shape, np.float64).data
        for i in range(shape[0]):
            for j in range(shape[1]):
                p = np.array([base[0, i, j], base[1, i, j], 1.0])
                np.testing.assert_allclose(g[:, i, j], a @ p, rtol=1e-12, atol=1e-15)

    def test_half_scale_zooms_about_centre(self):
        img = linear_image((9, 9), np.array([1.0, 0.0]), 0.0)
        a = np.diag([0.5, 0.5, 0.0])[:2]
        out = sample(t64(img), affine_grid(t64(a), (9, 9))).data
        np.testing.assert_allclose(out, img * 0.5, atol=1e-12)

    def test_displacement_grid_examples(self):
        shape = (6, 5)
        zero = np.zeros((2, 6, 5), np.float32)
        np.testing.assert_array_equal(displacement_grid(zero, shape).data, identity_grid(shape).data)
        u = np.zeros((2, 6, 5), np.float32)
        u[0] = 0.5
        np.testing.assert_array_equal(
            displacement_grid(u, shape).data - identity_grid(shape).data,
            u,
        )
        u16 = np.zeros((2, 16, 16), np.float32)
        u16[0], u16[1] = 0.125, -0.375
        expect = identity_grid((64, 64)).data + np.array([0.125, -0.375], np.float32)[:, None, None]
        np.testing.assert_array_equal(displacement_grid(u16, (64, 64)).data, expect)

    def test_compose_examples(self, rng):
        shape = (7, 6)
        a = identity_affine(2) + rng.normal(0, 0.1, size=(2, 3)).astype(np.float32)
        zero = np.zeros((2, 4, 3), np.float32)
        np.testing.assert_array_equal(compose(a, zero, shape).data, affine_grid(a, shape).data)
        u = rng.normal(0, 0.1, size=(2, 4, 3)).astype(np.float32)
        np.testing.assert_array_equal(
            compose(identity_affine(2), u, shape).data, displacement_grid(u, shape).data
        )
        trans = identity_affine(2)
        trans[0, 2] = 0.2
        const = np.zeros((2, 4, 3), np.float32)
        const[0] = 0.3
        shift = compose(trans, const, shape).data - identity_grid(shape).data
        np.testing.assert_allclose(shift[0], 0.5, atol=1e-6)
        np.testing.assert_allclose(shift[1], 0.0, atol=1e-6)

    def test_compose_is_affine_of_displaced_points(self, rng):
        a = rng.normal(size=(2, 3))
        u = rng.normal(0, 0.1, size=(2, 5, 5))
        g = compose(t64(a), t64(u), (5, 5)).data
        p = identity_grid((5, 5), np.float64).data + u
        expect = np.einsum("ij,j...->i...", a[:, :2], p) + a[:, 2, None, None]
        np.testing.assert_allclose(g, expect, rtol=1e-12, atol=1e-14)


class TestSample:
    def test_identity_is_exact(self, rng):
        for shape in ((2, 7, 5), (1, 4, 5, 3)):
            img = rng.normal(size=shape).astype(np.float32)
            out = sample(Tensor(img), identity_grid(shape[1:]))
            np.testing.assert_array_equal(out.data, img)

    def test_constant_image(self, rng):
        img = np.full((2, 6, 6), 0.7, np.float32)
        grid = Tensor(rng.uniform(-1, 1, size=(2, 9, 4)).astype(np.float32))
        assert np.all(sample(Tensor(img), grid).data == np.float32(0.7))

    def test_linear_image_translates_exactly(self):
        coef = np.array([0.4, -1.3])
        img = linear_image((11, 9), coef)
        shift = np.array([0.2, -0.25])
        grid = identity_grid((11, 9), np.float64).data + shift[:, None, None]
        out = sample(t64(img), t64(grid)).data
        inner = (slice(None), slice(2, -2), slice(2, -2))
        np.testing.assert_allclose(out[inner], (img + coef @ shift)[inner], atol=1e-12)

    def test_zeros_border(self):
        img = np.ones((1, 4, 4))
        grid = identity_grid((4, 4), np.float64).data + 5.0
        assert np.all(sample(t64(img), t64(grid), border="zeros").data == 0)
        assert np.all(sample(t64(img), t64(grid), border="clamp").data == 1)

    def test_rank_mismatch(self):
        with pytest.raises(ShapeError):
            sample(Tensor(np.ones((1, 4, 4))), identity_grid((4, 4, 4)))

    def test_gradients(self, rng):
        img = rng.normal(size=(2, 5, 6))
        # keep grid points away from cell boundaries
        idx = rng.integers(0, 4, size=(2, 4, 3)) + rng.uniform(0.2, 0.8, size=(2, 4, 3))
        grid = idx / np.array([4.0, 5.0])[:, None, None] * 2 - 1
        c = rng.normal(size=(2, 4, 3))
        for border in ("clamp", "zeros"):
            check_grads(lambda i, g, c: T.tsum(sample(i, g, border) * c), [img, grid, c], which=[0, 1])

    def test_gradients_3d(self, rng):
        img = rng.normal(size=(1, 4, 4, 4))
        grid = (rng.integers(0, 3, size=(3, 2, 3, 2)) + rng.uniform(0.2, 0.8, size=(3, 2, 3, 2))) / 3 * 2 - 1
        c = rng.normal(size=(1, 2, 3, 2))
        check_grads(lambda i, g, c: T.tsum(sample(i, g) * c), [img, grid, c], which=[0, 1])

    def test_nearest(self):
        mask = np.zeros((1, 5, 5), np.uint8)
        mask[0, 2, 2] = 1
        out = sample_nearest(mask, identity_grid((5, 5)).data)
        np.testing.assert_array_equal(out, mask)
        shifted = identity_grid((5, 5)).data + np.array([0.5, 0.0])[:, None, None]
        out = sample_nearest(mask, shifted)
        assert out[0, 1, 2] == 1 and out.sum() == 1


class TestBendingEnergy:
    def test_examples(self, rng):
        assert float(bending_energy(Tensor(np.zeros((2, 5, 5)))).data) == 0
        u = np.arange(7.0) ** 2
        assert float(bending_energy(t64(u[None])).data) == pytest.approx(20.0)
        with pytest.raises(ShapeError):
            bending_energy(Tensor(np.zeros((2, 2, 5))))

    def test_gradient(self, rng):
        check_grads(lambda u: bending_energy(u), [rng.normal(size=(2, 5, 4))])
        check_grads(lambda u: bending_energy(u), [rng.normal(size=(3, 3, 4, 3))])

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (2, 3), elements=st.floats(-3, 3)))
    def test_affine_fields_have_zero_energy(self, b):
        g = identity_grid((6, 5), np.float64).data
        u = np.einsum("ij,j...->i...", b[:, :2], g) + b[:, 2, None, None]
        assert float(bending_energy(t64(u)).data) <= 1e-12

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 1), st.integers(1, 3), st.integers(1, 3), st.floats(1e-3, 10))
    def test_bump_is_positive(self, comp, i, j, amp):
        u = np.zeros((2, 5, 5))
        u[comp, i, j] = amp
        assert float(bending_energy(t64(u)).data) > 0


class TestJacobian:
    def test_examples(self):
        np.testing.assert_allclose(jacobian_det_map(identity_grid((6, 5))), 1.0, atol=1e-6)
        s = np.diag([0.7, 0.7, 0.7, 0.0])[:3]
        np.testing.assert_allclose(jacobian_det_map(affine_grid(s, (4, 5, 4))), 0.343, atol=1e-6)
        flip = -identity_grid((7,)).data
        np.testing.assert_allclose(jacobian_det_map(flip), -1.0, atol=1e-6)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (2, 3), elements=st.floats(-2, 2)))
    def test_affine_determinant(self, a):
        det = jacobian_det_map(affine_grid(t64(a), (5, 6)))
        np.testing.assert_allclose(det, np.linalg.det(a[:, :2]), atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(small_affine, small_affine, arrays(np.float64, 2, elements=st.floats(-1, 1)))
def test_sequential_affine_sampling_equals_product(a, b, coef):
    shape = (12, 10)
    img = t64(linear_image(shape, coef))
    twice = sample(sample(img, affine_grid(t64(a), shape)), affine_grid(t64(b), shape)).data
    once = sample(img, affine_grid(t64(compose_affine(a, b)), shape)).data
    inner = (slice(None), slice(3, -3), slice(3, -3))
    np.testing.assert_allclose(twice[inner], once[inner], atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, (2, 6, 5), elements=st.floats(-1, 1, width=32)))
def test_identity_sampling_property(img):
    np.testing.assert_array_equal(sample(Tensor(img), identity_grid((6, 5))).data, img)
