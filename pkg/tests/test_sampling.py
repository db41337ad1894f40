import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from maskwarp.exceptions import DimensionError
from maskwarp.geometry import Intrinsics, PixelGrid, Pose6, pixel_lattice
from maskwarp.sampling import bilinear_sample, bilinear_sample_grad, warp_image
from maskwarp.scene import fronto_parallel_scene, render_scene
from oracles import bilinear_brute

TWO_BY_TWO = np.array([[0.0, 1.0], [2.0, 3.0]])


def test_integer_lattice_reproduces_source(rng):
    src = rng.uniform(size=(6, 7, 3))
    out = bilinear_sample(src, pixel_lattice(6, 7))
    np.testing.assert_array_equal(out.image, src)
    assert out.validity.all()


def test_hand_evaluated_value_and_derivatives():
    out, jac = bilinear_sample_grad(TWO_BY_TWO, np.array([[[0.5, 0.5]]]))
    assert out.image[0, 0, 0] == pytest.approx(1.5)
    assert jac.du[0, 0, 0] == pytest.approx(1.0)
    assert jac.dv[0, 0, 0] == pytest.approx(2.0)


def test_constant_image(rng):
    src = np.full((5, 5, 3), 0.37)
    coords = rng.uniform(0, 4, (5, 5, 2))
    out, jac = bilinear_sample_grad(src, coords)
    np.testing.assert_allclose(out.image, 0.37, atol=1e-15)
    np.testing.assert_array_equal(jac.du, 0)
    np.testing.assert_array_equal(jac.dv, 0)


def test_out_of_bounds_and_invalid_points_are_zero():
    src = np.ones((4, 4))
    coords = np.array([[[-0.01, 1.0], [3.0, 3.0], [1.0, 3.2], [2.0, 2.0]]])
    valid = np.array([[True, True, True, False]])
    out = bilinear_sample(src, PixelGrid(coords, valid))
    np.testing.assert_array_equal(out.validity, [[False, True, False, False]])
    np.testing.assert_array_equal(out.image[..., 0], [[0.0, 1.0, 0.0, 0.0]])


def test_matches_brute_force(rng):
    src = rng.uniform(size=(9, 8, 3))
    coords = rng.uniform(-1, 9, (9, 8, 2))
    out = bilinear_sample(src, coords)
    for i in range(9):
        for j in range(8):
            ref = bilinear_brute(src, *coords[i, j])
            if ref is None:
                assert not out.validity[i, j]
                np.testing.assert_array_equal(out.image[i, j], 0)
            else:
                np.testing.assert_allclose(out.image[i, j], ref, atol=1e-14)


@given(st.floats(0, 3), st.floats(0, 3), st.integers(0, 2**31 - 1))
def test_convexity(u, v, seed):
    src = np.random.default_rng(seed).uniform(size=(4, 4, 1))
    val = bilinear_sample(src, np.array([[[u, v]]])).image[0, 0, 0]
    u0, v0 = min(int(u), 2), min(int(v), 2)
    block = src[v0:v0 + 2, u0:u0 + 2, 0]
    assert block.min() - 1e-12 <= val <= block.max() + 1e-12


def test_right_limit_subgradient_on_lattice_lines():
    # at u = 1 exactly the derivative is the slope of the cell to the right
    src = np.array([[0.0, 1.0, 5.0]])
    _, jac = bilinear_sample_grad(src, np.array([[[1.0, 0.0]]]))
    assert jac.du[0, 0, 0] == pytest.approx(4.0)


def test_source_gradient_is_adjoint(rng):
    src = rng.uniform(size=(6, 6, 3))
    coords = rng.uniform(0, 5, (6, 6, 2))
    out, jac = bilinear_sample_grad(src, coords)
    up = rng.normal(size=out.image.shape)
    # linear in src, so <up, S src> == <S^T up, src>
    assert np.sum(up * out.image) == pytest.approx(np.sum(jac.src_vjp(up) * src), rel=1e-12)


def test_gradient_finite_differences_off_lattice(rng):
    src = rng.uniform(size=(6, 6, 3))
    coords = rng.integers(0, 5, (6, 6, 2)) + rng.uniform(0.1, 0.9, (6, 6, 2))
    up = rng.normal(size=(6, 6, 3))
    _, jac = bilinear_sample_grad(src, coords)
    gu, gv = jac.grid_vjp(up)
    h = 1e-6
    for k, g in ((0, gu), (1, gv)):
        e = np.zeros_like(coords)
        e[..., k] = h
        num = ((bilinear_sample(src, coords + e).image - bilinear_sample(src, coords - e).image) * up).sum(-1) / (2 * h)
        np.testing.assert_allclose(g, num, rtol=1e-6, atol=1e-9)


def test_channel_mismatch_raises():
    with pytest.raises(DimensionError):
        bilinear_sample(np.ones((4, 4, 2, 1)), pixel_lattice(4, 4))


# -- warping ------------------------------------------------------------------------------


def test_identity_warp_is_identity(rng):
    K = Intrinsics(8.0, 8.0, 3.5, 3.5, 8, 8)
    src = rng.uniform(size=(8, 8, 3))
    out = warp_image(src, rng.uniform(1, 5, (8, 8)), Pose6.identity(), K)
    np.testing.assert_array_equal(out.image, src)
    assert out.validity.all()


def test_large_translation_leaves_nothing_valid(rng):
    K = Intrinsics(8.0, 8.0, 3.5, 3.5, 8, 8)
    out = warp_image(rng.uniform(size=(8, 8, 3)), np.full((8, 8), 2.0), Pose6(np.zeros(3), [50.0, 0, 0]), K)
    assert not out.validity.any()
    np.testing.assert_array_equal(out.image, 0)


def test_plane_shift_oracle():
    scene = fronto_parallel_scene(size=24, depth=4.0, shift_pixels=3)
    r = render_scene(scene)
    pose = scene.relative_pose(1, 0)
    shift = r.intrinsics.fx * pose.translation[0] / 4.0
    assert shift == pytest.approx(3.0)
    out = warp_image(r.images[0], r.depths[1], pose, r.intrinsics)
    # target column u samples source column u + 3; the last three columns fall off the image
    assert not out.validity[:, -3:].any()
    assert out.validity[:, :-3].all()
    np.testing.assert_allclose(out.image[:, :-3], r.images[0][:, 3:], atol=1e-6)
    np.testing.assert_allclose(out.image[:, :-3], r.images[1][:, :-3], atol=1e-6)


def test_validity_grows_as_translation_shrinks():
    K = Intrinsics(10.0, 10.0, 7.5, 7.5, 16, 16)
    depth = np.full((16, 16), 3.0)
    src = np.full((16, 16, 1), 0.5)
    counts = [warp_image(src, depth, Pose6(np.zeros(3), [tx, 0, 0]), K).validity.sum()
              for tx in (2.0, 1.0, 0.5, 0.25, 0.0)]
    assert counts == sorted(counts)
