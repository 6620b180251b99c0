import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from edgs import autodiff as ad
from edgs.autodiff import Graph, check_gradients
from edgs.deformation import GaussianPrimitive
from edgs.rasterizer import (ALPHA_MAX, COV_DILATION, CameraFrame, Splat2D, build_covariance, composite,
                             composite_pixel, project, project_gaussian, render_primitives)
from edgs.synthetic import look_at


def axis_camera(w=32, h=32, f=100.0):
    return CameraFrame(np.eye(3), np.zeros(3), f, f, (w - 1) / 2, (h - 1) / 2, w, h)


def random_primitives(rng, n, spread=1.2):
    means = rng.uniform([-spread, -spread, 3.0], [spread, spread, 6.0], (n, 3))
    scales = np.exp(rng.uniform(-2.5, -1.0, (n, 3)))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    opac = rng.uniform(0.05, 0.95, n)
    cols = rng.uniform(0, 1, (n, 3))
    return means, scales, quats, opac, cols


def reference_render(means, scales, quats, opac, cols, cam):
    """Per-pixel loop over single-primitive routines, sorted by depth."""
    splats = []
    for i in range(len(means)):
        s = project_gaussian(GaussianPrimitive(means[i], scales[i], quats[i], opac[i], cols[i], (i, 0)), cam)
        if s is not None:
            splats.append(s)
    splats.sort(key=lambda s: s.depth)
    img = np.zeros((cam.height, cam.width, 3))
    rem = np.ones((cam.height, cam.width))
    for y in range(cam.height):
        for x in range(cam.width):
            img[y, x], rem[y, x] = composite_pixel(splats, (x, y))
    return img, rem


def test_covariance_examples():
    assert np.allclose(build_covariance([1, 0, 0, 0], [1, 2, 3]), np.diag([1.0, 4.0, 9.0]), atol=1e-15)
    h = np.sqrt(2) / 2
    assert np.allclose(build_covariance([h, 0, 0, h], [1, 2, 1]), np.diag([4.0, 1.0, 1.0]), atol=1e-12)


@given(st.integers(0, 2 ** 31))
def test_covariance_symmetric_positive(seed):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    cov = build_covariance(q, np.exp(rng.uniform(-2, 2, 3)))
    assert np.allclose(cov, cov.T, rtol=0, atol=1e-12)
    x = rng.normal(size=3)
    assert x @ cov @ x > 0


def test_projection_on_axis():
    cam = axis_camera()
    s = project_gaussian(GaussianPrimitive(np.array([0, 0, 5.0]), np.ones(3), np.array([1, 0, 0, 0.0]),
                                           0.5, np.ones(3), (0, 0)), cam)
    assert np.allclose(s.center, [cam.cx, cam.cy])
    assert np.allclose(s.cov2d, 400.0 * np.eye(2) + 0.3 * np.eye(2), rtol=0, atol=1e-9)
    behind = GaussianPrimitive(np.array([0, 0, -1.0]), np.ones(3), np.array([1, 0, 0, 0.0]), 0.5,
                               np.ones(3), (0, 0))
    assert project_gaussian(behind, cam) is None


def test_doubling_depth_halves_extent():
    cam = axis_camera()
    sig = []
    for z in (4.0, 8.0):
        s = project_gaussian(GaussianPrimitive(np.array([0, 0, z]), np.full(3, 0.3), np.array([1, 0, 0, 0.0]),
                                               0.5, np.ones(3), (0, 0)), cam)
        sig.append(np.sqrt(s.cov2d[0, 0] - COV_DILATION))
    assert np.isclose(sig[1], sig[0] / 2, rtol=1e-12)


def test_composite_examples():
    big = np.eye(2) * 100.0
    red = Splat2D(np.zeros(2), big, 1.0, 0.5, np.array([1.0, 0, 0]))
    green = Splat2D(np.zeros(2), big, 2.0, 0.5, np.array([0, 1.0, 0]))
    color, rem = composite_pixel([red, green], (0.0, 0.0))
    assert np.allclose(color, [0.5, 0.25, 0.0])
    assert np.isclose(rem, 0.25)
    color, rem = composite_pixel([], (3.0, 3.0))
    assert np.array_equal(color, np.zeros(3)) and rem == 1.0
    solid = Splat2D(np.zeros(2), big, 1.0, 1.0, np.array([0.2, 0.4, 0.6]))
    color, _ = composite_pixel([solid], (0.0, 0.0))
    assert np.allclose(color, np.array([0.2, 0.4, 0.6]) * ALPHA_MAX)


def test_empty_scene_is_background():
    cam = axis_camera(8, 8)
    img, rem = render_primitives(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0),
                                 np.zeros((0, 3)), cam, return_remainder=True)
    assert np.array_equal(img, np.zeros((8, 8, 3)))
    assert np.array_equal(rem, np.ones((8, 8)))


def test_fused_matches_per_pixel_reference():
    rng = np.random.default_rng(7)
    cam = axis_camera(24, 20)
    prims = random_primitives(rng, 25)
    ref, ref_rem = reference_render(*prims, cam)
    for mode in ("naive", "tiled"):
        img, rem = render_primitives(*prims, cam, mode=mode, return_remainder=True)
        assert np.allclose(img, ref, rtol=0, atol=1e-12)
        assert np.allclose(rem, ref_rem, rtol=0, atol=1e-12)


@given(st.integers(0, 2 ** 31), st.integers(10, 60))
def test_tiled_equals_naive(seed, n):
    rng = np.random.default_rng(seed)
    cam = axis_camera(40, 36)
    prims = random_primitives(rng, n)
    a = render_primitives(*prims, cam, mode="naive")
    b = render_primitives(*prims, cam, mode="tiled")
    assert np.max(np.abs(a - b)) <= 1e-10


@given(st.integers(0, 2 ** 31))
def test_permutation_invariant_and_alpha_bounded(seed):
    rng = np.random.default_rng(seed)
    cam = axis_camera(20, 20)
    prims = random_primitives(rng, 20)
    perm = rng.permutation(20)
    a, rem = render_primitives(*prims, cam, return_remainder=True)
    b = render_primitives(*[p[perm] for p in prims], cam)
    assert np.max(np.abs(a - b)) <= 1e-12
    assert np.all((rem >= 0) & (rem <= 1))


def test_rotated_camera_projection_matches_reference():
    rng = np.random.default_rng(3)
    rot, trans = look_at([2.0, -1.0, -5.0], [0.0, 0.0, 0.0])
    cam = CameraFrame(rot, trans, 40.0, 44.0, 9.5, 8.0, 20, 17)
    prims = random_primitives(rng, 15, spread=0.6)
    prims = (prims[0] - [0, 0, 4.5],) + prims[1:]
    ref, _ = reference_render(*prims, cam)
    assert np.allclose(render_primitives(*prims, cam), ref, rtol=0, atol=1e-12)


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraFrame(np.ones((3, 3)), np.zeros(3), 10, 10, 0, 0, 4, 4)
    with pytest.raises(ValueError):
        CameraFrame(np.eye(3), np.zeros(3), -1, 10, 0, 0, 4, 4)


def test_primitive_gradients_match_finite_differences():
    rng = np.random.default_rng(12)
    cam = axis_camera(16, 16, f=40.0)
    means, scales, quats, opac, cols = random_primitives(rng, 6, spread=0.5)
    scales = np.exp(rng.uniform(-1.6, -1.0, (6, 3)))
    log_s = np.log(scales)
    logit = np.log(opac / (1 - opac))
    weights = rng.uniform(0.5, 1.5, (16, 16, 3))

    def f(g, m, ls, q, lo, c):
        qn = q / ad.sqrt(ad.squared_norm(q, axis=-1, keepdims=True))
        splats = project(m, ad.exp(ls), qn, ad.sigmoid(lo), c, cam)
        img, _ = composite(splats, 16, 16, "tiled")
        return ad.sum(img * weights)

    errs = check_gradients(f, [means, log_s, quats, logit, cols], step=1e-4, max_coords=12, seed=1)
    assert max(errs) < 1e-3, errs
