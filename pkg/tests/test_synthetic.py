import ast
import inspect

import numpy as np
import pytest

from edgs import synthetic
from edgs.rasterizer import CameraFrame
from edgs.synthetic import Blob, SceneSpec, generate, look_at, preset, psnr, render_blobs


def small_spec(dynamic=True, **kw):
    blobs = [Blob([-0.7, 0.0, 0.0], 0.4, [0.8, 0.2, 0.2])]
    if dynamic:
        blobs.append(Blob([0.6, 0.0, 0.3], 0.35, [0.2, 0.3, 0.9], "linear", 0.5, [0.0, 1.0, 0.0]))
    base = dict(n_timesteps=4, n_cameras=2, width=24, height=24, focal=30.0, points_per_blob=50)
    base.update(kw)
    return SceneSpec(blobs=blobs, **base)


def test_psnr_examples(rng):
    a = rng.uniform(0, 1, (8, 8, 3))
    assert psnr(a, a) == float("inf")
    b = np.clip(a, 0.2, 0.8)
    c = b + 0.1
    assert np.isclose(psnr(b, c), 20.0, rtol=0, atol=1e-9)
    assert psnr(a, b) == psnr(b, a)
    with pytest.raises(ValueError):
        psnr(a, a[:-1])


def test_static_scene_frames_identical_per_camera():
    scene = generate(small_spec(dynamic=False))
    for cam in range(2):
        imgs = [scene.frame(cam, t).ground_truth for t in range(4)]
        assert all(np.array_equal(imgs[0], im) for im in imgs[1:])


def test_same_seed_is_bitwise_identical():
    a, b = generate(small_spec()), generate(small_spec())
    assert np.array_equal(a.init_cloud.points, b.init_cloud.points)
    for fa, fb in zip(a.frames, b.frames):
        assert fa.ground_truth.tobytes() == fb.ground_truth.tobytes()
    c = generate(small_spec(seed=7))
    assert not np.array_equal(a.init_cloud.points, c.init_cloud.points)


def test_linear_motion_centroid_matches_projection():
    blob = Blob([0.2, -0.1, 0.0], 0.3, [1.0, 1.0, 1.0], "linear", 0.8, [1.0, 0.5, 0.0])
    rot, trans = look_at([0.0, 0.0, -6.0], np.zeros(3))
    cam = CameraFrame(rot, trans, 60.0, 60.0, 31.5, 31.5, 64, 64)

    def centroid(t):
        lum = render_blobs([blob], t, cam).mean(axis=-1)
        ys, xs = np.mgrid[0:64, 0:64]
        return np.array([(lum * xs).sum(), (lum * ys).sum()]) / lum.sum()

    def project(p):
        x, y, z = rot @ p + trans
        return np.array([60.0 * x / z + 31.5, 60.0 * y / z + 31.5])

    moved = centroid(1.0) - centroid(0.0)
    expect = project(blob.center + blob.displacement(1.0)) - project(blob.center)
    assert np.linalg.norm(expect) > 5.0
    assert np.all(np.abs(moved - expect) < 1.0)


def test_cloud_and_labels():
    scene = generate(small_spec())
    assert len(scene.init_cloud) == 100
    assert scene.region_labels.tolist() == [0] * 50 + [1] * 50
    for i, b in enumerate(scene.spec.blobs):
        pts = scene.init_cloud.points[i * 50:(i + 1) * 50]
        assert np.allclose(np.linalg.norm(pts - b.center, axis=1), b.radius)
        if b.dynamic:
            assert any(np.linalg.norm(b.displacement(t)) > 0 for t in scene.spec.times())
    assert scene.blob_labels().dtype == bool
    assert scene.anchor_labels(np.array([[-0.7, 0.0, 0.4], [0.6, 0.0, 0.0]])).tolist() == [False, True]


def test_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(blobs=[])
    with pytest.raises(ValueError):
        small_spec(n_timesteps=1)
    with pytest.raises(ValueError):
        generate(small_spec(points_per_blob=10))
    far = SceneSpec(blobs=[Blob([0, 0, 0], 0.3, [1, 1, 1], "linear", 30.0, [1, 0, 0])], width=16, height=16)
    with pytest.raises(ValueError, match="frustum"):
        generate(far)
    with pytest.raises(ValueError):
        Blob([0, 0, 0], 0.3, [1, 1, 1], "teleport")
    with pytest.raises(ValueError):
        preset("nope")


def test_preset_matches_documented_layout():
    spec = preset("blobs-v1")
    assert (spec.static_blobs, spec.dynamic_blobs) == (6, 2)
    assert (spec.n_timesteps, spec.n_cameras, spec.width, spec.height, spec.seed) == (20, 2, 64, 64, 42)
    assert spec.camera_spread_deg == 30.0
    assert any(b.motion == "oscillating" for b in spec.blobs)


def test_ground_truth_renderer_does_not_use_the_rasterizer():
    tree = ast.parse(inspect.getsource(synthetic))
    imported = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.ImportFrom) and node.module and "rasterizer" in node.module:
            imported |= {a.name for a in node.names}
    assert imported <= {"CameraFrame"}
