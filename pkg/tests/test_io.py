import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from edgs.deformation import DeformStrategy
from edgs.heads import HeadBank
from edgs.io import (MAGIC, RUN_KEYS_DOC, Checkpoint, CheckpointError, ConfigError, RunConfig, decode_ppm,
                     encode_ppm, load_checkpoint, load_run_config, parse_key_values, quantize, read_image,
                     read_scene, save_checkpoint, spec_from_text, spec_to_text, write_image, write_scene)
from edgs.rasterizer import render
from edgs.scene import PointCloud, voxelize_points
from edgs.synthetic import Blob, SceneSpec, generate, psnr
from edgs.trainer import TrainConfig


def make_checkpoint(seed=0):
    rng = np.random.default_rng(seed)
    scene = voxelize_points(PointCloud(rng.uniform(-1, 1, (30, 3))), 0.6, seed=seed)
    scene.levels[1] = 2
    heads = HeadBank(seed=seed)
    for a in heads.params().values():
        a[...] = rng.normal(size=a.shape)
    return Checkpoint(scene, heads, TrainConfig(iterations=77, lam_t=0.02), DeformStrategy("knn", knn_k=3), 77,
                      np.random.default_rng(5).bit_generator.state)


def test_ppm_header_and_rounding():
    img = np.full((2, 3, 3), 0.5)
    data = encode_ppm(img)
    assert data.startswith(b"P6\n3 2\n255\n")
    # 0.5 * 255 = 127.5 rounds half to even
    assert set(data[len(b"P6\n3 2\n255\n"):]) == {128}
    assert quantize(np.array([1.5 / 255, 2.5 / 255, 0.0, 1.0, -0.2, 1.3])).tolist() == [2, 2, 0, 255, 0, 255]


@given(arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9), st.just(3)), elements=st.floats(0, 1)))
def test_ppm_round_trip(img):
    data = encode_ppm(img)
    back = decode_ppm(data)
    assert np.max(np.abs(back - img)) <= 1 / 255 / 2 + 1e-12
    assert encode_ppm(back) == data


def test_ppm_comments_and_errors():
    raw = b"P6\n# made by hand\n1 1\n255\n" + bytes([10, 20, 30])
    assert np.allclose(decode_ppm(raw), np.array([[[10, 20, 30]]]) / 255)
    with pytest.raises(ValueError):
        decode_ppm(b"P5\n1 1\n255\n\x00")
    with pytest.raises(ValueError):
        decode_ppm(b"P6\n2 2\n255\n\x00\x00")


@pytest.mark.parametrize("ext", ["ppm", "png"])
def test_image_files(tmp_path, rng, ext):
    img = rng.uniform(0, 1, (7, 5, 3))
    path = tmp_path / f"img.{ext}"
    write_image(path, img)
    back = read_image(path)
    assert back.shape == img.shape
    assert np.max(np.abs(back - img)) <= 1 / 255
    with pytest.raises(ValueError):
        write_image(tmp_path / "img.jpg", img)


def test_checkpoint_round_trip_bitwise(tmp_path):
    ckpt = make_checkpoint()
    path = tmp_path / "c.edgs"
    save_checkpoint(path, ckpt)
    back = load_checkpoint(path)
    a, b = ckpt.arrays(), back.arrays()
    assert a.keys() == b.keys()
    for name in a:
        assert a[name].dtype == b[name].dtype
        assert a[name].tobytes() == b[name].tobytes(), name
    assert back.config == ckpt.config
    assert back.strategy == ckpt.strategy
    assert back.iteration == 77
    assert back.rng_state == ckpt.rng_state
    assert path.read_bytes()[:4] == MAGIC


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "c.edgs"
    save_checkpoint(path, make_checkpoint())
    data = path.read_bytes()
    cut = tmp_path / "cut.edgs"
    cut.write_bytes(data[:-10])
    with pytest.raises(CheckpointError, match="array 'heads.deform_net.3.bias'"):
        load_checkpoint(cut)
    cut.write_bytes(data[:-100])
    with pytest.raises(CheckpointError, match="array 'heads.deform_net.3.weight'"):
        load_checkpoint(cut)
    old = tmp_path / "old.edgs"
    old.write_bytes(data[:4] + struct.pack("<I", 0) + data[8:])
    with pytest.raises(CheckpointError, match="version 0"):
        load_checkpoint(old)
    bad = tmp_path / "bad.edgs"
    bad.write_bytes(b"NOPE" + data[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(bad)
    extra = tmp_path / "extra.edgs"
    extra.write_bytes(data + b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(extra)


def test_render_reproducible_from_checkpoint(tmp_path):
    from edgs.bench import bench_camera

    ckpt = make_checkpoint(3)
    for a in ckpt.heads.params().values():
        a *= 0.1
    path = tmp_path / "c.edgs"
    save_checkpoint(path, ckpt)
    cam = bench_camera(24, 24, focal=30.0)
    imgs = [render(c.scene, c.heads, c.strategy, cam) for c in (load_checkpoint(path), load_checkpoint(path))]
    assert imgs[0].tobytes() == imgs[1].tobytes()
    assert imgs[0].tobytes() == render(ckpt.scene, ckpt.heads, ckpt.strategy, cam).tobytes()


def test_run_config_keys_documented_and_round_trip(tmp_path):
    cfg = RunConfig()
    assert set(cfg.as_dict()) == set(RUN_KEYS_DOC)
    changed = cfg.updated({"lam_t": "0.05", "deform": "rigid", "use_mask": "false", "width": "32"})
    assert changed.train.lam_t == 0.05 and changed.strategy.kind == "rigid"
    assert changed.train.use_mask is False and changed.scene.width == 32
    path = tmp_path / "run.cfg"
    path.write_text(changed.to_text())
    assert load_run_config(path) == changed


def test_run_config_errors():
    with pytest.raises(ConfigError, match="bogus"):
        RunConfig().updated({"bogus": "1"})
    with pytest.raises(ConfigError):
        RunConfig().updated({"iterations": "many"})
    with pytest.raises(ConfigError):
        RunConfig().updated({"deform": "affine"})
    with pytest.raises(ConfigError, match=":2:"):
        parse_key_values("a=1\nnot a pair\n")
    assert parse_key_values("# c\n a = 1 # note\n\nb=x=y\n") == {"a": "1", "b": "x=y"}


def test_scene_directory_round_trip(tmp_path):
    spec = SceneSpec(blobs=[Blob([-0.5, 0, 0], 0.4, [0.9, 0.2, 0.2]),
                            Blob([0.6, 0.1, 0], 0.3, [0.1, 0.4, 0.9], "oscillating", 0.3, [0, 1, 0], 0.2)],
                     n_timesteps=3, n_cameras=2, width=12, height=10, focal=20.0, points_per_blob=50)
    again = spec_from_text(spec_to_text(spec))
    assert spec_to_text(again) == spec_to_text(spec)
    for a, b in zip(spec.blobs, again.blobs):
        assert np.array_equal(a.center, b.center) and a.motion == b.motion and a.pulse == b.pulse
    scene = generate(spec)
    write_scene(tmp_path, scene)
    names = sorted(p.name for p in (tmp_path / "frames").iterdir())
    assert names == sorted(f"cam{c}_t{t}.ppm" for c in range(2) for t in range(3))
    back = read_scene(tmp_path)
    assert back.frame_keys == scene.frame_keys
    assert np.array_equal(back.cloud.points, scene.init_cloud.points)
    assert np.array_equal(back.labels, scene.region_labels)
    for fa, fb in zip(scene.frames, back.frames):
        assert np.array_equal(fa.rotation, fb.rotation) and np.array_equal(fa.translation, fb.translation)
        assert fa.t == fb.t
        assert np.max(np.abs(fa.ground_truth - fb.ground_truth)) <= 1 / 255
        # quantization moves PSNR by far less than the error budget of a fit
        noisy = np.clip(fa.ground_truth + 0.03, 0, 1)
        assert abs(psnr(noisy, fa.ground_truth) - psnr(noisy, fb.ground_truth)) < 0.1
