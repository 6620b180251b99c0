import numpy as np
import pytest

from edgs.bench import bench_camera, bench_scene, run_bench, set_static_fraction, synthetic_bench_scene
from edgs.evaluation import (AblationRow, ablation_table, mask_accuracy, split_frames, static_region,
                             static_temporal_std)
from edgs.deformation import DeformStrategy
from edgs.heads import HeadBank, predict_time_mask
from edgs.scene import voxelize_points
from edgs.synthetic import Blob, SceneSpec, generate


def test_split_holds_out_every_fifth_timestep():
    keys = [(c, t) for c in range(2) for t in range(20)]
    train, test = split_frames(keys, keys)
    assert test == [(c, t) for c in range(2) for t in (2, 7, 12, 17)]
    assert len(train) == 32
    train, test = split_frames(keys, keys, holdout_every=0)
    assert test == [] and len(train) == 40


def test_static_region():
    stack = np.zeros((4, 3, 3, 3))
    stack[:, 0, 0, 1] = [0, 0.1, 0.2, 0.3]
    region = static_region(stack)
    assert region.sum() == 8 and not region[0, 0]


@pytest.mark.parametrize("fraction", [0.0, 0.25, 0.5, 0.75, 1.0])
def test_set_static_fraction(fraction):
    scene, heads = synthetic_bench_scene(2000, fraction, seed=1)
    p = predict_time_mask(heads, scene.features)
    assert np.isclose(np.mean(p <= 0.5), fraction, atol=1.0 / scene.n_anchors)


def test_mask_accuracy_against_nearest_blob():
    spec = SceneSpec(blobs=[Blob([-0.8, 0, 0], 0.4, [1, 0, 0]),
                            Blob([0.8, 0, 0], 0.4, [0, 0, 1], "linear", 0.3, [0, 1, 0])],
                     n_timesteps=2, n_cameras=1, width=16, height=16, focal=20.0, points_per_blob=50)
    synth = generate(spec)
    scene = voxelize_points(synth.init_cloud)
    heads = HeadBank()
    # a classifier that says "dynamic" exactly for anchors right of the origin
    heads.mask_head.zero_()
    truth = scene.positions[:, 0] > 0
    assert np.array_equal(synth.anchor_labels(scene.positions), truth)
    scene.features[:, 0] = np.where(truth, 1.0, -1.0)
    heads.mask_head.weights[0][0, :2] = [10.0, -10.0]
    heads.mask_head.weights[1][:2, 0] = [1.0, -1.0]
    assert mask_accuracy(scene, heads, synth) == 1.0
    heads.mask_head.weights[1][:2, 0] = [-1.0, 1.0]
    assert mask_accuracy(scene, heads, synth) == 0.0


def test_static_std_is_zero_for_fully_static_model():
    spec = SceneSpec(blobs=[Blob([0, 0, 0], 0.5, [1, 1, 1])], n_timesteps=3, n_cameras=1, width=12,
                     height=12, focal=16.0, points_per_blob=50)
    synth = generate(spec)
    scene = voxelize_points(synth.init_cloud)
    stats = static_temporal_std(scene, HeadBank(), DeformStrategy(), synth.frames)
    # identical renders; what is left is the roundoff of the std itself
    assert stats["max"] < 1e-12 and stats["fraction"] == 1.0


def test_ablation_table_groups_by_strategy():
    rows = [AblationRow("rbf", 0, 30.0, 5), AblationRow("rigid", 0, 28.0, 5), AblationRow("rbf", 1, 32.0, 5)]
    assert ablation_table(rows) == {"rbf": [30.0, 32.0], "rigid": [28.0]}


def test_bench_rows():
    rows = run_bench([100, 300], static_fraction=0.5, warmup=1, repeats=3, width=16, height=16)
    assert [r.n_gaussians for r in rows] == [100, 300]
    assert all(r.median_ms > 0 and r.fps > 0 and r.mask == "on" for r in rows)
    assert all(abs(r.static_fraction - 0.5) < 0.1 for r in rows)
    scene, heads = synthetic_bench_scene(200, 1.0)
    row = bench_scene(scene, heads, bench_camera(16, 16), use_mask=True, warmup=0, repeats=2)
    assert row.time_variant_ms < 1.0
    with pytest.raises(ValueError):
        set_static_fraction(scene, heads, 1.5)
