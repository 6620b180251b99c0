import csv
import io

import numpy as np
import pytest

from edgs.cli import main
from edgs.io import read_image

SMALL = """preset=none
static_blobs=2
dynamic_blobs=1
motions=linear
n_timesteps=5
n_cameras=1
width=16
height=16
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def table(text):
    return list(csv.DictReader(io.StringIO(text.strip().split("\n\n")[-1])))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.cfg").write_text(SMALL)
    assert main(["gen", "--config", str(root / "small.cfg"), "--out", str(root / "scene")]) == 0
    assert main(["train", "--scene", str(root / "scene"), "--out", str(root / "run"), "--iters", "30",
                 "--set", "densify_start=10", "--set", "densify_interval=10", "--set", "mask_warmup=10",
                 "--lam-t", "0.05"]) == 0
    return root


def test_gen_writes_scene_layout(workspace):
    scene = workspace / "scene"
    for name in ("spec.txt", "cloud.txt", "labels.txt", "cameras.txt", "preview.png"):
        assert (scene / name).exists(), name
    assert len(list((scene / "frames").glob("cam0_t*.ppm"))) == 5
    assert read_image(scene / "frames" / "cam0_t0.ppm").shape == (16, 16, 3)


def test_train_outputs(workspace):
    run_dir = workspace / "run"
    rows = list(csv.DictReader(open(run_dir / "metrics.csv")))
    assert len(rows) == 30
    assert rows[-1]["iteration"] == "30"
    for name in ("checkpoint.edgs", "training.png", "run.cfg"):
        assert (run_dir / name).exists()
    cfg = (run_dir / "run.cfg").read_text()
    assert "lam_t=0.05" in cfg and "iterations=30" in cfg


def test_render_single_and_sweep(workspace, capsys):
    out = workspace / "r.ppm"
    code, text, _ = run(capsys, "render", "--ckpt", workspace / "run" / "checkpoint.edgs",
                        "--scene", workspace / "scene", "--t", 0.5, "--out", out)
    assert code == 0 and read_image(out).shape == (16, 16, 3)
    first = out.read_bytes()
    run(capsys, "render", "--ckpt", workspace / "run" / "checkpoint.edgs", "--scene", workspace / "scene",
        "--t", 0.5, "--out", out)
    assert out.read_bytes() == first
    code, text, _ = run(capsys, "render", "--ckpt", workspace / "run" / "checkpoint.edgs", "--sweep-t", 4,
                        "--size", 20, "--mask", "off", "--out", workspace / "sweep")
    assert code == 0
    assert [r["file"] for r in table(text)] == [f"frame_{i:03d}.ppm" for i in range(4)]
    assert (workspace / "sweep" / "sweep.png").exists()
    assert read_image(workspace / "sweep" / "frame_000.ppm").shape == (20, 20, 3)


def test_eval(workspace, capsys):
    code, text, _ = run(capsys, "eval", "--ckpt", workspace / "run" / "checkpoint.edgs",
                        "--scene", workspace / "scene", "--out", workspace / "eval")
    assert code == 0
    frames, summary = text.strip().split("\n\n")
    per_frame = list(csv.DictReader(io.StringIO(frames)))
    assert [(r["camera"], r["timestep"]) for r in per_frame] == [("0", "2")]
    metrics = {r["metric"]: float(r["value"]) for r in csv.DictReader(io.StringIO(summary))}
    assert set(metrics) == {"mean_psnr", "mean_ssim", "mask_accuracy", "n_anchors"}
    assert 0 <= metrics["mask_accuracy"] <= 1
    assert (workspace / "eval" / "eval_psnr.png").exists()
    code, text, _ = run(capsys, "eval", "--ckpt", workspace / "run" / "checkpoint.edgs",
                        "--scene", workspace / "scene", "--all-frames")
    assert len(list(csv.DictReader(io.StringIO(text.strip().split("\n\n")[0])))) == 5


def test_bench(workspace, capsys):
    out = workspace / "bench" / "bench.csv"
    code, text, _ = run(capsys, "bench", "--counts", "100,400", "--mask", "both", "--warmup", 1,
                        "--repeats", 3, "--size", 16, "--out", out)
    assert code == 0
    rows = table(text)
    assert [(r["n_gaussians"], r["mask"]) for r in rows] == [("100", "on"), ("400", "on"),
                                                            ("100", "off"), ("400", "off")]
    assert out.exists() and out.with_suffix(".png").exists()
    code, text, _ = run(capsys, "bench", "--ckpt", workspace / "run" / "checkpoint.edgs", "--warmup", 0,
                        "--repeats", 2, "--size", 16)
    assert code == 0 and len(table(text)) == 1


def test_ablate(workspace, capsys):
    code, text, _ = run(capsys, "ablate", "--scene", workspace / "scene", "--seeds", "0",
                        "--strategies", "rbf,rigid", "--iters", 8, "--out", workspace / "abl")
    assert code == 0
    rows = table(text)
    assert [r["strategy"] for r in rows] == ["rbf", "rigid"]
    assert all(np.isfinite(float(r["mean_psnr"])) for r in rows)
    for name in ("ablation.csv", "ablation_runs.csv", "ablation.png"):
        assert (workspace / "abl" / name).exists()


def test_exit_codes(workspace, capsys, tmp_path):
    assert run(capsys, "frobnicate")[0] == 1
    assert run(capsys)[0] == 1
    assert run(capsys, "train", "--scene", workspace / "scene", "--out", tmp_path, "--bogus")[0] == 1
    assert run(capsys, "train", "--scene", workspace / "scene", "--out", tmp_path, "--set", "nope=1")[0] == 1
    assert run(capsys, "train", "--scene", tmp_path / "missing", "--out", tmp_path)[0] == 2
    cut = tmp_path / "cut.edgs"
    cut.write_bytes((workspace / "run" / "checkpoint.edgs").read_bytes()[:-50])
    code, _, err = run(capsys, "render", "--ckpt", cut, "--out", tmp_path / "x.ppm")
    assert code == 2 and "truncated" in err
    assert run(capsys, "render", "--ckpt", workspace / "run" / "checkpoint.edgs", "--scene",
               workspace / "scene", "--camera", 5, "--out", tmp_path / "x.ppm")[0] == 1
