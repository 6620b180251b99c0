"""``edgs`` command line: gen, train, render, eval, bench, ablate.

Exit status is 0 on success, 1 on a usage or configuration error and 2 when
the command itself fails.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import bench as benchmod
from . import evaluation as ev
from . import plotting
from .io import (Checkpoint, CheckpointError, ConfigError, RunConfig, generate_scene_dir, load_checkpoint,
                 load_run_config, parse_key_values, read_scene, save_checkpoint, write_image)
from .rasterizer import CameraFrame, render
from .scene import voxelize_points
from .heads import HeadBank
from .synthetic import SyntheticScene, look_at
from .trainer import TrainingError, train

log = logging.getLogger("edgs")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _csv_list(text: str, cast=int) -> list:
    try:
        return [cast(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list, got {text!r}") from None


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value run config file")
    p.add_argument("--iters", type=int, help="training iterations")
    p.add_argument("--deform", choices=["rbf", "rigid", "knn", "cosine"], help="motion propagation rule")
    p.add_argument("--no-time-mask", action="store_true", help="disable the time mask (gate 1, no regularizer)")
    p.add_argument("--lam-t", type=float, help="time-mask regularizer weight")
    p.add_argument("--seed", type=int, help="trainer seed")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any run-config key (repeatable)")


def _run_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    overrides = parse_key_values("\n".join(args.set), "--set")
    if args.iters is not None:
        overrides["iterations"] = args.iters
    if args.deform:
        overrides["deform"] = args.deform
    if args.no_time_mask:
        overrides["use_mask"] = False
    if args.lam_t is not None:
        overrides["lam_t"] = args.lam_t
    if args.seed is not None:
        overrides["seed"] = args.seed
    return cfg.updated(overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="edgs", description="Anchor-based dynamic Gaussian splatting at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen", help="write a synthetic scene directory")
    p.add_argument("--preset", default=None, help="scene preset (default blobs-v1)")
    p.add_argument("--config", help="run config with scene keys")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="fit a scene directory")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--holdout-every", type=int, default=5, help="hold out every n-th timestep (0: none)")
    p.add_argument("--progress", type=int, default=0, help="log every n iterations")
    _add_config_flags(p)

    p = sub.add_parser("render", help="render a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", help="scene directory to take cameras from")
    p.add_argument("--camera", type=int, default=0)
    p.add_argument("--t", type=float, default=0.0)
    p.add_argument("--sweep-t", type=int, default=0, metavar="N", help="render N frames over t in [0, 1]")
    p.add_argument("--size", type=int, default=64, help="image size without --scene")
    p.add_argument("--mask", choices=["on", "off"], help="override the checkpoint's time-mask setting")
    p.add_argument("--out", required=True, help="image file, or directory with --sweep-t")

    p = sub.add_parser("eval", help="score a checkpoint on held-out frames")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--holdout-every", type=int, default=5)
    p.add_argument("--all-frames", action="store_true", help="score every frame, not just held-out ones")
    p.add_argument("--out", help="directory for CSV and figure")

    p = sub.add_parser("bench", help="render timing against Gaussian count")
    p.add_argument("--ckpt", help="time this checkpoint instead of generated scenes")
    p.add_argument("--counts", type=_csv_list, default=[1000, 5000, 20000, 50000])
    p.add_argument("--mask", choices=["on", "off", "both"], default="on")
    p.add_argument("--static-fraction", type=float, default=0.5)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--repeats", type=int, default=50)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", help="CSV path; a PNG is written next to it")

    p = sub.add_parser("ablate", help="train every deformation strategy on one scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--seeds", type=_csv_list, default=[0, 1, 2])
    p.add_argument("--strategies", type=lambda s: _csv_list(s, str), default=["rbf", "rigid", "knn", "cosine"])
    p.add_argument("--out", help="directory for CSV and figure")
    _add_config_flags(p)
    return parser


def _write_rows(rows: list[dict], columns, stream) -> None:
    writer = csv.DictWriter(stream, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row[k] for k in columns})


def _emit(rows: list[dict], columns, path: Path | None = None) -> None:
    buf = _io.StringIO()
    _write_rows(rows, columns, buf)
    sys.stdout.write(buf.getvalue())
    if path is not None:
        path.write_text(buf.getvalue())


def _synthetic(scene_dir) -> SyntheticScene:
    return read_scene(scene_dir).as_synthetic()


# ----------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if args.preset:
        cfg = cfg.updated({"preset": args.preset})
    out = Path(args.out)
    scene = generate_scene_dir(out, cfg.scene.spec())
    cam0 = [fr for key, fr in zip(scene.frame_keys, scene.frames) if key[0] == 0]
    plotting.save_strip([f.ground_truth for f in cam0], out / "preview.png",
                        [f"t={f.t:.2f}" for f in cam0])
    _emit([{"frames": len(scene.frames), "points": len(scene.init_cloud),
            "static_blobs": scene.spec.static_blobs, "dynamic_blobs": scene.spec.dynamic_blobs}],
          ("frames", "points", "static_blobs", "dynamic_blobs"))
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    sd = read_scene(args.scene)
    train_frames, test_frames = ev.split_frames(sd.frames, sd.frame_keys, args.holdout_every)
    _, test_keys = ev.split_frames(sd.frame_keys, sd.frame_keys, args.holdout_every)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.cfg").write_text(cfg.to_text())

    scene = voxelize_points(sd.cloud)
    heads = HeadBank()
    res = train(scene, heads, train_frames, cfg.train, strategy=cfg.strategy,
                metrics_path=out / "metrics.csv", progress_every=args.progress)
    save_checkpoint(out / "checkpoint.edgs", Checkpoint(res.scene, res.heads, cfg.train, cfg.strategy,
                                                        res.iteration, res.rng_state))
    plotting.plot_training(res.metrics, out / "training.png")

    summary = {"iterations": res.iteration, "n_anchors": res.scene.n_anchors,
               "final_loss": res.metrics[-1]["loss"], "heldout_psnr": float("nan")}
    if test_frames:
        scores = ev.evaluate_frames(res.scene, res.heads, cfg.strategy, test_frames, test_keys, cfg.train.use_mask)
        summary["heldout_psnr"] = ev.mean_psnr(scores)
    _emit([summary], list(summary))
    return 0


def _checkpoint_mask(ckpt: Checkpoint, flag: str | None) -> bool:
    return ckpt.config.use_mask if flag is None else flag == "on"


def cmd_render(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    use_mask = _checkpoint_mask(ckpt, args.mask)
    if args.scene:
        sd = read_scene(args.scene)
        cams = [fr for key, fr in zip(sd.frame_keys, sd.frames) if key[0] == args.camera]
        if not cams:
            raise UsageError(f"scene has no camera {args.camera}")
        base = replace(cams[0], ground_truth=None)
    else:
        rot, trans = look_at([0.0, 0.0, -7.0], np.zeros(3))
        c = (args.size - 1) / 2
        base = CameraFrame(rot, trans, 80.0 * args.size / 64, 80.0 * args.size / 64, c, c, args.size, args.size)

    def shot(t):
        return np.clip(render(ckpt.scene, ckpt.heads, ckpt.strategy, replace(base, t=float(t)),
                              use_mask=use_mask), 0.0, 1.0)

    if args.sweep_t:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        times = np.linspace(0.0, 1.0, args.sweep_t)
        rows, images = [], []
        for i, t in enumerate(times):
            img = shot(t)
            name = f"frame_{i:03d}.ppm"
            write_image(out / name, img)
            images.append(img)
            rows.append({"index": i, "t": float(t), "file": name})
        plotting.save_strip(images, out / "sweep.png", [f"t={t:.2f}" for t in times])
        _emit(rows, ("index", "t", "file"))
    else:
        write_image(args.out, shot(args.t))
        _emit([{"t": args.t, "file": args.out}], ("t", "file"))
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    synth = _synthetic(args.scene)
    every = 0 if args.all_frames else args.holdout_every
    train_frames, frames = ev.split_frames(synth.frames, synth.frame_keys, every)
    _, keys = ev.split_frames(synth.frame_keys, synth.frame_keys, every)
    if not frames:
        frames, keys = train_frames, list(synth.frame_keys)
    use_mask = ckpt.config.use_mask
    scores = ev.evaluate_frames(ckpt.scene, ckpt.heads, ckpt.strategy, frames, keys, use_mask)
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    _emit([asdict(s) for s in scores], ("camera", "timestep", "psnr", "ssim"),
          out / "eval_frames.csv" if out else None)
    summary = [
        {"metric": "mean_psnr", "value": ev.mean_psnr(scores)},
        {"metric": "mean_ssim", "value": float(np.mean([s.ssim for s in scores]))},
        {"metric": "mask_accuracy", "value": ev.mask_accuracy(ckpt.scene, ckpt.heads, synth)},
        {"metric": "n_anchors", "value": ckpt.scene.n_anchors},
    ]
    sys.stdout.write("\n")
    _emit(summary, ("metric", "value"), out / "eval_summary.csv" if out else None)
    if out:
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 3))
        ax.bar(range(len(scores)), [s.psnr for s in scores])
        ax.set_xticks(range(len(scores)), [f"c{s.camera}t{s.timestep}" for s in scores], rotation=90, fontsize=7)
        ax.set_ylabel("PSNR (dB)")
        fig.tight_layout()
        fig.savefig(out / "eval_psnr.png", dpi=110)
        plt.close(fig)
    return 0


def cmd_bench(args) -> int:
    modes = {"on": [True], "off": [False], "both": [True, False]}[args.mask]
    camera = benchmod.bench_camera(args.size, args.size, focal=80.0 * args.size / 64)
    rows = []
    if args.ckpt:
        ckpt = load_checkpoint(args.ckpt)
        for m in modes:
            rows.append(benchmod.bench_scene(ckpt.scene, ckpt.heads, camera, m, ckpt.strategy,
                                             args.warmup, args.repeats))
    else:
        for m in modes:
            for count in args.counts:
                scene, heads = benchmod.synthetic_bench_scene(count, args.static_fraction)
                rows.append(benchmod.bench_scene(scene, heads, camera, m, warmup=args.warmup,
                                                 repeats=args.repeats))
    out = Path(args.out) if args.out else None
    if out:
        out.parent.mkdir(parents=True, exist_ok=True)
    _emit([asdict(r) for r in rows], benchmod.BENCH_COLUMNS, out)
    if out:
        plotting.plot_bench(rows, out.with_suffix(".png"))
    return 0


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    synth = _synthetic(args.scene)
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    rows = ev.ablate(synth, cfg.train, args.seeds, args.strategies,
                     progress=lambda r: log.info("%s seed %d: %.2f dB", r.strategy, r.seed, r.psnr))
    _emit([asdict(r) for r in rows], ("strategy", "seed", "psnr", "n_anchors"),
          out / "ablation_runs.csv" if out else None)
    table = ev.ablation_table(rows)
    summary = [{"strategy": k, "mean_psnr": float(np.mean(v)), "std_psnr": float(np.std(v)), "runs": len(v)}
               for k, v in table.items()]
    sys.stdout.write("\n")
    _emit(summary, ("strategy", "mean_psnr", "std_psnr", "runs"), out / "ablation.csv" if out else None)
    if out:
        plotting.plot_ablation(table, out / "ablation.png")
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "render": cmd_render, "eval": cmd_eval,
            "bench": cmd_bench, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_help())
        logging.basicConfig(level=logging.INFO if args.verbose or getattr(args, "progress", 0) else logging.WARNING,
                            format="%(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        sys.stderr.write(f"{exc}\n")
        return 1
    except (TrainingError, CheckpointError, ValueError, OSError) as exc:
        sys.stderr.write(f"edgs: error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
