"""Held-out metrics, mask accuracy, static-region stability and strategy ablation."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .deformation import STRATEGIES, DeformStrategy
from .heads import HeadBank, predict_time_mask
from .rasterizer import CameraFrame, render
from .scene import AnchorSet, voxelize_points
from .synthetic import SyntheticScene, psnr
from .trainer import TrainConfig, TrainResult, ssim, train

STATIC_GT_TOL = 1e-6  # a pixel is static if its ground truth varies less than this over time


def split_frames(frames: Sequence[CameraFrame], keys: Sequence[tuple[int, int]],
                 holdout_every: int = 5, holdout_phase: int = 2):
    """(train, held-out) split by timestep index; ``holdout_every=0`` holds nothing out."""
    train_frames, test_frames = [], []
    for (_, ti), fr in zip(keys, frames):
        held = holdout_every > 0 and ti % holdout_every == holdout_phase
        (test_frames if held else train_frames).append(fr)
    return train_frames, test_frames


@dataclass
class FrameScore:
    camera: int
    timestep: int
    psnr: float
    ssim: float


def evaluate_frames(scene: AnchorSet, heads: HeadBank, strategy: DeformStrategy,
                    frames: Sequence[CameraFrame], keys: Sequence[tuple[int, int]],
                    use_mask: bool = True) -> list[FrameScore]:
    out = []
    for (c, ti), fr in zip(keys, frames):
        img = np.clip(render(scene, heads, strategy, fr, use_mask=use_mask), 0.0, 1.0)
        out.append(FrameScore(c, ti, psnr(img, fr.ground_truth), ssim(img, fr.ground_truth)))
    return out


def mean_psnr(scores: Sequence[FrameScore]) -> float:
    return float(np.mean([s.psnr for s in scores]))


def mask_accuracy(scene: AnchorSet, heads: HeadBank, synth: SyntheticScene) -> float:
    """Agreement of thresholded mask labels with nearest-blob region labels."""
    labels = synth.anchor_labels(scene.positions)
    pred = np.atleast_1d(predict_time_mask(heads, scene.features)) > 0.5
    return float(np.mean(pred == labels))


def static_region(gt_stack: np.ndarray, tol: float = STATIC_GT_TOL) -> np.ndarray:
    """Pixels whose ground truth is constant over time, from a (T, H, W, 3) stack."""
    return gt_stack.std(axis=0).max(axis=-1) < tol


def static_temporal_std(scene: AnchorSet, heads: HeadBank, strategy: DeformStrategy,
                        frames: Sequence[CameraFrame], use_mask: bool = True) -> dict:
    """Per-pixel temporal std of renders from one camera inside the static region.

    ``frames`` are the same camera at every timestep, with ground truth.
    Returns the max and mean over static pixels and the region's pixel share.
    """
    gt = np.stack([f.ground_truth for f in frames])
    region = static_region(gt)
    renders = np.stack([np.clip(render(scene, heads, strategy, f, use_mask=use_mask), 0.0, 1.0)
                        for f in frames])
    std = renders.std(axis=0).max(axis=-1)[region]
    if std.size == 0:
        raise ValueError("the ground truth has no static pixels")
    return {"max": float(std.max()), "mean": float(std.mean()), "fraction": float(region.mean())}


@dataclass
class AblationRow:
    strategy: str
    seed: int
    psnr: float
    n_anchors: int


def ablate(synth: SyntheticScene, config: TrainConfig, seeds: Sequence[int] = (0, 1, 2),
           strategies: Sequence[str] = STRATEGIES, progress=None) -> list[AblationRow]:
    """Train every strategy on the same scene and score the held-out frames.

    The seed is the trainer seed (frame order and gate sampling); anchor and
    head initialization are identical across runs.
    """
    train_frames, test_frames = split_frames(synth.frames, synth.frame_keys)
    _, test_keys = split_frames(synth.frame_keys, synth.frame_keys)
    rows = []
    for kind in strategies:
        strategy = DeformStrategy(kind)
        for seed in seeds:
            res: TrainResult = train(voxelize_points(synth.init_cloud), HeadBank(), train_frames,
                                     replace(config, seed=int(seed)), strategy=strategy)
            scores = evaluate_frames(res.scene, res.heads, strategy, test_frames, test_keys, config.use_mask)
            rows.append(AblationRow(kind, int(seed), mean_psnr(scores), res.scene.n_anchors))
            if progress:
                progress(rows[-1])
    return rows


def ablation_table(rows: Sequence[AblationRow]) -> dict[str, list[float]]:
    table: dict[str, list[float]] = {}
    for r in rows:
        table.setdefault(r.strategy, []).append(r.psnr)
    return table
