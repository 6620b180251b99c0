"""Steady-state render timing.

Each measurement renders ``warmup`` frames that are thrown away, then
``repeats`` timed frames at distinct times, and reports medians. Compose time
(attribute decoding, with the time-variant share broken out) and raster time
(projection plus compositing) are kept apart so the effect of the time mask
can be attributed.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Graph
from .deformation import DeformStrategy, compose_gaussians
from .heads import HeadBank
from .rasterizer import CameraFrame, rasterize
from .scene import AnchorSet, init_anchor_state
from .synthetic import look_at

BENCH_COLUMNS = ("n_gaussians", "n_anchors", "static_fraction", "mask", "median_ms", "fps",
                 "compose_ms", "time_variant_ms", "raster_ms")


@dataclass
class BenchRow:
    n_gaussians: int
    n_anchors: int
    static_fraction: float
    mask: str
    median_ms: float
    fps: float
    compose_ms: float
    time_variant_ms: float
    raster_ms: float


def bench_camera(width: int = 64, height: int = 64, focal: float = 80.0, distance: float = 7.0) -> CameraFrame:
    rot, trans = look_at([0.0, 0.0, -distance], np.zeros(3))
    return CameraFrame(rot, trans, focal, focal, (width - 1) / 2, (height - 1) / 2, width, height)


def set_static_fraction(scene: AnchorSet, heads: HeadBank, fraction: float) -> None:
    """Shift the mask head's output bias so that ``fraction`` of anchors are static."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("static fraction must lie in [0, 1]")
    g = Graph(grad_enabled=False)
    bias = heads.mask_head.biases[-1]
    raw = heads.mask_head(g.const(scene.features)).data[:, 0] - bias[0]
    n_static = int(round(fraction * scene.n_anchors))
    ordered = np.sort(raw)
    if n_static == 0:
        cut = ordered[0] - 1.0
    elif n_static == len(ordered):
        cut = ordered[-1] + 1.0
    else:
        cut = 0.5 * (ordered[n_static - 1] + ordered[n_static])
    bias[0] = -cut


def synthetic_bench_scene(n_gaussians: int, static_fraction: float = 0.5, k: int = 10, seed: int = 0,
                          extent: float = 3.0) -> tuple[AnchorSet, HeadBank]:
    """Random anchors in a cube of side ``extent`` around the origin."""
    n = max(1, n_gaussians // k)
    rng = np.random.default_rng(seed)
    positions = rng.uniform(-extent / 2, extent / 2, (n, 3))
    cell = extent / max(n, 1) ** (1.0 / 3.0)
    state = init_anchor_state(n, cell, k, 8, rng)
    scene = AnchorSet(positions=positions, voxel_size=cell, **state)
    heads = HeadBank(k=k, seed=seed)
    # random (untrained) motion so dynamic anchors do real work
    for w in heads.deform_net.weights[-1:] + heads.scale_head.weights[-1:] + heads.quat_head.weights[-1:]:
        w[...] = rng.uniform(-0.05, 0.05, w.shape)
    set_static_fraction(scene, heads, static_fraction)
    return scene, heads


def time_frames(scene: AnchorSet, heads: HeadBank, camera: CameraFrame, strategy: DeformStrategy | None = None,
                use_mask: bool = True, warmup: int = 10, repeats: int = 50, mode: str = "tiled") -> dict:
    """Median per-frame timings in milliseconds."""
    strategy = strategy or DeformStrategy()
    total, compose, tv, raster = [], [], [], []
    for i in range(warmup + repeats):
        t = (i % repeats) / max(repeats, 1)
        tic = time.perf_counter()
        g = Graph(grad_enabled=False)
        gs = compose_gaussians(scene, heads, strategy, t, camera.center, graph=g, use_mask=use_mask)
        mid = time.perf_counter()
        rasterize(gs, camera, mode)
        toc = time.perf_counter()
        if i >= warmup:
            total.append((toc - tic) * 1e3)
            compose.append(gs.timings["compose_ms"])
            tv.append(gs.timings["time_variant_ms"])
            raster.append((toc - mid) * 1e3)
    med = float(np.median(total))
    return {
        "median_ms": med,
        "fps": 1e3 / med if med > 0 else float("inf"),
        "compose_ms": float(np.median(compose)),
        "time_variant_ms": float(np.median(tv)),
        "raster_ms": float(np.median(raster)),
    }


def bench_scene(scene: AnchorSet, heads: HeadBank, camera: CameraFrame, use_mask: bool = True,
                strategy: DeformStrategy | None = None, warmup: int = 10, repeats: int = 50) -> BenchRow:
    g = Graph(grad_enabled=False)
    probs = heads.mask_prob(g.const(scene.features)).data
    stats = time_frames(scene, heads, camera, strategy, use_mask, warmup, repeats)
    return BenchRow(
        n_gaussians=scene.n_anchors * scene.k,
        n_anchors=scene.n_anchors,
        static_fraction=float(np.mean(probs <= 0.5)),
        mask="on" if use_mask else "off",
        **stats,
    )


def run_bench(counts, use_mask: bool = True, static_fraction: float = 0.5, seed: int = 0,
              warmup: int = 10, repeats: int = 50, width: int = 64, height: int = 64) -> list[BenchRow]:
    camera = bench_camera(width, height)
    rows = []
    for count in counts:
        scene, heads = synthetic_bench_scene(int(count), static_fraction, seed=seed)
        rows.append(bench_scene(scene, heads, camera, use_mask, warmup=warmup, repeats=repeats))
    return rows


def write_bench_csv(path, rows: list[BenchRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(asdict(row))
