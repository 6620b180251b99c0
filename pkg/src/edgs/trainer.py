"""Losses, optimizer and the anchor densify/prune training loop."""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Value
from .deformation import DeformStrategy, compose_gaussians, knn_table
from .heads import HeadBank
from .rasterizer import CameraFrame, composite, project
from .scene import LEARNABLE, AnchorSet, init_anchor_state
from .synthetic import psnr

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

METRIC_COLUMNS = ("iteration", "loss", "l1", "ssim", "mask_loss", "psnr",
                  "n_anchors", "n_dynamic_anchors", "wall_ms")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 30000
    lam: float = 0.2
    lam_t: float = 0.2
    mask_warmup: int = 500
    mask_gate: str = "sampled"
    densify_interval: int = 100
    densify_grad_threshold: float = 0.0002
    densify_subvoxels: int = 8
    prune_opacity_threshold: float = 0.005
    densify_start: int = 500
    densify_stop: int = 15000
    max_level: int = 2
    lr_features: float = 0.0075
    lr_offsets: float = 0.01
    lr_scaling: float = 0.007
    lr_heads: float = 0.002
    lr_heads_final_ratio: float = 0.01
    lr_deform: float = 0.0008
    seed: int = 0
    use_mask: bool = True
    raster_mode: str = "tiled"

    def __post_init__(self):
        if not (0 <= self.lam <= 1 and 0 <= self.lam_t <= 1):
            raise ValueError("lam and lam_t must lie in [0, 1]")
        if self.densify_grad_threshold <= 0:
            raise ValueError("densify_grad_threshold must be positive")
        if self.densify_subvoxels not in (4, 8):
            raise ValueError("densify_subvoxels must be 4 or 8")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# ----------------------------------------------------------------------------
# losses


def _gauss_window(n: int) -> np.ndarray:
    """(n, n) matrix applying the 1D SSIM window with zero padding."""
    half = SSIM_WINDOW // 2
    x = np.arange(SSIM_WINDOW) - half
    k = np.exp(-x ** 2 / (2 * SSIM_SIGMA ** 2))
    k /= k.sum()
    mat = np.zeros((n, n))
    for i in range(n):
        for j in range(max(0, i - half), min(n, i + half + 1)):
            mat[i, j] = k[j - i + half]
    return mat


_WINDOWS: dict[int, np.ndarray] = {}


def _window(n: int) -> np.ndarray:
    if n not in _WINDOWS:
        _WINDOWS[n] = _gauss_window(n)
    return _WINDOWS[n]


def ssim_graph(a: Value, b) -> Value:
    """Mean SSIM of two (H, W, 3) images, differentiable in both."""
    g = a.graph if isinstance(a, Value) else b.graph
    a = a if isinstance(a, Value) else g.const(a)
    b = b if isinstance(b, Value) else g.const(b)
    if a.shape != b.shape:
        raise ad.ShapeError("ssim", a.shape, b.shape)
    h, w = a.shape[0], a.shape[1]
    gh, gw_t = _window(h), _window(w).T

    def blur(x):
        return ad.matmul(ad.matmul(gh, x), gw_t)

    x = ad.transpose(a, (2, 0, 1))
    y = ad.transpose(b, (2, 0, 1))
    mu_x, mu_y = blur(x), blur(y)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    s_xx = blur(x * x) - mu_xx
    s_yy = blur(y * y) - mu_yy
    s_xy = blur(x * y) - mu_xy
    num = (2.0 * mu_xy + SSIM_C1) * (2.0 * s_xy + SSIM_C2)
    den = (mu_xx + mu_yy + SSIM_C1) * (s_xx + s_yy + SSIM_C2)
    return ad.mean(num / den)


def ssim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    g = Graph(grad_enabled=False)
    return float(ssim_graph(g.const(a), g.const(b)).data)


def total_loss(render: Value, gt, mask_probs: Value | None, lam: float = 0.2, lam_t: float = 0.2):
    """(1 - lam) L1 + lam (1 - SSIM) + lam_t mean(mask probability).

    Returns the loss value and a dict of its float components.
    """
    gt = np.asarray(gt, dtype=np.float64)
    if render.shape != gt.shape:
        raise ad.ShapeError("total_loss", render.shape, gt.shape)
    l1 = ad.mean(ad.abs(render - gt))
    s = ssim_graph(render, gt)
    loss = (1.0 - lam) * l1 + lam * (1.0 - s)
    mask_loss = 0.0
    if mask_probs is not None and lam_t > 0:
        m = ad.mean(mask_probs)
        loss = loss + lam_t * m
        mask_loss = float(m.data)
    elif mask_probs is not None:
        mask_loss = float(np.mean(mask_probs.data))
    return loss, {"loss": float(loss.data), "l1": float(l1.data), "ssim": float(s.data), "mask_loss": mask_loss}


# ----------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lrs: dict[str, float]) -> None:
        b1, b2 = self.beta1, self.beta2
        for name, p in params.items():
            gr = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.steps[name] = 0
            m, v = self.m[name], self.v[name]
            self.steps[name] += 1
            n = self.steps[name]
            m *= b1
            m += (1 - b1) * gr
            v *= b2
            v += (1 - b2) * gr * gr
            mhat = m / (1 - b1 ** n)
            vhat = v / (1 - b2 ** n)
            p -= lrs[name] * mhat / (np.sqrt(vhat) + self.eps)

    def remap_rows(self, names, keep: np.ndarray, n_new: int) -> None:
        """Follow a prune (``keep``) and an append of ``n_new`` fresh rows."""
        for name in names:
            if name not in self.m:
                continue
            for store in (self.m, self.v):
                old = store[name][keep]
                store[name] = np.concatenate([old, np.zeros((n_new,) + old.shape[1:])])

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
            out[f"adam.n.{name}"] = np.array([self.steps[name]], dtype=np.float64)
        return out


# ----------------------------------------------------------------------------
# learnable state


def learnable_inventory(scene: AnchorSet, heads: HeadBank) -> dict[str, np.ndarray]:
    """Every array that receives gradient updates; anchor positions are not among them."""
    out = {f"scene.{k}": v for k, v in scene.learnable().items()}
    out.update({f"heads.{k}": v for k, v in heads.params().items()})
    return out


def learning_rates(names, cfg: TrainConfig, progress: float) -> dict[str, float]:
    decay = cfg.lr_heads_final_ratio ** progress
    out = {}
    for name in names:
        if name in ("scene.features", "scene.offset_features"):
            out[name] = cfg.lr_features
        elif name == "scene.offset_positions":
            out[name] = cfg.lr_offsets
        elif name.startswith("scene."):
            out[name] = cfg.lr_scaling
        elif name.startswith("heads.deform_net"):
            out[name] = cfg.lr_deform
        else:
            out[name] = cfg.lr_heads * decay
    return out


# ----------------------------------------------------------------------------
# densify / prune


@dataclass
class GradStats:
    grad_accum: np.ndarray
    grad_count: np.ndarray
    opacity_accum: np.ndarray
    opacity_count: int = 0

    @classmethod
    def empty(cls, n: int, k: int) -> "GradStats":
        return cls(np.zeros(n), np.zeros(n), np.zeros((n, k)), 0)

    def mean_grad(self) -> np.ndarray:
        return self.grad_accum / np.maximum(self.grad_count, 1)

    def mean_opacity(self) -> np.ndarray:
        return self.opacity_accum.mean(axis=1) / max(self.opacity_count, 1)

    def record(self, splat_index: np.ndarray, grad2d: np.ndarray | None, opacities: np.ndarray, k: int) -> None:
        n = len(self.grad_accum)
        self.opacity_accum += opacities.reshape(n, k)
        self.opacity_count += 1
        if grad2d is None or len(splat_index) == 0:
            return
        anchor = splat_index // k
        norms = np.linalg.norm(grad2d, axis=1)
        total = np.bincount(anchor, norms, minlength=n)
        hits = np.bincount(anchor, minlength=n)
        seen = hits > 0
        self.grad_accum[seen] += total[seen] / hits[seen]
        self.grad_count[seen] += 1


def _subvoxel_offsets(m: int) -> np.ndarray:
    if m == 8:
        grid = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.float64)
        return (grid + 0.5) / 2.0
    grid = np.array([[i, j, 0] for i in (0, 1) for j in (0, 1)], dtype=np.float64)
    out = (grid + 0.5) / 2.0
    out[:, 2] = 0.5
    return out


def _pos_key(p: np.ndarray) -> tuple:
    return tuple(np.round(p, 9))


def densify_anchors(scene: AnchorSet, stats: GradStats, threshold: float, m: int = 8,
                    rng: np.random.Generator | None = None, max_level: int | None = None) -> tuple[AnchorSet, int]:
    """Split every anchor whose mean screen-space gradient exceeds ``threshold``.

    New anchors go to the centers of the ``m`` sub-voxels of the parent's
    cell that are not already occupied; they copy the parent feature and get
    fresh offsets. Returns the new scene and the number of anchors added.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    grads = stats.mean_grad()
    hot = np.flatnonzero(grads > threshold)
    if max_level is not None:
        hot = hot[scene.levels[hot] < max_level]
    if len(hot) == 0:
        return scene, 0
    occupied = {_pos_key(p) for p in scene.positions}
    origins = scene.cell_origins()
    cells = scene.cell_sizes()
    offs = _subvoxel_offsets(m)
    new_pos, parents = [], []
    for a in hot:
        for o in offs:
            p = origins[a] + o * cells[a]
            key = _pos_key(p)
            if key in occupied:
                continue
            occupied.add(key)
            new_pos.append(p)
            parents.append(a)
    if not new_pos:
        return scene, 0
    parents = np.array(parents)
    n_new = len(parents)
    child_cell = cells[parents] / 2.0
    state = init_anchor_state(n_new, child_cell, scene.k, scene.feature_dim, rng)
    state["features"] = scene.features[parents].copy()
    grown = AnchorSet(
        positions=np.concatenate([scene.positions, np.array(new_pos)]),
        voxel_size=scene.voxel_size,
        levels=np.concatenate([scene.levels, scene.levels[parents] + 1]),
        **{k: np.concatenate([getattr(scene, k), state[k]]) for k in LEARNABLE},
    )
    return grown, n_new


def prune_anchors(scene: AnchorSet, stats: GradStats, threshold: float) -> tuple[AnchorSet, np.ndarray]:
    """Drop anchors whose mean offset opacity is below ``threshold``; returns (scene, kept indices)."""
    keep = np.flatnonzero(stats.mean_opacity() >= threshold)
    if len(keep) == 0:
        raise TrainingError("pruning would remove every anchor")
    if len(keep) == scene.n_anchors:
        return scene, keep
    return scene.select(keep), keep


# ----------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    scene: AnchorSet
    heads: HeadBank
    metrics: list[dict] = field(default_factory=list)
    iteration: int = 0
    rng_state: dict | None = None


class MetricsWriter:
    """Append-only CSV, fsynced every ``sync_every`` rows."""

    def __init__(self, path, sync_every: int = 500):
        self.path = path
        self.sync_every = sync_every
        self._fh = open(path, "w", newline="")
        self._w = csv.DictWriter(self._fh, fieldnames=METRIC_COLUMNS)
        self._w.writeheader()
        self._rows = 0

    def write(self, row: dict) -> None:
        self._w.writerow({k: row[k] for k in METRIC_COLUMNS})
        self._rows += 1
        if self._rows % self.sync_every == 0:
            self._fh.flush()
            os.fsync(self._fh.fileno())

    def close(self) -> None:
        self._fh.flush()
        os.fsync(self._fh.fileno())
        self._fh.close()


def _check_finite(loss: float, params: dict, grads: dict, it: int) -> None:
    if np.isfinite(loss):
        bad = [n for n, gr in grads.items() if not np.all(np.isfinite(gr))]
        if not bad:
            return
    else:
        bad = [n for n, p in params.items() if not np.all(np.isfinite(p))]
        bad += [n for n, gr in grads.items() if not np.all(np.isfinite(gr))]
    raise TrainingError(f"non-finite loss or gradient at iteration {it}; offending groups: {bad or ['<render>']}")


def train_step(scene: AnchorSet, heads: HeadBank, strategy: DeformStrategy, frame: CameraFrame,
               cfg: TrainConfig, knn=None, it: int | None = None, rng=None):
    """Forward and backward for one frame.

    Returns ``(graph, parts, composed, splats)``; gradients are on the graph.
    """
    g = Graph()
    gs = compose_gaussians(scene, heads, strategy, frame.t, frame.center, graph=g,
                           training=True, use_mask=cfg.use_mask, knn=knn, gate=cfg.mask_gate,
                           rng=rng if rng is not None else np.random.default_rng(0))
    splats = project(gs.means, gs.scales, gs.quats, gs.opacities, gs.colors, frame)
    image, _ = composite(splats, frame.width, frame.height, cfg.raster_mode)
    lam_t = cfg.lam_t if cfg.use_mask else 0.0
    if it is not None and it <= cfg.mask_warmup:
        # let the deformation net learn some motion before the regularizer bites
        lam_t = 0.0
    loss, parts = total_loss(image, frame.ground_truth, gs.mask_probs, cfg.lam, lam_t)
    g.backward(loss)
    parts["psnr"] = psnr(np.clip(image.data, 0, 1), frame.ground_truth)
    return g, parts, gs, splats


def train(scene: AnchorSet, heads: HeadBank, frames: Sequence[CameraFrame], config: TrainConfig,
          strategy: DeformStrategy | None = None, metrics_path=None, progress_every: int = 0,
          callback=None) -> TrainResult:
    """Optimize ``scene`` and ``heads`` in place against ``frames``.

    One frame per step from a seeded per-epoch shuffle; densify and prune run
    every ``densify_interval`` steps inside ``[densify_start, densify_stop]``.
    Anchor positions are never written to. ``callback(it, scene, heads)`` runs
    after every step.
    """
    frames = [f for f in frames if f.ground_truth is not None]
    if not frames:
        raise TrainingError("training needs at least one frame with ground truth")
    strategy = strategy or DeformStrategy()
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    adam = Adam()
    stats = GradStats.empty(scene.n_anchors, scene.k)
    writer = MetricsWriter(metrics_path) if metrics_path else None
    metrics: list[dict] = []
    order: list[int] = []
    knn = knn_table(scene, strategy.knn_k) if strategy.kind == "knn" else None
    try:
        for it in range(1, cfg.iterations + 1):
            tic = time.perf_counter()
            if not order:
                order = list(rng.permutation(len(frames)))
            frame = frames[order.pop()]
            if knn is not None and it % cfg.densify_interval == 1:
                knn = knn_table(scene, strategy.knn_k)
            g, parts, gs, splats = train_step(scene, heads, strategy, frame, cfg, knn, it, rng)

            params = learnable_inventory(scene, heads)
            grads = {name: g.grad_of(arr) for name, arr in params.items()}
            _check_finite(parts["loss"], params, grads, it)
            lrs = learning_rates(params, cfg, (it - 1) / max(cfg.iterations, 1))
            adam.step(params, grads, lrs)

            stats.record(splats.index, splats.means2d.grad, gs.opacities.data, scene.k)
            if (cfg.densify_start <= it <= cfg.densify_stop and it % cfg.densify_interval == 0):
                scene, stats = _adapt(scene, stats, adam, cfg, rng, it)
                if strategy.kind == "knn":
                    knn = knn_table(scene, strategy.knn_k)

            row = dict(parts)
            row.update(iteration=it, n_anchors=scene.n_anchors,
                       n_dynamic_anchors=int(np.sum(gs.mask_probs.data > 0.5)) if cfg.use_mask else scene.n_anchors,
                       wall_ms=(time.perf_counter() - tic) * 1e3)
            metrics.append(row)
            if writer:
                writer.write(row)
            if progress_every and it % progress_every == 0:
                log.info("it %d loss %.4f psnr %.2f anchors %d dynamic %d", it, row["loss"], row["psnr"],
                         row["n_anchors"], row["n_dynamic_anchors"])
            if callback is not None:
                callback(it, scene, heads)
    finally:
        if writer:
            writer.close()
    return TrainResult(scene, heads, metrics, cfg.iterations, rng.bit_generator.state)


def _adapt(scene, stats, adam, cfg, rng, it):
    n_before = scene.n_anchors
    scene, added = densify_anchors(scene, stats, cfg.densify_grad_threshold, cfg.densify_subvoxels,
                                   rng, cfg.max_level)
    if added:
        adam.remap_rows([f"scene.{k}" for k in LEARNABLE], np.arange(n_before), added)
        stats.opacity_accum = np.concatenate([stats.opacity_accum,
                                              np.full((added, scene.k), np.inf)])
    # anchors created in this event are never pruned in it
    scene, keep = prune_anchors(scene, stats, cfg.prune_opacity_threshold)
    if len(keep) < n_before + added:
        adam.remap_rows([f"scene.{k}" for k in LEARNABLE], keep, 0)
    if added or len(keep) < n_before + added:
        log.debug("it %d: +%d anchors, -%d pruned -> %d", it, added, n_before + added - len(keep), scene.n_anchors)
    return scene, GradStats.empty(scene.n_anchors, scene.k)
