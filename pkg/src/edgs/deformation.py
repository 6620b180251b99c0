"""Composition of render-ready Gaussians from anchors at a given time.

Anchor motion comes from the deformation net and is handed to each offset
through a similarity weight between the anchor feature and the offset
feature (RBF by default). ``rigid``, ``knn`` and ``cosine`` are the
alternative propagation rules used for ablations.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Graph, Value
from .heads import HeadBank
from .scene import AnchorSet

STRATEGIES = ("rbf", "rigid", "knn", "cosine")
GATES = ("sampled", "hard", "soft")
GATE_EXPLORE = 0.1  # sampled gate: on/off probability is kept inside [0.1, 0.9]


@dataclass(frozen=True)
class DeformStrategy:
    kind: str = "rbf"
    sigma: float = 1.0
    knn_k: int = 4

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown deform strategy {self.kind!r}; choose from {STRATEGIES}")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.knn_k < 1:
            raise ValueError("knn_k must be >= 1")


@dataclass
class GaussianPrimitive:
    position: np.ndarray
    scale: np.ndarray
    quaternion: np.ndarray
    opacity: float
    color: np.ndarray
    parent: tuple[int, int]


@dataclass
class ComposedGaussians:
    """Batched primitives, anchor-major and offset-minor, as graph values."""

    means: Value        # (P, 3)
    scales: Value       # (P, 3)
    quats: Value        # (P, 4)
    opacities: Value    # (P,)
    colors: Value       # (P, 3)
    mask_probs: Value   # (N,)
    dynamic: np.ndarray  # (N,) bool, anchors that queried the time-variant heads
    k: int
    timings: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.means.shape[0]

    def parents(self) -> np.ndarray:
        n = len(self) // self.k
        return np.stack(np.divmod(np.arange(n * self.k), self.k), axis=1)

    def primitives(self) -> list[GaussianPrimitive]:
        out = []
        for i, (a, k) in enumerate(self.parents()):
            out.append(GaussianPrimitive(
                position=self.means.data[i].copy(),
                scale=self.scales.data[i].copy(),
                quaternion=self.quats.data[i].copy(),
                opacity=float(self.opacities.data[i]),
                color=self.colors.data[i].copy(),
                parent=(int(a), int(k)),
            ))
        return out


def rbf_weight(f_a, f_o, sigma: float = 1.0):
    """exp(-|f_a - f_o|^2 / (2 sigma^2)) over the last axis."""
    f_a = np.asarray(f_a, dtype=np.float64)
    f_o = np.asarray(f_o, dtype=np.float64)
    if f_a.shape[-1] != f_o.shape[-1]:
        raise ValueError(f"feature lengths differ: {f_a.shape[-1]} vs {f_o.shape[-1]}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    d2 = np.sum((f_a - f_o) ** 2, axis=-1)
    return np.exp(-d2 / (2.0 * sigma * sigma))


def cosine_weight(f_a, f_o):
    f_a = np.asarray(f_a, dtype=np.float64)
    f_o = np.asarray(f_o, dtype=np.float64)
    num = np.sum(f_a * f_o, axis=-1)
    den = np.sqrt(np.sum(f_a * f_a, axis=-1) * np.sum(f_o * f_o, axis=-1) + 1e-24)
    return np.maximum(num / den, 0.0)


def offset_canonical_positions(scene: AnchorSet) -> np.ndarray:
    return scene.positions[:, None, :] + scene.offset_positions * scene.position_scale[:, None, :]


def knn_table(scene: AnchorSet, knn_k: int) -> tuple[np.ndarray, np.ndarray]:
    """Nearest anchors of every offset and their normalized inverse-distance weights.

    Returns ``(indices, weights)`` of shape ``(N, K, k)``; fewer anchors than
    ``knn_k`` means every anchor is a neighbour.
    """
    k = min(knn_k, scene.n_anchors)
    tree = cKDTree(scene.positions)
    dist, idx = tree.query(offset_canonical_positions(scene).reshape(-1, 3), k=k)
    dist = dist.reshape(scene.n_anchors, scene.k, k)
    idx = idx.reshape(scene.n_anchors, scene.k, k)
    w = 1.0 / (dist + 1e-6)
    return idx, w / w.sum(axis=-1, keepdims=True)


def offset_motion(strategy: DeformStrategy, scene: AnchorSet, anchor_motions: np.ndarray,
                  anchor: int, k: int) -> np.ndarray:
    """Displacement of offset ``k`` of ``anchor`` given every anchor's motion."""
    if not (0 <= anchor < scene.n_anchors and 0 <= k < scene.k):
        raise IndexError("anchor or offset index out of range")
    motions = np.asarray(anchor_motions, dtype=np.float64)
    own = motions[anchor]
    f_a = scene.features[anchor]
    f_o = scene.offset_features[anchor, k]
    if strategy.kind == "rigid":
        return own.copy()
    if strategy.kind == "rbf":
        return rbf_weight(f_a, f_o, strategy.sigma) * own
    if strategy.kind == "cosine":
        return cosine_weight(f_a, f_o) * own
    idx, w = knn_table(scene, strategy.knn_k)
    return np.einsum("j,jc->c", w[anchor, k], motions[idx[anchor, k]])


def view_directions(positions: np.ndarray, cam_center: np.ndarray) -> np.ndarray:
    d = positions - np.asarray(cam_center, dtype=np.float64)
    return d / np.linalg.norm(d, axis=1, keepdims=True).clip(1e-12)


def _normalize_quats(q: Value) -> Value:
    return q / ad.sqrt(ad.squared_norm(q, axis=-1, keepdims=True))


def compose_gaussians(
    scene: AnchorSet,
    heads: HeadBank,
    strategy: DeformStrategy,
    t: float,
    cam_center=None,
    graph: Graph | None = None,
    training: bool = False,
    use_mask: bool = True,
    knn: tuple[np.ndarray, np.ndarray] | None = None,
    gate: str = "sampled",
    rng: np.random.Generator | None = None,
) -> ComposedGaussians:
    """Assemble the N*K primitives of ``scene`` at time ``t``.

    In training mode every anchor queries the time-variant heads and its
    deltas are multiplied by a gate built from the mask probability p.
    Otherwise anchors with p <= 0.5 skip those heads and keep their
    canonical shape. With ``use_mask=False`` the gate is 1 for every anchor.

    ``gate="sampled"`` (training default) switches each anchor on with
    probability p, clipped to [0.1, 0.9], and passes the gate gradient to p
    divided by twice the probability of the drawn state. In expectation p
    then sees the average of the loss slopes with motion on and off, a
    trapezoid estimate of what the motion is worth. ``gate="hard"`` uses the
    thresholded label with a straight-through gradient. ``gate="soft"``
    multiplies by p itself, in training and for dynamic anchors at inference.
    """
    if gate not in GATES:
        raise ValueError(f"unknown gate {gate!r}; choose from {GATES}")
    g = graph if graph is not None else Graph(grad_enabled=False)
    n, k = scene.n_anchors, scene.k
    t0 = time.perf_counter()

    f = g.param(scene.features)
    if heads.view_dependent:
        if cam_center is None:
            raise ValueError("cam_center is required for view-dependent color")
        dirs = view_directions(scene.positions, cam_center)
    else:
        dirs = None
    opac = heads.opacity(f)
    cols = heads.color(f, dirs)
    probs = heads.mask_prob(f)

    pscale = g.param(scene.position_scale)
    means = g.const(scene.positions[:, None, :]) + g.param(scene.offset_positions) * pscale.reshape(n, 1, 3)
    log_scale = g.param(scene.anchor_scales).reshape(n, 1, 3) + g.param(scene.offset_scales)
    quats = g.param(scene.offset_quats)

    t1 = time.perf_counter()
    if use_mask and not training:
        dynamic = probs.data > 0.5
    else:
        dynamic = np.ones(n, dtype=bool)
    rows = np.flatnonzero(dynamic)
    subset = len(rows) < n

    if len(rows):
        f_dyn = ad.take(f, rows) if subset else f
        w = _gate_values(probs, rows, subset, use_mask, training, gate, rng)
        dx_a = heads.deform(g, scene.positions[rows], t)
        ds = heads.scale_delta(f_dyn, t)
        dr = heads.quat_delta(f_dyn, t)
        if w is not None:
            dx_a = dx_a * w
            ds = ds * w.reshape(len(rows), 1, 1)
            dr = dr * w.reshape(len(rows), 1, 1)
        dx_o = _propagate(strategy, scene, g, f_dyn, rows, dx_a, subset, knn)
        if subset:
            dx_o = ad.scatter_rows(dx_o, rows, n)
            ds = ad.scatter_rows(ds, rows, n)
            dr = ad.scatter_rows(dr, rows, n)
        means = means + dx_o
        log_scale = log_scale + ds
        quats = quats + dr
    t2 = time.perf_counter()

    scales = ad.exp(log_scale)
    quats = _normalize_quats(quats)
    p = n * k
    out = ComposedGaussians(
        means=means.reshape(p, 3),
        scales=scales.reshape(p, 3),
        quats=quats.reshape(p, 4),
        opacities=opac.reshape(p),
        colors=cols.reshape(p, 3),
        mask_probs=probs,
        dynamic=dynamic,
        k=k,
    )
    t3 = time.perf_counter()
    out.timings = {"compose_ms": (t3 - t0) * 1e3, "time_variant_ms": (t2 - t1) * 1e3}
    return out


def _gate_values(probs: Value, rows, subset, use_mask, training, gate, rng) -> Value | None:
    """Per-row gate (n_rows, 1), or None when it is identically 1."""
    if not use_mask or (gate != "soft" and not training):
        return None
    p = ad.take(probs, rows) if subset else probs
    p = p.reshape(len(rows), 1)
    if gate == "soft":
        return p
    g = p.graph
    if gate == "hard":
        # straight-through: forward value is the 0/1 label, gradient flows to p
        return p + g.const((p.data > 0.5) - p.data)
    if rng is None:
        raise ValueError("the sampled gate needs an rng")
    q = np.clip(p.data, GATE_EXPLORE, 1.0 - GATE_EXPLORE)
    on = rng.random(q.shape) < q
    weight = 0.5 / np.where(on, q, 1.0 - q)
    return g.const(on.astype(np.float64)) + (p - g.const(p.data)) * weight


def _propagate(strategy, scene, g, f_dyn, rows, dx_a, subset, knn):
    """Per-offset displacement (n_rows, K, 3) from anchor displacement (n_rows, 3)."""
    n_rows, k = len(rows), scene.k
    if strategy.kind == "rigid":
        return ad.broadcast_to(dx_a.reshape(n_rows, 1, 3), (n_rows, k, 3))
    if strategy.kind == "knn":
        idx, w = knn if knn is not None else knn_table(scene, strategy.knn_k)
        motion = ad.scatter_rows(dx_a, rows, scene.n_anchors) if subset else dx_a
        nb = ad.take(motion, idx[rows].reshape(-1)).reshape(n_rows, k, idx.shape[-1], 3)
        return ad.sum(nb * w[rows][..., None], axis=2)
    f_o = g.param(scene.offset_features)
    if subset:
        f_o = ad.take(f_o, rows)
    fa = f_dyn.reshape(n_rows, 1, -1)
    if strategy.kind == "rbf":
        d2 = ad.squared_norm(f_o - fa, axis=-1)
        w = ad.exp(d2 * (-0.5 / strategy.sigma ** 2))
    else:
        num = ad.sum(f_o * fa, axis=-1)
        den = ad.sqrt(ad.squared_norm(f_o, axis=-1) * ad.squared_norm(fa, axis=-1) + 1e-24)
        w = ad.maximum(num / den, 0.0)
    return w.reshape(n_rows, k, 1) * dx_a.reshape(n_rows, 1, 3)
