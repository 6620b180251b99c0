"""Anchor-grid scene state: voxelized anchors and their per-offset parameters."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

DEFAULT_VOXEL_SIZE = 0.6
DEFAULT_K = 10
DEFAULT_FEATURE_DIM = 8

# per-anchor learnable arrays, in the order they are serialized
LEARNABLE = (
    "features",
    "offset_features",
    "offset_positions",
    "anchor_scales",
    "offset_scales",
    "offset_quats",
    "position_scale",
)


@dataclass
class PointCloud:
    points: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.points):
                raise ValueError("colors and points differ in length")

    def __len__(self) -> int:
        return len(self.points)


def read_point_cloud(path) -> PointCloud:
    """Parse ``x y z [r g b]`` lines; ``#`` starts a comment."""
    pts, cols = [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (3, 6):
            raise ValueError(f"{path}:{lineno}: expected 3 or 6 numbers, got {len(parts)}")
        nums = [float(p) for p in parts]
        pts.append(nums[:3])
        cols.append(nums[3:] if len(nums) == 6 else None)
    has_colors = bool(cols) and all(c is not None for c in cols)
    return PointCloud(np.array(pts, dtype=np.float64).reshape(-1, 3),
                      np.array(cols, dtype=np.float64) if has_colors else None)


def write_point_cloud(path, cloud: PointCloud) -> None:
    lines = ["# x y z" + (" r g b" if cloud.colors is not None else "")]
    for i, p in enumerate(cloud.points):
        row = [repr(float(x)) for x in p]
        if cloud.colors is not None:
            row += [repr(float(x)) for x in cloud.colors[i]]
        lines.append(" ".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class AnchorSet:
    positions: np.ndarray         # (N, 3) frozen
    features: np.ndarray          # (N, d)
    offset_features: np.ndarray   # (N, K, d)
    offset_positions: np.ndarray  # (N, K, 3), multiplied by position_scale
    anchor_scales: np.ndarray     # (N, 3), log-space
    offset_scales: np.ndarray     # (N, K, 3), log-space
    offset_quats: np.ndarray      # (N, K, 4), (w, x, y, z)
    position_scale: np.ndarray    # (N, 3)
    voxel_size: float = DEFAULT_VOXEL_SIZE
    levels: np.ndarray = field(default=None)  # (N,) subdivision depth, 0 for voxelized anchors

    def __post_init__(self):
        if self.levels is None:
            self.levels = np.zeros(len(self.positions), dtype=np.int64)

    @property
    def n_anchors(self) -> int:
        return len(self.positions)

    @property
    def k(self) -> int:
        return self.offset_features.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def learnable(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in LEARNABLE}

    def cell_sizes(self) -> np.ndarray:
        return self.voxel_size / (2.0 ** self.levels)

    def cell_origins(self) -> np.ndarray:
        """Lower corner of each anchor's cell.

        Voxelized anchors sit on their cell's lower corner; densified anchors
        sit at the center of the sub-voxel they were spawned in.
        """
        half = np.where(self.levels > 0, self.cell_sizes() / 2.0, 0.0)
        return self.positions - half[:, None]

    def select(self, keep: np.ndarray) -> "AnchorSet":
        keep = np.asarray(keep)
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        for name, val in kw.items():
            if isinstance(val, np.ndarray):
                kw[name] = val[keep].copy()
        return AnchorSet(**kw)

    def copy(self) -> "AnchorSet":
        return self.select(np.arange(self.n_anchors))


def init_anchor_state(n: int, cell: np.ndarray, k: int, d: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fresh learnable state for ``n`` anchors with per-anchor cell sizes ``cell``."""
    cell = np.broadcast_to(np.asarray(cell, dtype=np.float64), (n,))
    quats = np.zeros((n, k, 4))
    quats[..., 0] = 1.0
    return {
        "features": rng.uniform(-0.1, 0.1, (n, d)),
        "offset_features": rng.uniform(-0.1, 0.1, (n, k, d)),
        "offset_positions": rng.uniform(-0.5, 0.5, (n, k, 3)),
        "anchor_scales": np.repeat(np.log(cell / 4.0)[:, None], 3, axis=1),
        "offset_scales": np.zeros((n, k, 3)),
        "offset_quats": quats,
        "position_scale": np.repeat(cell[:, None], 3, axis=1).copy(),
    }


def voxel_corners(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """Floor each coordinate to the voxel grid and drop duplicates, keeping first-seen order."""
    idx = np.floor(points / voxel_size)
    # the division can land just below an integer (3 * 0.6 / 0.6 < 3); settle the
    # index so that idx * size <= p < (idx + 1) * size holds in float arithmetic
    idx = np.where((idx + 1) * voxel_size <= points, idx + 1, idx)
    idx = np.where(idx * voxel_size > points, idx - 1, idx).astype(np.int64)
    _, first = np.unique(idx, axis=0, return_index=True)
    first = np.sort(first)
    return idx[first].astype(np.float64) * voxel_size


def voxelize_points(
    cloud: PointCloud,
    voxel_size: float = DEFAULT_VOXEL_SIZE,
    k: int = DEFAULT_K,
    feature_dim: int = DEFAULT_FEATURE_DIM,
    seed: int = 0,
) -> AnchorSet:
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    pts = np.asarray(cloud.points, dtype=np.float64)
    if len(pts) == 0:
        raise ValueError("point cloud is empty")
    bad = np.flatnonzero(~np.isfinite(pts).all(axis=1))
    if len(bad):
        raise ValueError(f"point {int(bad[0])} has a non-finite coordinate")
    positions = voxel_corners(pts, voxel_size)
    n = len(positions)
    state = init_anchor_state(n, voxel_size, k, feature_dim, np.random.default_rng(seed))
    return AnchorSet(positions=positions, voxel_size=float(voxel_size), **state)
