"""Procedural dynamic scenes of soft spheres with analytic ground truth.

Ground-truth frames are ray traced directly from the blob description: every
blob is a Gaussian density cloud whose optical depth along a ray has a closed
form, and blobs are blended front to back by their closest-approach depth.
Nothing here touches the rasterizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .rasterizer import CameraFrame
from .scene import PointCloud

MOTIONS = ("static", "linear", "circular", "oscillating")
PEAK_DEPTH = 6.0  # optical depth through a blob center
SUPERSAMPLE = 2   # per axis, i.e. 4 rays per pixel


@dataclass
class Blob:
    center: np.ndarray
    radius: float
    color: np.ndarray
    motion: str = "static"
    amplitude: float = 0.0
    direction: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    pulse: float = 0.0  # relative radius oscillation, only for "oscillating"

    def __post_init__(self):
        if self.motion not in MOTIONS:
            raise ValueError(f"unknown motion {self.motion!r}")
        self.center = np.asarray(self.center, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        self.direction = d / np.linalg.norm(d)

    @property
    def dynamic(self) -> bool:
        return self.motion != "static"

    def displacement(self, t: float) -> np.ndarray:
        a, d = self.amplitude, self.direction
        if self.motion == "linear":
            return a * t * d
        if self.motion == "oscillating":
            return a * np.sin(2 * np.pi * t) * d
        if self.motion == "circular":
            e1 = np.cross(d, [0.0, 0.0, 1.0] if abs(d[2]) < 0.9 else [1.0, 0.0, 0.0])
            e1 /= np.linalg.norm(e1)
            e2 = np.cross(d, e1)
            ang = 2 * np.pi * t
            return a * ((np.cos(ang) - 1.0) * e1 + np.sin(ang) * e2)
        return np.zeros(3)

    def radius_at(self, t: float) -> float:
        if self.motion == "oscillating":
            return self.radius * (1.0 + self.pulse * np.sin(2 * np.pi * t))
        return self.radius


@dataclass
class SceneSpec:
    blobs: list[Blob]
    n_timesteps: int = 20
    n_cameras: int = 2
    width: int = 64
    height: int = 64
    seed: int = 42
    camera_distance: float = 7.0
    camera_spread_deg: float = 30.0
    focal: float = 80.0
    points_per_blob: int = 60

    def __post_init__(self):
        if not self.blobs:
            raise ValueError("a scene needs at least one blob")
        if self.n_timesteps < 2:
            raise ValueError("need at least two timesteps")
        if self.n_cameras < 1:
            raise ValueError("need at least one camera")

    @property
    def static_blobs(self) -> int:
        return sum(not b.dynamic for b in self.blobs)

    @property
    def dynamic_blobs(self) -> int:
        return sum(b.dynamic for b in self.blobs)

    def times(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_timesteps)


def random_spec(static_blobs: int = 6, dynamic_blobs: int = 2, motions=("linear", "oscillating"),
                seed: int = 42, **kw) -> SceneSpec:
    """Blobs scattered in a 4 x 2.6 x 1.6 box, dynamic blobs amplitude 0.6 to 0.8.

    The focal length follows the image width (80 px at 64 px wide) unless
    given, so the field of view does not depend on resolution.
    """
    kw.setdefault("focal", 80.0 * kw.get("width", 64) / 64)
    rng = np.random.default_rng(seed)
    blobs: list[Blob] = []
    total = static_blobs + dynamic_blobs
    for i in range(total):
        dyn = i >= static_blobs
        for _ in range(1000):
            center = rng.uniform([-1.6, -1.0, -0.8], [1.6, 1.0, 0.8])
            radius = rng.uniform(0.35, 0.55)
            if all(np.linalg.norm(center - b.center) > radius + b.radius + 0.1 for b in blobs):
                break
        else:
            raise ValueError("could not place blobs without overlap")
        hue = rng.uniform(0, 1)
        color = 0.15 + 0.8 * np.clip(np.abs((hue * 6 + np.array([0, 4, 2])) % 6 - 3) - 1, 0, 1)
        if dyn:
            motion = motions[(i - static_blobs) % len(motions)]
            direction = rng.normal(size=3)
            direction[2] *= 0.3
            blobs.append(Blob(center, radius, color, motion, rng.uniform(0.6, 0.8), direction,
                              pulse=0.25 if motion == "oscillating" else 0.0))
        else:
            blobs.append(Blob(center, radius, color))
    return SceneSpec(blobs=blobs, seed=seed, **kw)


PRESETS = {
    "blobs-v1": lambda: random_spec(6, 2, ("linear", "oscillating"), seed=42,
                                    n_timesteps=20, n_cameras=2, width=64, height=64),
}


def preset(name: str) -> SceneSpec:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; known: {sorted(PRESETS)}") from None


def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera rotation and translation (x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    return rot, -rot @ eye


def make_cameras(spec: SceneSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    half = np.deg2rad(spec.camera_spread_deg) / 2
    if spec.n_cameras == 1:
        angles = [0.0]
    else:
        angles = np.linspace(-half, half, spec.n_cameras)
    out = []
    for ang in angles:
        eye = spec.camera_distance * np.array([np.sin(ang), 0.0, -np.cos(ang)])
        out.append(look_at(eye, np.zeros(3)))
    return out


def render_blobs(blobs: list[Blob], t: float, camera: CameraFrame, supersample: int = SUPERSAMPLE) -> np.ndarray:
    """Analytic emission-absorption image of the blobs at time ``t``."""
    w, h, s = camera.width, camera.height, supersample
    offs = (np.arange(s) + 0.5) / s - 0.5
    us = (np.arange(w)[:, None] + offs[None, :]).reshape(-1)
    vs = (np.arange(h)[:, None] + offs[None, :]).reshape(-1)
    uu, vv = np.meshgrid(us, vs)
    dirs_cam = np.stack([(uu - camera.cx) / camera.fx, (vv - camera.cy) / camera.fy, np.ones_like(uu)], -1)
    dirs = dirs_cam @ camera.rotation
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origin = camera.center

    depth = []
    alpha = []
    for b in blobs:
        c = b.center + b.displacement(t)
        sd = (b.radius_at(t) / 2.0)
        rel = c - origin
        along = dirs @ rel
        perp2 = np.maximum(rel @ rel - along ** 2, 0.0)
        tau = PEAK_DEPTH * np.exp(-perp2 / (2 * sd * sd)) * (along > 0)
        depth.append(along)
        alpha.append(1.0 - np.exp(-tau))
    depth = np.stack(depth, -1)
    alpha = np.stack(alpha, -1)
    colors = np.stack([b.color for b in blobs])
    order = np.argsort(depth, axis=-1, kind="stable")
    a_sorted = np.take_along_axis(alpha, order, -1)
    trans = np.cumprod(1.0 - a_sorted, axis=-1)
    trans = np.concatenate([np.ones_like(trans[..., :1]), trans[..., :-1]], -1)
    img = np.einsum("...b,...bc->...c", a_sorted * trans, colors[order])
    return img.reshape(h, s, w, s, 3).mean(axis=(1, 3))


@dataclass
class SyntheticScene:
    spec: SceneSpec
    frames: list[CameraFrame]          # ordered by (camera, timestep)
    frame_keys: list[tuple[int, int]]  # (camera index, timestep index)
    init_cloud: PointCloud
    region_labels: np.ndarray          # per init point, 1 = dynamic

    def motion_oracle(self, t: float) -> np.ndarray:
        """Per-blob displacement from the canonical (t = 0) layout."""
        return np.stack([b.displacement(t) for b in self.spec.blobs])

    def frame(self, cam: int, step: int) -> CameraFrame:
        return self.frames[self.frame_keys.index((cam, step))]

    def split(self, holdout_every: int = 5, holdout_phase: int = 2):
        """(train, held-out) frames; every ``holdout_every``-th timestep is held out."""
        train, test = [], []
        for key, fr in zip(self.frame_keys, self.frames):
            (test if key[1] % holdout_every == holdout_phase else train).append(fr)
        return train, test

    def blob_labels(self) -> np.ndarray:
        """Boolean per blob, True = dynamic."""
        return np.array([b.dynamic for b in self.spec.blobs], dtype=bool)

    def nearest_blob(self, points: np.ndarray) -> np.ndarray:
        """Index of the blob whose canonical surface is closest to each point."""
        centers = np.stack([b.center for b in self.spec.blobs])
        radii = np.array([b.radius for b in self.spec.blobs])
        dist = np.linalg.norm(points[:, None, :] - centers[None], axis=-1) - radii
        return np.argmin(np.abs(dist), axis=1)

    def anchor_labels(self, positions: np.ndarray) -> np.ndarray:
        return self.blob_labels()[self.nearest_blob(positions)]


def check_frustum(spec: SceneSpec, cameras) -> None:
    for bi, b in enumerate(spec.blobs):
        for t in spec.times():
            c = b.center + b.displacement(t)
            r = b.radius_at(t)
            for rot, trans in cameras:
                x, y, z = rot @ c + trans
                if z - r <= 0.1:
                    raise ValueError(f"blob {bi} reaches behind camera at t={t:.3f}")
                u = spec.focal * x / z + (spec.width - 1) / 2
                v = spec.focal * y / z + (spec.height - 1) / 2
                pr = spec.focal * r / z
                if u - pr < 0 or u + pr > spec.width - 1 or v - pr < 0 or v + pr > spec.height - 1:
                    raise ValueError(f"blob {bi} escapes the view frustum at t={t:.3f}")


def surface_points(blob: Blob, n: int, rng: np.random.Generator) -> np.ndarray:
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return blob.center + blob.radius * d


def generate(spec: SceneSpec) -> SyntheticScene:
    if spec.points_per_blob < 50:
        raise ValueError("need at least 50 points per blob")
    cams = make_cameras(spec)
    check_frustum(spec, cams)
    rng = np.random.default_rng(spec.seed)
    pts, cols, labels = [], [], []
    for b in spec.blobs:
        pts.append(surface_points(b, spec.points_per_blob, rng))
        cols.append(np.repeat(b.color[None], spec.points_per_blob, axis=0))
        labels.append(np.full(spec.points_per_blob, int(b.dynamic)))
    cloud = PointCloud(np.concatenate(pts), np.concatenate(cols))

    frames, keys = [], []
    cx, cy = (spec.width - 1) / 2, (spec.height - 1) / 2
    static_cache: dict[int, np.ndarray] = {}
    for ci, (rot, trans) in enumerate(cams):
        for ti, t in enumerate(spec.times()):
            cam = CameraFrame(rot, trans, spec.focal, spec.focal, cx, cy, spec.width, spec.height, float(t))
            if spec.dynamic_blobs == 0 and ci in static_cache:
                img = static_cache[ci]
            else:
                img = render_blobs(spec.blobs, float(t), cam)
                static_cache[ci] = img
            frames.append(replace(cam, ground_truth=img.copy()))
            keys.append((ci, ti))
    return SyntheticScene(spec, frames, keys, cloud, np.concatenate(labels))


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; ``inf`` for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)
