"""Pinhole projection and front-to-back alpha compositing of 3D Gaussians.

Projection (camera transform, covariance, local-affine Jacobian) is written
with graph ops so its gradients come from the tape. Per-pixel compositing is
one fused op with a hand-written backward pass. ``naive`` sorts every splat
once and composites all pixels against the full list; ``tiled`` bins splats
into 16x16 pixel tiles by their 3-sigma box and composites per tile. Both
paths evaluate a splat only inside its 3-sigma box, so they agree to
round-off.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Value

log = logging.getLogger(__name__)

NEAR = 0.01
COV_DILATION = 0.3
ALPHA_MAX = 0.99
T_MIN = 1e-4
TILE = 16
_BLOCK = 1 << 21  # pixel x splat entries evaluated at once


@dataclass
class CameraFrame:
    rotation: np.ndarray  # world -> camera
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    t: float = 0.0
    ground_truth: np.ndarray | None = None

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError("camera rotation is not orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def world_to_camera(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.rotation.T + self.translation


@dataclass
class Splat2D:
    center: np.ndarray
    cov2d: np.ndarray
    depth: float
    opacity: float
    color: np.ndarray


# ----------------------------------------------------------------------------
# single-primitive reference routines


def quat_to_rotmat(q) -> np.ndarray:
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    rows = [
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def build_covariance(quaternion, scale) -> np.ndarray:
    """R S S^T R^T for a unit quaternion (w, x, y, z) and positive scales."""
    rot = quat_to_rotmat(quaternion)
    m = rot * np.asarray(scale, dtype=np.float64)[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


def project_gaussian(primitive, camera: CameraFrame) -> Splat2D | None:
    """Project one primitive; returns None when it is culled."""
    x, y, z = camera.world_to_camera(np.asarray(primitive.position, dtype=np.float64))
    if z <= NEAR:
        return None
    jac = np.array([[camera.fx / z, 0.0, -camera.fx * x / z ** 2],
                    [0.0, camera.fy / z, -camera.fy * y / z ** 2]])
    tm = jac @ camera.rotation
    cov = tm @ build_covariance(primitive.quaternion, primitive.scale) @ tm.T + COV_DILATION * np.eye(2)
    center = np.array([camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy])
    rx, ry = 3.0 * np.sqrt(cov[0, 0]), 3.0 * np.sqrt(cov[1, 1])
    if (center[0] + rx < 0 or center[0] - rx > camera.width - 1
            or center[1] + ry < 0 or center[1] - ry > camera.height - 1):
        return None
    return Splat2D(center, cov, float(z), float(primitive.opacity), np.asarray(primitive.color, dtype=np.float64))


def composite_pixel(splats, pixel, background=(0.0, 0.0, 0.0)) -> tuple[np.ndarray, float]:
    """Front-to-back blend of depth-sorted splats at one pixel.

    Returns the color and the transmittance left after the last splat.
    """
    px = np.asarray(pixel, dtype=np.float64)
    color = np.zeros(3)
    trans = 1.0
    for s in splats:
        if trans < T_MIN:
            break
        cov = np.asarray(s.cov2d, dtype=np.float64)
        det = cov[0, 0] * cov[1, 1] - cov[0, 1] ** 2
        if not det > 0:
            log.warning("skipping splat with singular 2D covariance")
            continue
        d = px - s.center
        if abs(d[0]) > 3.0 * np.sqrt(cov[0, 0]) or abs(d[1]) > 3.0 * np.sqrt(cov[1, 1]):
            continue
        power = -0.5 * d @ np.linalg.solve(cov, d)
        alpha = min(ALPHA_MAX, s.opacity * np.exp(power))
        color += np.asarray(s.color) * alpha * trans
        trans *= 1.0 - alpha
    return color + trans * np.asarray(background, dtype=np.float64), trans


# ----------------------------------------------------------------------------
# batched differentiable projection


def _quat_rotmat_graph(q: Value) -> Value:
    w, x, y, z = (q[:, i] for i in range(4))
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    rows = [
        [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
        [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
        [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
    ]
    return ad.stack([ad.stack(r, axis=-1) for r in rows], axis=-2)


@dataclass
class ProjectedSplats:
    means2d: Value   # (S, 2)
    conics: Value    # (S, 3): inverse covariance entries (a, b, c) of a x^2 + 2 b x y + c y^2
    opacities: Value
    colors: Value
    depths: np.ndarray
    radii: np.ndarray  # (S, 2) half-widths of the 3-sigma box
    index: np.ndarray  # source primitive of every splat


def project(means: Value, scales: Value, quats: Value, opacities: Value, colors: Value,
            camera: CameraFrame) -> ProjectedSplats:
    g = means.graph
    cam_pts = camera.world_to_camera(means.data)
    keep = np.flatnonzero(cam_pts[:, 2] > NEAR)
    if len(keep) < len(cam_pts):
        means, scales, quats = ad.take(means, keep), ad.take(scales, keep), ad.take(quats, keep)
        opacities, colors = ad.take(opacities, keep), ad.take(colors, keep)
    n = len(keep)
    if n == 0:
        empty = g.const(np.zeros((0, 2)))
        return ProjectedSplats(empty, g.const(np.zeros((0, 3))), g.const(np.zeros(0)),
                               g.const(np.zeros((0, 3))), np.zeros(0), np.zeros((0, 2)), keep)

    rot_c = camera.rotation
    pc = ad.matmul(means, rot_c.T) + camera.translation
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    iz = 1.0 / z
    fx, fy = camera.fx, camera.fy
    zero = g.const(np.zeros(n))
    jac = ad.stack([
        ad.stack([fx * iz, zero, -fx * x * iz * iz], axis=-1),
        ad.stack([zero, fy * iz, -fy * y * iz * iz], axis=-1),
    ], axis=-2)
    tm = ad.matmul(jac, rot_c)
    m = _quat_rotmat_graph(quats) * scales.reshape(n, 1, 3)
    sigma = ad.matmul(m, ad.swap_last(m))
    cov = ad.matmul(ad.matmul(tm, sigma), ad.swap_last(tm))
    a = cov[:, 0, 0] + COV_DILATION
    b = cov[:, 0, 1]
    c = cov[:, 1, 1] + COV_DILATION
    det = a * c - b * b
    conics = ad.stack([c / det, -b / det, a / det], axis=-1)
    means2d = ad.stack([fx * x * iz + camera.cx, fy * y * iz + camera.cy], axis=-1)

    radii = 3.0 * np.sqrt(np.stack([a.data, c.data], axis=-1))
    ctr = means2d.data
    lo = ctr - radii
    hi = ctr + radii
    vis = ((hi[:, 0] >= 0) & (lo[:, 0] <= camera.width - 1)
           & (hi[:, 1] >= 0) & (lo[:, 1] <= camera.height - 1) & (det.data > 0))
    sel = np.flatnonzero(vis)
    if len(sel) < n:
        means2d, conics = ad.take(means2d, sel), ad.take(conics, sel)
        opacities, colors = ad.take(opacities, sel), ad.take(colors, sel)
    return ProjectedSplats(means2d, conics, opacities, colors, z.data[sel], radii[sel], keep[sel])


# ----------------------------------------------------------------------------
# fused compositing


def _depth_order(depths: np.ndarray) -> np.ndarray:
    return np.argsort(depths, kind="stable")


def _blocks(pix: np.ndarray, n_splats: int):
    step = max(1, _BLOCK // max(n_splats, 1))
    for i in range(0, len(pix), step):
        yield pix[i:i + step]


def _tile_bins(ctr, radii, width, height) -> dict[tuple[int, int], np.ndarray]:
    x0 = np.ceil(ctr[:, 0] - radii[:, 0]).clip(0, width - 1)
    x1 = np.floor(ctr[:, 0] + radii[:, 0]).clip(0, width - 1)
    y0 = np.ceil(ctr[:, 1] - radii[:, 1]).clip(0, height - 1)
    y1 = np.floor(ctr[:, 1] + radii[:, 1]).clip(0, height - 1)
    ok = (x0 <= x1) & (y0 <= y1)
    tx0, tx1 = (x0 // TILE).astype(int), (x1 // TILE).astype(int)
    ty0, ty1 = (y0 // TILE).astype(int), (y1 // TILE).astype(int)
    ntx = (width + TILE - 1) // TILE
    nty = (height + TILE - 1) // TILE
    bins: dict[tuple[int, int], list] = {}
    # loop over tile rows/cols rather than splats: tiles are few at desk scale
    for ty in range(nty):
        rows_ok = ok & (ty0 <= ty) & (ty1 >= ty)
        if not rows_ok.any():
            continue
        for tx in range(ntx):
            hit = np.flatnonzero(rows_ok & (tx0 <= tx) & (tx1 >= tx))
            if len(hit):
                bins[(tx, ty)] = hit
    return bins


class _Compositor:
    """Forward state of one compositing call, kept for the backward pass."""

    def __init__(self, ctr, conic, opac, col, radii, order_groups, width, height, save):
        self.ctr, self.conic, self.opac, self.col = ctr, conic, opac, col
        self.radii = radii
        self.width, self.height = width, height
        self.save = save
        self.saved = []
        self.image = np.zeros((height * width, 3))
        self.remainder = np.ones(height * width)
        for pix, idx in order_groups:
            for blk in _blocks(pix, len(idx)):
                self._forward_block(blk, idx)

    def _geometry(self, pix, idx):
        px = (pix % self.width).astype(np.float64)
        py = (pix // self.width).astype(np.float64)
        dx = px[:, None] - self.ctr[idx, 0]
        dy = py[:, None] - self.ctr[idx, 1]
        return dx, dy

    def _forward_block(self, pix, idx):
        dx, dy = self._geometry(pix, idx)
        ca, cb, cc = self.conic[idx, 0], self.conic[idx, 1], self.conic[idx, 2]
        rad = self.radii[idx]
        inside = (np.abs(dx) <= rad[:, 0]) & (np.abs(dy) <= rad[:, 1])
        power = -0.5 * (ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy)
        gauss = np.exp(np.minimum(power, 0.0)) * inside
        raw = self.opac[idx] * gauss
        alpha = np.minimum(raw, ALPHA_MAX)
        t_incl = np.cumprod(1.0 - alpha, axis=1)
        t_excl = np.empty_like(t_incl)
        t_excl[:, 0] = 1.0
        t_excl[:, 1:] = t_incl[:, :-1]
        live = t_excl >= T_MIN
        alpha = alpha * live
        w = alpha * t_excl
        self.image[pix] = w @ self.col[idx]
        first_dead = np.minimum(live.sum(axis=1), len(idx) - 1)
        self.remainder[pix] = np.where(live[:, -1], t_incl[:, -1], t_excl[np.arange(len(pix)), first_dead])
        if self.save:
            self.saved.append((pix, idx, dx, dy, gauss, raw, alpha, t_excl, w, live))

    def backward(self, g_img: np.ndarray):
        n = len(self.opac)
        d_ctr = np.zeros((n, 2))
        d_con = np.zeros((n, 3))
        d_op = np.zeros(n)
        d_col = np.zeros((n, 3))
        gflat = g_img.reshape(-1, 3)
        for pix, idx, dx, dy, gauss, raw, alpha, t_excl, w, live in self.saved:
            gp = gflat[pix]
            col = self.col[idx]
            d_col[idx] += w.T @ gp
            cg = gp @ col.T
            contrib = w * cg
            after = contrib.sum(axis=1, keepdims=True) - np.cumsum(contrib, axis=1)
            d_alpha = (t_excl * cg - after / (1.0 - alpha)) * live
            d_raw = d_alpha * (raw < ALPHA_MAX)
            d_op[idx] += np.sum(d_raw * gauss, axis=0)
            d_pow = d_raw * self.opac[idx] * gauss
            ca, cb, cc = self.conic[idx, 0], self.conic[idx, 1], self.conic[idx, 2]
            d_con[idx, 0] += -0.5 * np.sum(d_pow * dx * dx, axis=0)
            d_con[idx, 1] += -np.sum(d_pow * dx * dy, axis=0)
            d_con[idx, 2] += -0.5 * np.sum(d_pow * dy * dy, axis=0)
            d_ctr[idx, 0] += np.sum(d_pow * (ca * dx + cb * dy), axis=0)
            d_ctr[idx, 1] += np.sum(d_pow * (cb * dx + cc * dy), axis=0)
        return d_ctr, d_con, d_op, d_col


def composite(splats: ProjectedSplats, width: int, height: int, mode: str = "tiled") -> tuple[Value, np.ndarray]:
    """Blend projected splats into an (H, W, 3) image value and the per-pixel transmittance."""
    if mode not in ("naive", "tiled"):
        raise ValueError(f"unknown raster mode {mode!r}")
    g = splats.means2d.graph
    ctr = splats.means2d.data
    order = _depth_order(splats.depths)
    all_pix = np.arange(width * height)
    groups = []
    if len(order):
        if mode == "naive":
            groups.append((all_pix, order))
        else:
            rank = np.empty_like(order)
            rank[order] = np.arange(len(order))
            for (tx, ty), hit in _tile_bins(ctr, splats.radii, width, height).items():
                xs = np.arange(tx * TILE, min((tx + 1) * TILE, width))
                ys = np.arange(ty * TILE, min((ty + 1) * TILE, height))
                pix = (ys[:, None] * width + xs[None, :]).reshape(-1)
                groups.append((pix, hit[np.argsort(rank[hit], kind="stable")]))
    inputs = (splats.means2d, splats.conics, splats.opacities, splats.colors)
    save = g.grad_enabled and any(v.requires_grad for v in inputs)
    comp = _Compositor(ctr, splats.conics.data, splats.opacities.data, splats.colors.data,
                       splats.radii, groups, width, height, save)
    image = g.record("rasterize", inputs, comp.image.reshape(height, width, 3), comp.backward)
    return image, comp.remainder.reshape(height, width)


def rasterize(gaussians, camera: CameraFrame, mode: str = "tiled", return_remainder: bool = False):
    """Render composed Gaussians (see ``deformation.compose_gaussians``) through ``camera``."""
    splats = project(gaussians.means, gaussians.scales, gaussians.quats,
                     gaussians.opacities, gaussians.colors, camera)
    image, rem = composite(splats, camera.width, camera.height, mode)
    if return_remainder:
        return image, rem
    return image


def render(scene, heads, strategy, camera: CameraFrame, mode: str = "tiled", graph: Graph | None = None,
           training: bool = False, use_mask: bool = True, **compose_kw):
    """Compose the scene at ``camera.t`` and rasterize it.

    Returns an (H, W, 3) array, or the image Value when ``graph`` is given.
    Extra keywords go to ``compose_gaussians``.
    """
    from .deformation import compose_gaussians

    g = graph if graph is not None else Graph(grad_enabled=False)
    gs = compose_gaussians(scene, heads, strategy, camera.t, camera.center, graph=g,
                           training=training, use_mask=use_mask, **compose_kw)
    image = rasterize(gs, camera, mode)
    return image if graph is not None else image.data


def render_primitives(means, scales, quats, opacities, colors, camera: CameraFrame, mode: str = "tiled",
                      return_remainder: bool = False):
    """Inference render from plain arrays."""
    g = Graph(grad_enabled=False)
    gs = SimpleNamespace(means=g.const(means), scales=g.const(scales), quats=g.const(quats),
                         opacities=g.const(np.asarray(opacities).reshape(-1)), colors=g.const(colors))
    out = rasterize(gs, camera, mode, return_remainder=True)
    img, rem = out[0].data, out[1]
    return (img, rem) if return_remainder else img
