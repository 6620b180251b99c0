"""Tiny MLP heads that decode Gaussian attributes from anchor features."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Value, positional_encoding

POS_FREQS = 10
TIME_FREQS = 6
MASK_INIT_LOGIT = 2.0  # every anchor starts out dynamic (p ~ 0.88)


class MLP:
    """Fully connected ReLU network; the last layer has no activation."""

    def __init__(self, widths: list[int], rng: np.random.Generator, final_gain: float = 1.0):
        self.widths = list(widths)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            bound = 1.0 / np.sqrt(n_in)
            gain = final_gain if i == len(widths) - 2 else 1.0
            self.weights.append(rng.uniform(-bound, bound, (n_in, n_out)) * gain)
            self.biases.append(rng.uniform(-bound, bound, n_out) * gain)

    @property
    def n_in(self) -> int:
        return self.widths[0]

    @property
    def n_out(self) -> int:
        return self.widths[-1]

    def params(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.{i}.weight"] = w
            out[f"{prefix}.{i}.bias"] = b
        return out

    def __call__(self, x: Value) -> Value:
        g = x.graph
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = ad.matmul(x, g.param(w)) + g.param(b)
            if i < last:
                x = ad.relu(x)
        return x

    def zero_(self) -> "MLP":
        for a in self.weights + self.biases:
            a[...] = 0.0
        return self


class HeadBank:
    """All decoders of one scene.

    Widths: opacity ``d -> 64 -> K``; color ``d(+3) -> 64 -> 3K``; scale and
    quaternion deltas ``d + 2*TIME_FREQS -> 64 -> 3K / 4K``; time mask
    ``d -> 32 -> 1``; anchor deformation ``72 -> 128 -> 128 -> 128 -> 3``.
    """

    NAMES = ("opacity_head", "color_head", "scale_head", "quat_head", "mask_head", "deform_net")

    def __init__(self, feature_dim: int = 8, k: int = 10, seed: int = 0, view_dependent: bool = True,
                 hidden: int = 64, mask_hidden: int = 32, deform_hidden: int = 128):
        rng = np.random.default_rng(seed)
        d = feature_dim
        self.feature_dim = d
        self.k = k
        self.view_dependent = view_dependent
        t_width = 2 * TIME_FREQS
        x_width = 2 * POS_FREQS * 3 + t_width
        self.opacity_head = MLP([d, hidden, k], rng)
        self.color_head = MLP([d + (3 if view_dependent else 0), hidden, 3 * k], rng)
        # delta heads and the deformation net start at exactly zero motion
        self.scale_head = MLP([d + t_width, hidden, 3 * k], rng, final_gain=0.0)
        self.quat_head = MLP([d + t_width, hidden, 4 * k], rng, final_gain=0.0)
        self.mask_head = MLP([d, mask_hidden, 1], rng)
        self.mask_head.biases[-1][:] = MASK_INIT_LOGIT
        self.deform_net = MLP([x_width] + [deform_hidden] * 3 + [3], rng, final_gain=0.0)

    def mlps(self) -> dict[str, MLP]:
        return {name: getattr(self, name) for name in self.NAMES}

    def params(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, mlp in self.mlps().items():
            out.update(mlp.params(name))
        return out

    # graph-level decoders, batched over anchors

    def opacity(self, f: Value) -> Value:
        return ad.sigmoid(self.opacity_head(f))

    def color(self, f: Value, view_dirs: np.ndarray | None) -> Value:
        if self.view_dependent:
            f = ad.concat([f, np.asarray(view_dirs, dtype=np.float64)], axis=-1)
        out = ad.sigmoid(self.color_head(f))
        return out.reshape(out.shape[0], self.k, 3)

    def _with_time(self, f: Value, t: float) -> Value:
        enc = positional_encoding(np.array([t], dtype=np.float64), TIME_FREQS)
        return ad.concat([f, np.broadcast_to(enc, (f.shape[0], enc.size))], axis=-1)

    def scale_delta(self, f: Value, t: float) -> Value:
        out = self.scale_head(self._with_time(f, t))
        return out.reshape(out.shape[0], self.k, 3)

    def quat_delta(self, f: Value, t: float) -> Value:
        out = self.quat_head(self._with_time(f, t))
        return out.reshape(out.shape[0], self.k, 4)

    def mask_prob(self, f: Value) -> Value:
        return ad.sigmoid(self.mask_head(f))[:, 0]

    def deform(self, g: Graph, positions: np.ndarray, t: float) -> Value:
        """Anchor displacement at ``t`` relative to the canonical time 0.

        Subtracting F at t = 0 keeps a constant drift, which the offsets can
        represent on their own, out of the motion field.
        """
        n = len(positions)
        both = np.concatenate([deform_input(positions, t), deform_input(positions, 0.0)])
        out = self.deform_net(g.const(both))
        return out[:n] - out[n:]


def deform_input(positions: np.ndarray, t: float) -> np.ndarray:
    """Encoded (position, time) rows fed to the anchor deformation net."""
    positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    n = len(positions)
    px = positional_encoding(positions, POS_FREQS)
    pt = positional_encoding(np.full((n, 1), float(t)), TIME_FREQS)
    return np.concatenate([px, pt], axis=1)


# ----------------------------------------------------------------------------
# single-anchor convenience wrappers (inference only)


def _as_batch(f_a) -> tuple[Graph, Value, bool]:
    arr = np.asarray(f_a, dtype=np.float64)
    single = arr.ndim == 1
    g = Graph(grad_enabled=False)
    return g, g.const(np.atleast_2d(arr)), single


def decode_opacity(heads: HeadBank, f_a) -> np.ndarray:
    _, f, single = _as_batch(f_a)
    out = heads.opacity(f).data
    return out[0] if single else out


def decode_color(heads: HeadBank, f_a, view_dir) -> np.ndarray:
    view_dir = np.asarray(view_dir, dtype=np.float64)
    norms = np.linalg.norm(np.atleast_2d(view_dir), axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError("view_dir must be a unit vector")
    _, f, single = _as_batch(f_a)
    out = heads.color(f, np.broadcast_to(np.atleast_2d(view_dir), (f.shape[0], 3))).data
    return out[0] if single else out


def decode_scale_delta(heads: HeadBank, f_a, t: float) -> np.ndarray:
    if not np.isfinite(t):
        raise ValueError("t must be finite")
    _, f, single = _as_batch(f_a)
    out = heads.scale_delta(f, t).data
    return out[0] if single else out


def decode_quat_delta(heads: HeadBank, f_a, t: float) -> np.ndarray:
    if not np.isfinite(t):
        raise ValueError("t must be finite")
    _, f, single = _as_batch(f_a)
    out = heads.quat_delta(f, t).data
    return out[0] if single else out


def predict_time_mask(heads: HeadBank, f_a) -> np.ndarray | float:
    _, f, single = _as_batch(f_a)
    out = heads.mask_prob(f).data
    return float(out[0]) if single else out


def deform_anchor(heads: HeadBank, x_a, t: float) -> np.ndarray:
    x = np.asarray(x_a, dtype=np.float64)
    g = Graph(grad_enabled=False)
    out = heads.deform(g, np.atleast_2d(x), t).data
    return out[0] if x.ndim == 1 else out
