"""On-disk formats: images, checkpoints, run configs and scene directories.

Checkpoint layout (little endian)::

    b"EDGS" | u32 version | u32 header length | header (UTF-8 JSON) | array bytes

The header holds the scalar metadata and a manifest of ``{name, dtype, shape}``
entries; array payloads follow back to back in manifest order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .deformation import DeformStrategy
from .heads import HeadBank
from .rasterizer import CameraFrame
from .scene import LEARNABLE, AnchorSet, read_point_cloud, write_point_cloud
from .synthetic import Blob, SceneSpec, SyntheticScene, generate, preset, random_spec
from .trainer import TrainConfig

MAGIC = b"EDGS"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------------------
# images


def quantize(img: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8: scale by 255, round half to even."""
    return np.rint(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {img.shape}")
    h, w, _ = img.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + quantize(img).tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"not a binary PPM (magic {tokens[0]!r})")
    w, h, maxval = (int(x) for x in tokens[1:])
    if maxval != 255:
        raise ValueError(f"only 8-bit PPM is supported, got maxval {maxval}")
    pixels = data[pos + 1:pos + 1 + w * h * 3]
    if len(pixels) != w * h * 3:
        raise ValueError(f"PPM payload has {len(pixels)} bytes, expected {w * h * 3}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def _format(path: Path, fmt: str | None) -> str:
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt not in ("ppm", "png"):
        raise ValueError(f"unsupported image format {fmt!r} (use ppm or png)")
    return fmt


def write_image(path, img: np.ndarray, fmt: str | None = None) -> None:
    path = Path(path)
    if _format(path, fmt) == "ppm":
        path.write_bytes(encode_ppm(img))
    else:
        import matplotlib.image as mpimg

        mpimg.imsave(path, quantize(img), format="png")


def read_image(path, fmt: str | None = None) -> np.ndarray:
    path = Path(path)
    if _format(path, fmt) == "ppm":
        return decode_ppm(path.read_bytes())
    import matplotlib.image as mpimg

    img = mpimg.imread(path, format="png")
    if img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    return np.asarray(img[..., :3], dtype=np.float64)


# ----------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    scene: AnchorSet
    heads: HeadBank
    config: TrainConfig = field(default_factory=TrainConfig)
    strategy: DeformStrategy = field(default_factory=DeformStrategy)
    iteration: int = 0
    rng_state: dict | None = None

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"scene.positions": self.scene.positions, "scene.levels": self.scene.levels}
        out.update({f"scene.{k}": v for k, v in self.scene.learnable().items()})
        out.update({f"heads.{k}": v for k, v in self.heads.params().items()})
        return out


def _heads_meta(heads: HeadBank) -> dict:
    return {
        "feature_dim": heads.feature_dim,
        "k": heads.k,
        "view_dependent": heads.view_dependent,
        "hidden": heads.opacity_head.widths[1],
        "mask_hidden": heads.mask_head.widths[1],
        "deform_hidden": heads.deform_net.widths[1],
    }


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    arrays = ckpt.arrays()
    manifest = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        manifest.append({"name": name, "dtype": arr.dtype.newbyteorder("<").str, "shape": list(arr.shape)})
    header = {
        "voxel_size": ckpt.scene.voxel_size,
        "heads": _heads_meta(ckpt.heads),
        "config": asdict(ckpt.config),
        "strategy": asdict(ckpt.strategy),
        "iteration": int(ckpt.iteration),
        "rng_state": ckpt.rng_state,
        "arrays": manifest,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for entry, arr in zip(manifest, arrays.values()):
            fh.write(np.ascontiguousarray(arr, dtype=entry["dtype"]).tobytes())


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an EDGS checkpoint (bad magic)")
    if len(data) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} is not supported (reader is version {VERSION})")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None

    arrays: dict[str, np.ndarray] = {}
    pos = 12 + hlen
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        chunk = data[pos:pos + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(f"{path}: truncated while reading array {entry['name']!r} "
                                  f"({len(chunk)} of {nbytes} bytes)")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype=dtype).reshape(shape).copy()
        pos += nbytes
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes after the last array")

    try:
        scene = AnchorSet(
            positions=arrays["scene.positions"],
            levels=arrays["scene.levels"],
            voxel_size=float(header["voxel_size"]),
            **{k: arrays[f"scene.{k}"] for k in LEARNABLE},
        )
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing array {exc.args[0]!r}") from None
    heads = HeadBank(**header["heads"])
    for name, arr in heads.params().items():
        key = f"heads.{name}"
        if key not in arrays:
            raise CheckpointError(f"{path}: missing array {key!r}")
        if arrays[key].shape != arr.shape:
            raise CheckpointError(f"{path}: array {key!r} has shape {arrays[key].shape}, expected {arr.shape}")
        arr[...] = arrays[key]
    return Checkpoint(
        scene=scene,
        heads=heads,
        config=TrainConfig(**header["config"]),
        strategy=DeformStrategy(**header["strategy"]),
        iteration=int(header["iteration"]),
        rng_state=header["rng_state"],
    )


# ----------------------------------------------------------------------------
# run configs


@dataclass
class SceneOptions:
    preset: str = "blobs-v1"  # named preset; "none" builds a random scene from the keys below
    static_blobs: int = 6
    dynamic_blobs: int = 2
    motions: str = "linear,oscillating"
    n_timesteps: int = 20
    n_cameras: int = 2
    width: int = 64
    height: int = 64
    scene_seed: int = 42

    def spec(self) -> SceneSpec:
        if self.preset != "none":
            return preset(self.preset)
        return random_spec(self.static_blobs, self.dynamic_blobs, tuple(self.motions.split(",")),
                           seed=self.scene_seed, n_timesteps=self.n_timesteps, n_cameras=self.n_cameras,
                           width=self.width, height=self.height)


# key -> one-line description; every key also has a default in its dataclass
RUN_KEYS_DOC = {
    "preset": "scene preset name, or 'none' for a random scene",
    "static_blobs": "static blob count (preset none)",
    "dynamic_blobs": "dynamic blob count (preset none)",
    "motions": "comma-separated motion kinds for dynamic blobs",
    "n_timesteps": "timesteps per camera",
    "n_cameras": "camera count",
    "width": "image width in pixels",
    "height": "image height in pixels",
    "scene_seed": "scene generator seed",
    "deform": "motion propagation rule: rbf, rigid, knn or cosine",
    "sigma": "RBF bandwidth",
    "knn_k": "neighbour count of the knn rule",
    "iterations": "optimizer steps",
    "lam": "SSIM weight",
    "lam_t": "time-mask regularizer weight",
    "mask_warmup": "steps before the mask regularizer is switched on",
    "mask_gate": "training gate: sampled, hard or soft",
    "densify_interval": "steps between densify/prune events",
    "densify_grad_threshold": "densification threshold on the mean screen-space gradient",
    "densify_subvoxels": "sub-voxels per densified anchor (4 or 8)",
    "prune_opacity_threshold": "anchors whose mean offset opacity is lower are removed",
    "densify_start": "first step of the densify window",
    "densify_stop": "last step of the densify window",
    "max_level": "maximum subdivision depth of densified anchors",
    "lr_features": "learning rate of anchor and offset features",
    "lr_offsets": "learning rate of offset positions",
    "lr_scaling": "learning rate of scales, quaternions and position scale",
    "lr_heads": "initial learning rate of the decoder heads",
    "lr_heads_final_ratio": "final / initial head learning rate",
    "lr_deform": "learning rate of the deformation net",
    "seed": "trainer seed (shuffle and gate sampling)",
    "use_mask": "enable the time mask",
    "raster_mode": "tiled or naive",
}


@dataclass
class RunConfig:
    scene: SceneOptions = field(default_factory=SceneOptions)
    strategy: DeformStrategy = field(default_factory=DeformStrategy)
    train: TrainConfig = field(default_factory=TrainConfig)

    _STRATEGY_KEYS = {"deform": "kind", "sigma": "sigma", "knn_k": "knn_k"}

    def as_dict(self) -> dict:
        out = asdict(self.scene)
        out.update({key: getattr(self.strategy, attr) for key, attr in self._STRATEGY_KEYS.items()})
        out.update(asdict(self.train))
        return out

    def updated(self, values: dict) -> "RunConfig":
        """A copy with ``values`` applied; unknown keys raise ConfigError."""
        current = self.as_dict()
        unknown = sorted(set(values) - set(current))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        merged = {**current, **{k: _coerce(k, v, current[k]) for k, v in values.items()}}
        scene_keys = {f.name for f in fields(SceneOptions)}
        train_keys = {f.name for f in fields(TrainConfig)}
        try:
            return RunConfig(
                scene=SceneOptions(**{k: merged[k] for k in scene_keys}),
                strategy=DeformStrategy(**{attr: merged[key] for key, attr in self._STRATEGY_KEYS.items()}),
                train=TrainConfig(**{k: merged[k] for k in train_keys}),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def to_text(self) -> str:
        lines = []
        for key, val in self.as_dict().items():
            lines.append(f"# {RUN_KEYS_DOC[key]}")
            lines.append(f"{key}={_render(val)}")
        return "\n".join(lines) + "\n"


def _render(val) -> str:
    if isinstance(val, bool):
        return "true" if val else "false"
    return str(val)


def _coerce(key: str, raw, default):
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "1", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip()


def parse_key_values(text: str, source: str = "<config>") -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = val
    return out


def load_run_config(path) -> RunConfig:
    return RunConfig().updated(parse_key_values(Path(path).read_text(), str(path)))


# ----------------------------------------------------------------------------
# scene directories


def _blob_line(b: Blob) -> str:
    nums = [*b.center, b.radius, *b.color, b.amplitude, *b.direction, b.pulse]
    return " ".join([b.motion] + [repr(float(x)) for x in nums])


def _parse_blob(text: str) -> Blob:
    parts = text.split()
    if len(parts) != 13:
        raise ValueError(f"blob line needs 13 fields, got {len(parts)}")
    v = [float(x) for x in parts[1:]]
    return Blob(center=v[0:3], radius=v[3], color=v[4:7], motion=parts[0], amplitude=v[7],
                direction=v[8:11], pulse=v[11])


_SPEC_SCALARS = ("n_timesteps", "n_cameras", "width", "height", "seed", "camera_distance",
                 "camera_spread_deg", "focal", "points_per_blob")


def spec_to_text(spec: SceneSpec) -> str:
    lines = [f"{k}={getattr(spec, k)!r}" for k in _SPEC_SCALARS]
    lines.append("# blob.i = motion cx cy cz radius r g b amplitude dx dy dz pulse")
    lines += [f"blob.{i}={_blob_line(b)}" for i, b in enumerate(spec.blobs)]
    return "\n".join(lines) + "\n"


def spec_from_text(text: str, source: str = "spec.txt") -> SceneSpec:
    kv = parse_key_values(text, source)
    blobs = []
    i = 0
    while f"blob.{i}" in kv:
        blobs.append(_parse_blob(kv.pop(f"blob.{i}")))
        i += 1
    unknown = sorted(set(kv) - set(_SPEC_SCALARS))
    if unknown:
        raise ConfigError(f"{source}: unknown key(s): {', '.join(unknown)}")
    defaults = {f.name: f.default for f in fields(SceneSpec) if f.name in _SPEC_SCALARS}
    kw = {k: type(defaults[k])(float(v)) if isinstance(defaults[k], int) else type(defaults[k])(v)
          for k, v in kv.items()}
    return SceneSpec(blobs=blobs, **kw)


def write_scene(root, scene: SyntheticScene) -> None:
    """Write the directory layout read back by :func:`read_scene`."""
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    (root / "spec.txt").write_text(spec_to_text(scene.spec))
    write_point_cloud(root / "cloud.txt", scene.init_cloud)
    (root / "labels.txt").write_text("".join(f"{int(x)}\n" for x in scene.region_labels))
    cam_lines = ["# c t fx fy cx cy r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz"]
    for (c, ti), fr in zip(scene.frame_keys, scene.frames):
        write_image(root / "frames" / f"cam{c}_t{ti}.ppm", fr.ground_truth)
        nums = [fr.fx, fr.fy, fr.cx, fr.cy, *fr.rotation.reshape(-1), *fr.translation]
        cam_lines.append(" ".join([str(c), str(ti)] + [repr(float(x)) for x in nums]))
    (root / "cameras.txt").write_text("\n".join(cam_lines) + "\n")


@dataclass
class SceneDir:
    """A scene loaded from disk. ``t`` in cameras.txt is the timestep index."""

    spec: SceneSpec
    frames: list[CameraFrame]
    frame_keys: list[tuple[int, int]]
    cloud: object
    labels: np.ndarray

    def as_synthetic(self) -> SyntheticScene:
        return SyntheticScene(self.spec, self.frames, self.frame_keys, self.cloud, self.labels)


def read_scene(root) -> SceneDir:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"scene directory {root} does not exist")
    spec = spec_from_text((root / "spec.txt").read_text(), str(root / "spec.txt"))
    cloud = read_point_cloud(root / "cloud.txt")
    labels = np.array([int(x) for x in (root / "labels.txt").read_text().split()], dtype=np.int64)
    times = spec.times()
    frames, keys = [], []
    for lineno, raw in enumerate((root / "cameras.txt").read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 18:
            raise ValueError(f"cameras.txt:{lineno}: expected 18 fields, got {len(parts)}")
        c, ti = int(parts[0]), int(parts[1])
        fx, fy, cx, cy = (float(x) for x in parts[2:6])
        rot = np.array([float(x) for x in parts[6:15]]).reshape(3, 3)
        trans = np.array([float(x) for x in parts[15:18]])
        img = read_image(root / "frames" / f"cam{c}_t{ti}.ppm")
        h, w, _ = img.shape
        frames.append(CameraFrame(rot, trans, fx, fy, cx, cy, w, h, float(times[ti]), ground_truth=img))
        keys.append((c, ti))
    return SceneDir(spec, frames, keys, cloud, labels)


def generate_scene_dir(root, spec: SceneSpec) -> SyntheticScene:
    scene = generate(spec)
    write_scene(root, scene)
    return scene
