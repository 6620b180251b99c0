"""Anchor-based dynamic Gaussian splatting on the CPU.

Sparse voxel anchors carry learned features; small MLP heads decode each
anchor's K Gaussians, a deformation net moves anchors over time, and a
learned time mask lets static anchors skip the time-dependent decoders.
"""

from .autodiff import Graph, Value, backward, finite_diff_check, positional_encoding
from .deformation import ComposedGaussians, DeformStrategy, compose_gaussians
from .heads import HeadBank
from .rasterizer import CameraFrame, rasterize, render
from .scene import AnchorSet, PointCloud, voxelize_points
from .synthetic import SceneSpec, SyntheticScene, generate, preset, psnr
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AnchorSet", "CameraFrame", "ComposedGaussians", "DeformStrategy", "Graph", "HeadBank", "PointCloud",
    "SceneSpec", "SyntheticScene", "TrainConfig", "Value", "backward", "compose_gaussians", "finite_diff_check",
    "generate", "positional_encoding", "preset", "psnr", "rasterize", "render", "train", "voxelize_points",
]
