"""Incremental object reconstruction and 6-DoF tracking from RGB-D streams.

The object is modelled as a cloud of 3D Gaussians rendered by a
differentiable CPU splatting rasterizer; reconstruction and pose tracking
are first-order optimization problems over the rendered-vs-observed
photometric and depth losses.
"""

from .geom import CameraIntrinsics, Pose
from .cloud import GaussianCloud
from .raster import RenderConfig, render, render_reference
from .dataio import FrameObservation

__all__ = [
    "CameraIntrinsics",
    "Pose",
    "GaussianCloud",
    "RenderConfig",
    "render",
    "render_reference",
    "FrameObservation",
]

__version__ = "0.1.0"
