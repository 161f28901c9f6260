"""The object model: a growable cloud of 3D Gaussians and its lifecycle.

Each Gaussian carries a center (object frame), per-axis log scales, a unit
quaternion orienting its principal axes, an opacity logit, and an RGB
color.  Covariances are reconstructed as ``R(q) diag(exp(ls))² R(q)ᵀ``,
which stays symmetric PSD under unconstrained optimization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio import FrameObservation
from .geom import CameraIntrinsics, Pose, quat_multiply, quat_normalize, quats_to_matrices

INIT_VARIANCE = 0.001  # m², initial isotropic variance of seeded Gaussians
INIT_OPACITY = 0.5  # activated opacity of seeded Gaussians
PRUNE_OPACITY = 0.6  # activated-opacity floor below which Gaussians are removed
DENSIFY_DEPTH_FRACTION = 0.1  # residual threshold as a fraction of observed depth range


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


@dataclass
class GaussianCloud:
    """Struct-of-arrays storage for N Gaussians; all arrays share length N."""

    means: np.ndarray  # (N, 3) object frame, meters
    log_scales: np.ndarray  # (N, 3) log of per-axis std-dev
    rotations: np.ndarray  # (N, 4) unit quaternions (w, x, y, z)
    opacity_logits: np.ndarray  # (N,)
    colors: np.ndarray  # (N, 3) raw; clamped to [0, 1] at render time

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.log_scales = np.atleast_2d(np.asarray(self.log_scales, dtype=np.float64))
        self.rotations = np.atleast_2d(np.asarray(self.rotations, dtype=np.float64))
        self.opacity_logits = np.atleast_1d(np.asarray(self.opacity_logits, dtype=np.float64))
        self.colors = np.atleast_2d(np.asarray(self.colors, dtype=np.float64))
        n = self.count
        if not (
            self.means.shape == (n, 3)
            and self.log_scales.shape == (n, 3)
            and self.rotations.shape == (n, 4)
            and self.opacity_logits.shape == (n,)
            and self.colors.shape == (n, 3)
        ):
            raise ValueError("per-Gaussian arrays disagree in shape")

    @property
    def count(self) -> int:
        return self.means.shape[0] if self.means.size else 0

    @classmethod
    def empty(cls) -> "GaussianCloud":
        return cls(
            means=np.zeros((0, 3)),
            log_scales=np.zeros((0, 3)),
            rotations=np.zeros((0, 4)),
            opacity_logits=np.zeros(0),
            colors=np.zeros((0, 3)),
        )

    @property
    def opacities(self) -> np.ndarray:
        """Activated opacities, sigmoid of the stored logits."""
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def covariance_of(self, i: int) -> np.ndarray:
        """3×3 covariance ``R diag(s²) Rᵀ`` of Gaussian ``i``."""
        R = quats_to_matrices(self.rotations[i : i + 1] )[0]
        s2 = np.exp(2.0 * self.log_scales[i])
        return (R * s2) @ R.T

    def covariances(self) -> np.ndarray:
        R = quats_to_matrices(self.rotations)
        s2 = np.exp(2.0 * self.log_scales)
        return np.einsum("nij,nj,nkj->nik", R, s2, R)

    def extent(self) -> float:
        """Diagonal of the axis-aligned bounding box of the means."""
        if self.count == 0:
            return 0.0
        span = self.means.max(axis=0) - self.means.min(axis=0)
        return float(np.linalg.norm(span))

    def append(self, other: "GaussianCloud") -> None:
        self.means = np.concatenate([self.means, other.means])
        self.log_scales = np.concatenate([self.log_scales, other.log_scales])
        self.rotations = np.concatenate([self.rotations, other.rotations])
        self.opacity_logits = np.concatenate([self.opacity_logits, other.opacity_logits])
        self.colors = np.concatenate([self.colors, other.colors])

    def keep(self, mask: np.ndarray) -> None:
        self.means = self.means[mask]
        self.log_scales = self.log_scales[mask]
        self.rotations = self.rotations[mask]
        self.opacity_logits = self.opacity_logits[mask]
        self.colors = self.colors[mask]

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            means=self.means.copy(),
            log_scales=self.log_scales.copy(),
            rotations=self.rotations.copy(),
            opacity_logits=self.opacity_logits.copy(),
            colors=self.colors.copy(),
        )

    def transformed(self, pose: Pose) -> "GaussianCloud":
        """Cloud with means/rotations mapped by ``pose`` (rigid pre-transform)."""
        out = self.copy()
        out.means = pose.transform(self.means)
        out.rotations = np.stack(
            [quat_normalize(quat_multiply(pose.rotation, q)) for q in self.rotations]
        ) if self.count else self.rotations.copy()
        return out


@dataclass
class CloudGradients:
    """Accumulators for the loss gradient w.r.t. every cloud parameter."""

    means: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    @classmethod
    def zeros_for(cls, cloud: GaussianCloud) -> "CloudGradients":
        return cls(
            means=np.zeros_like(cloud.means),
            log_scales=np.zeros_like(cloud.log_scales),
            rotations=np.zeros_like(cloud.rotations),
            opacity_logits=np.zeros_like(cloud.opacity_logits),
            colors=np.zeros_like(cloud.colors),
        )


def _seed_cloud_from_pixels(
    frame: FrameObservation,
    intr: CameraIntrinsics,
    pose: Pose,
    pixel_mask: np.ndarray,
) -> GaussianCloud:
    """One Gaussian per selected pixel, deprojected and mapped to the object frame."""
    vs, us = np.nonzero(pixel_mask)
    if vs.size == 0:
        return GaussianCloud.empty()
    d = frame.depth[vs, us]
    cam_pts = np.stack(
        [(us - intr.cx) / intr.fx * d, (vs - intr.cy) / intr.fy * d, d], axis=1
    )
    obj_pts = pose.inverse().transform(cam_pts)
    n = obj_pts.shape[0]
    return GaussianCloud(
        means=obj_pts,
        log_scales=np.full((n, 3), 0.5 * np.log(INIT_VARIANCE)),
        rotations=np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1)),
        opacity_logits=np.full(n, logit(INIT_OPACITY)),
        colors=frame.color[vs, us].copy(),
    )


def _strided(mask: np.ndarray, stride: int) -> np.ndarray:
    out = np.zeros_like(mask)
    out[::stride, ::stride] = mask[::stride, ::stride]
    return out


def init_from_rgbd(
    frame: FrameObservation,
    intr: CameraIntrinsics,
    pose: Pose,
    stride: int = 4,
) -> GaussianCloud:
    """Seed a cloud from the first RGB-D frame.

    One Gaussian per masked valid-depth pixel sampled at ``stride``:
    mean at the deprojected point mapped into the object frame by the
    inverse pose, isotropic variance ``INIT_VARIANCE``, identity rotation,
    activated opacity ``INIT_OPACITY``, color from the image.  An empty
    mask yields an empty cloud.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    selected = _strided(frame.mask & (frame.depth > 0), stride)
    return _seed_cloud_from_pixels(frame, intr, pose, selected)


def densify(
    cloud: GaussianCloud,
    frame: FrameObservation,
    rendered_depth: np.ndarray,
    rendered_alpha: np.ndarray,
    pose: Pose,
    intr: CameraIntrinsics,
    stride: int = 4,
    alpha_floor: float = 0.5,
) -> int:
    """Add Gaussians where the rendered model fails to explain the frame.

    A strided masked valid-depth pixel triggers an addition when the
    rendered depth misses the observation by more than
    ``DENSIFY_DEPTH_FRACTION`` of the observed depth range (strict
    inequality, extrema over the masked valid depth) or when the rendered
    alpha is below ``alpha_floor`` (region not covered by the model at
    all, where rendered depth is meaningless).  Returns the number added.
    """
    if rendered_depth.shape != frame.depth.shape or rendered_alpha.shape != frame.depth.shape:
        raise ValueError("rendered images must match the frame resolution")
    valid = frame.mask & (frame.depth > 0)
    if not valid.any():
        return 0
    d = frame.depth[valid]
    threshold = DENSIFY_DEPTH_FRACTION * (d.max() - d.min())
    residual = np.abs(rendered_depth - frame.depth)
    trigger = valid & (
        (rendered_alpha < alpha_floor)
        | ((rendered_alpha >= alpha_floor) & (residual > threshold))
    )
    added = _seed_cloud_from_pixels(frame, intr, pose, _strided(trigger, stride))
    cloud.append(added)
    return added.count


def prune(cloud: GaussianCloud) -> int:
    """Remove Gaussians whose activated opacity fell below ``PRUNE_OPACITY``."""
    keep = cloud.opacities >= PRUNE_OPACITY
    removed = int((~keep).sum())
    if removed:
        cloud.keep(keep)
    return removed


_PLY_PROPS = [
    "x", "y", "z",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
    "opacity",
    "red", "green", "blue",
]


def save_ply(cloud: GaussianCloud, path) -> None:
    """Write the cloud as ASCII PLY (scales log, rotation wxyz, opacity logit)."""
    rows = np.concatenate(
        [
            cloud.means,
            cloud.log_scales,
            cloud.rotations,
            cloud.opacity_logits[:, None],
            cloud.colors,
        ],
        axis=1,
    ) if cloud.count else np.zeros((0, len(_PLY_PROPS)))
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {cloud.count}\n")
        for name in _PLY_PROPS:
            fh.write(f"property float {name}\n")
        fh.write("end_header\n")
        for row in rows:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_ply(path) -> GaussianCloud:
    with open(path) as fh:
        line = fh.readline().strip()
        if line != "ply":
            raise ValueError(f"{path}: not a PLY file")
        count = None
        props = []
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: truncated header")
            line = line.strip()
            if line.startswith("element vertex"):
                count = int(line.split()[-1])
            elif line.startswith("property"):
                props.append(line.split()[-1])
            elif line == "end_header":
                break
        if props != _PLY_PROPS:
            raise ValueError(f"{path}: unexpected property list {props}")
        data = np.loadtxt(fh, ndmin=2, dtype=np.float64)
    if count == 0:
        return GaussianCloud.empty()
    if data.shape != (count, len(_PLY_PROPS)):
        raise ValueError(f"{path}: expected {count} vertices, found {data.shape}")
    return GaussianCloud(
        means=data[:, 0:3],
        log_scales=data[:, 3:6],
        rotations=data[:, 6:10],
        opacity_logits=data[:, 10],
        colors=data[:, 11:14],
    )
