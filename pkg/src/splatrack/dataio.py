"""Sequence persistence, sensor-noise injection, and frame containers.

On-disk layout of a sequence directory (see FORMATS.md for field docs):

    meta.json                  intrinsics, frame count, depth scale, noise spec
    poses.json                 per-frame ground-truth object-to-camera pose
    frames/%06d.color.png      8-bit RGB
    frames/%06d.depth.png      16-bit single channel, value * scale_mm = depth
    frames/%06d.mask.png       8-bit, 0 or 255
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image
from scipy.ndimage import minimum_filter

from .geom import CameraIntrinsics, Pose


@dataclass
class FrameObservation:
    """One RGB-D time step: color/depth/mask images plus optional ground truth.

    color: (H, W, 3) float in [0, 1]; depth: (H, W) meters with 0 marking
    invalid pixels; mask: (H, W) bool object segmentation.
    """

    color: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    gt_pose: Optional[Pose] = None
    index: int = 0

    def __post_init__(self):
        self.color = np.asarray(self.color, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        h, w = self.depth.shape
        if self.color.shape != (h, w, 3) or self.mask.shape != (h, w):
            raise ValueError("color/depth/mask shapes disagree")
        if (self.depth < 0).any():
            raise ValueError("depth must be non-negative (0 = invalid)")


@dataclass
class NoiseSpec:
    """Additive sensor noise emulating a real RGB-D camera."""

    color_std: float = 0.2  # intensity units on the [0, 1] scale
    depth_std: float = 0.025  # meters
    bleed_px: int = 2  # widening of near surfaces across depth edges
    seed: int = 0


@dataclass
class SequenceMeta:
    intrinsics: CameraIntrinsics
    frame_count: int
    depth_scale_mm: float = 1.0  # millimeters per stored 16-bit unit
    noise: Optional[NoiseSpec] = None

    def __post_init__(self):
        if self.frame_count < 1:
            raise ValueError("frame_count must be >= 1")


class SequenceError(RuntimeError):
    """Raised when a sequence directory is malformed; message names the file."""


def _write_png(path: Path, array: np.ndarray) -> None:
    Image.fromarray(array).save(path)


def save_frame(seq_dir: Path, frame: FrameObservation, depth_scale_mm: float = 1.0) -> None:
    frames_dir = Path(seq_dir) / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{frame.index:06d}"
    color8 = np.clip(np.round(frame.color * 255.0), 0, 255).astype(np.uint8)
    depth16 = np.clip(
        np.round(frame.depth * 1000.0 / depth_scale_mm), 0, 65535
    ).astype(np.uint16)
    mask8 = np.where(frame.mask, 255, 0).astype(np.uint8)
    _write_png(frames_dir / f"{stem}.color.png", color8)
    _write_png(frames_dir / f"{stem}.depth.png", depth16)
    _write_png(frames_dir / f"{stem}.mask.png", mask8)


def save_sequence(
    seq_dir: Path | str,
    meta: SequenceMeta,
    frames: list[FrameObservation],
) -> None:
    seq_dir = Path(seq_dir)
    seq_dir.mkdir(parents=True, exist_ok=True)
    meta_dict = {
        "intrinsics": asdict(meta.intrinsics),
        "frame_count": meta.frame_count,
        "depth_scale_mm": meta.depth_scale_mm,
        "noise": asdict(meta.noise) if meta.noise is not None else None,
    }
    (seq_dir / "meta.json").write_text(json.dumps(meta_dict, indent=2, sort_keys=True))
    poses = []
    for f in frames:
        save_frame(seq_dir, f, meta.depth_scale_mm)
        if f.gt_pose is not None:
            poses.append(
                {
                    "frame": f.index,
                    "t": [float(v) for v in f.gt_pose.translation],
                    "q": [float(v) for v in f.gt_pose.rotation],
                }
            )
    (seq_dir / "poses.json").write_text(json.dumps(poses, indent=2))


def _load_meta(seq_dir: Path) -> SequenceMeta:
    meta_path = seq_dir / "meta.json"
    if not meta_path.exists():
        raise SequenceError(f"missing {meta_path}")
    try:
        raw = json.loads(meta_path.read_text())
        intr = CameraIntrinsics(**raw["intrinsics"])
        noise = NoiseSpec(**raw["noise"]) if raw.get("noise") else None
        return SequenceMeta(
            intrinsics=intr,
            frame_count=int(raw["frame_count"]),
            depth_scale_mm=float(raw.get("depth_scale_mm", 1.0)),
            noise=noise,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SequenceError(f"malformed {meta_path}: {exc}") from exc


def _load_poses(seq_dir: Path) -> dict[int, Pose]:
    poses_path = seq_dir / "poses.json"
    if not poses_path.exists():
        return {}
    out = {}
    for entry in json.loads(poses_path.read_text()):
        out[int(entry["frame"])] = Pose(
            np.asarray(entry["q"], dtype=np.float64),
            np.asarray(entry["t"], dtype=np.float64),
        )
    return out


def load_frame(
    seq_dir: Path, index: int, meta: SequenceMeta, gt_pose: Optional[Pose]
) -> FrameObservation:
    frames_dir = Path(seq_dir) / "frames"
    stem = f"{index:06d}"
    color_path = frames_dir / f"{stem}.color.png"
    depth_path = frames_dir / f"{stem}.depth.png"
    mask_path = frames_dir / f"{stem}.mask.png"
    for p in (color_path, depth_path):
        if not p.exists():
            raise SequenceError(f"missing {p}")
    color = np.asarray(Image.open(color_path), dtype=np.float64) / 255.0
    depth = (
        np.asarray(Image.open(depth_path), dtype=np.float64)
        * meta.depth_scale_mm
        / 1000.0
    )
    if color.ndim != 3 or color.shape[2] != 3:
        raise SequenceError(f"{color_path} is not an RGB image")
    if depth.shape != color.shape[:2]:
        raise SequenceError(f"{depth_path} shape {depth.shape} != color {color.shape[:2]}")
    if mask_path.exists():
        mask = np.asarray(Image.open(mask_path)) > 127
        if mask.shape != depth.shape:
            raise SequenceError(f"{mask_path} shape {mask.shape} != depth {depth.shape}")
    else:
        warnings.warn(f"{mask_path} missing; using full-frame mask")
        mask = np.ones_like(depth, dtype=bool)
    if (meta.intrinsics.height, meta.intrinsics.width) != depth.shape:
        raise SequenceError(
            f"{depth_path} shape {depth.shape} != intrinsics "
            f"{(meta.intrinsics.height, meta.intrinsics.width)}"
        )
    return FrameObservation(color=color, depth=depth, mask=mask, gt_pose=gt_pose, index=index)


def load_sequence(seq_dir: Path | str) -> tuple[SequenceMeta, Iterator[FrameObservation]]:
    """Open a sequence directory; frames are streamed lazily in index order."""
    seq_dir = Path(seq_dir)
    meta = _load_meta(seq_dir)
    gt = _load_poses(seq_dir)

    def frames() -> Iterator[FrameObservation]:
        for i in range(meta.frame_count):
            yield load_frame(seq_dir, i, meta, gt.get(i))

    return meta, frames()


def add_noise(
    frame: FrameObservation,
    seed: int,
    color_std: float = 0.2,
    depth_std: float = 0.025,
    bleed_px: int = 2,
) -> FrameObservation:
    """Return a noisy copy of the frame; pixels outside the mask are untouched.

    Edge bleeding is applied to the clean depth first (a pixel within
    ``bleed_px`` of a discontinuity adopts the nearer depth when the gap
    exceeds ``10 * depth_std``), then zero-mean Gaussian noise is added to
    color (clamped to [0, 1]) and to valid depth inside the mask.  The
    random stream is a pure function of ``(seed, frame.index)``.
    """
    if color_std < 0 or depth_std < 0:
        raise ValueError("noise standard deviations must be >= 0")
    rng = np.random.default_rng(np.random.SeedSequence([seed, frame.index]))
    color = frame.color.copy()
    depth = frame.depth.copy()
    editable = frame.mask & (depth > 0)

    if bleed_px > 0:
        padded = np.where(editable, depth, np.inf)
        near = minimum_filter(padded, size=2 * bleed_px + 1, mode="constant", cval=np.inf)
        bleed = editable & np.isfinite(near) & (depth - near > 10.0 * depth_std)
        depth[bleed] = near[bleed]

    if color_std > 0:
        noise = rng.normal(0.0, color_std, size=color.shape)
        noisy = np.clip(color + noise, 0.0, 1.0)
        color[frame.mask] = noisy[frame.mask]
    if depth_std > 0:
        dnoise = rng.normal(0.0, depth_std, size=depth.shape)
        depth[editable] = np.maximum(depth[editable] + dnoise[editable], 1e-3)

    return FrameObservation(
        color=color, depth=depth, mask=frame.mask.copy(), gt_pose=frame.gt_pose, index=frame.index
    )
