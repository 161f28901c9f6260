"""Finite-difference validation of the analytic gradients.

The rendered losses are piecewise smooth: footprint/alpha-min gates,
the alpha-max clamp, blending termination, the depth-gate mask, and L1
kinks all introduce measure-zero discontinuities that the analytic
backward pass deliberately treats as locally constant.  Central
differences straddling such a boundary measure the jump, not the slope,
so each parameter uses a step ladder: the step shrinks until two
consecutive FD estimates agree, which certifies a locally smooth
interval.  Comparisons are reported as

    err_j = |analytic_j - fd_j| / max(|analytic_j|, |fd_j|, floor)

with a floor proportional to the largest FD component, so identically
zero gradients compare cleanly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .cloud import GaussianCloud
from .geom import CameraIntrinsics, Pose, random_rotation
from .dataio import FrameObservation
from .loss import LossWeights, recon_loss, track_loss
from .raster import RenderConfig, render, render_backward, render_reference

FD_LADDER = (1e-5, 1e-6, 1e-7)
FD_AGREEMENT = 5e-4


@dataclass
class GradCheckReport:
    worst_rel_err: float
    worst_param: str
    n_params: int
    per_loss: dict[str, float]


def _pack(cloud: GaussianCloud, pose_vec: np.ndarray) -> np.ndarray:
    return np.concatenate(
        [
            cloud.means.ravel(),
            cloud.log_scales.ravel(),
            cloud.rotations.ravel(),
            cloud.opacity_logits.ravel(),
            cloud.colors.ravel(),
            pose_vec,
        ]
    )


def _unpack(x: np.ndarray, n: int) -> tuple[GaussianCloud, np.ndarray]:
    o = 0
    means = x[o : o + 3 * n].reshape(n, 3); o += 3 * n
    log_scales = x[o : o + 3 * n].reshape(n, 3); o += 3 * n
    rotations = x[o : o + 4 * n].reshape(n, 4); o += 4 * n
    logits = x[o : o + n]; o += n
    colors = x[o : o + 3 * n].reshape(n, 3); o += 3 * n
    cloud = GaussianCloud(
        means=means.copy(),
        log_scales=log_scales.copy(),
        rotations=rotations.copy(),
        opacity_logits=logits.copy(),
        colors=colors.copy(),
    )
    return cloud, x[o : o + 7].copy()


def param_names(n: int) -> list[str]:
    names = []
    for group, per in (("mean", 3), ("log_scale", 3), ("rotation", 4), ("opacity", 1), ("color", 3)):
        for i in range(n):
            for k in range(per):
                names.append(f"{group}[{i}][{k}]")
    names += [f"pose_t[{k}]" for k in range(3)] + [f"pose_q[{k}]" for k in range(4)]
    return names


def make_random_scene(
    seed: int, n_gaussians: int = 8, size: int = 32
) -> tuple[GaussianCloud, np.ndarray, FrameObservation, CameraIntrinsics, RenderConfig]:
    """Random cloud + pose with an observation rendered from a jittered copy.

    The observation is produced by the reference renderer so the losses
    have structured color and valid-depth support.
    """
    rng = np.random.default_rng(seed)
    intr = CameraIntrinsics(
        fx=1.25 * size, fy=1.25 * size, cx=size / 2, cy=size / 2, width=size, height=size
    )
    cfg = RenderConfig(n_chunks=1)
    cloud = GaussianCloud(
        means=rng.uniform(-0.4, 0.4, size=(n_gaussians, 3)),
        log_scales=rng.uniform(np.log(0.04), np.log(0.16), size=(n_gaussians, 3)),
        rotations=np.stack([random_rotation(rng) for _ in range(n_gaussians)]),
        opacity_logits=rng.uniform(-1.0, 2.0, size=n_gaussians),
        colors=rng.uniform(0.1, 0.9, size=(n_gaussians, 3)),
    )
    pose_vec = np.concatenate([[0.05, -0.05, 2.5], random_rotation(rng)])

    target = cloud.copy()
    target.means = target.means + rng.normal(0.0, 0.05, size=(n_gaussians, 3))
    target.colors = np.clip(target.colors + rng.normal(0.0, 0.05, size=(n_gaussians, 3)), 0.05, 0.95)
    d_pose = np.concatenate(
        [rng.normal(0.0, 0.03, size=3), rng.normal(0.0, 0.02, size=4)]
    )
    target_vec = pose_vec + d_pose
    out = render_reference(target, Pose.from_vector(target_vec), intr, cfg)
    mask = out.alpha > 0.5
    obs = FrameObservation(
        color=np.clip(out.color, 0.0, 1.0),
        depth=np.where(mask, out.depth, 0.0),
        mask=mask,
        index=0,
    )
    return cloud, pose_vec, obs, intr, cfg


def _loss_fn(kind: str) -> Callable:
    return {"recon": recon_loss, "track": track_loss}[kind]


def analytic_gradient(
    cloud, pose_vec, obs, intr, cfg, weights: LossWeights, kind: str
) -> tuple[float, np.ndarray]:
    pose = Pose.from_vector(pose_vec)
    out = render(cloud, pose, intr, cfg)
    report, d_color, d_depth = _loss_fn(kind)(out, obs, weights)
    grads, pose_grad = render_backward(out, d_color, d_depth, cloud, pose, intr, cfg)
    flat = _pack(
        GaussianCloud(
            means=grads.means,
            log_scales=grads.log_scales,
            rotations=grads.rotations,
            opacity_logits=grads.opacity_logits,
            colors=grads.colors,
        ),
        pose_grad,
    )
    return report.total, flat


def fd_gradient(
    cloud, pose_vec, obs, intr, cfg, weights: LossWeights, kind: str
) -> np.ndarray:
    """Central differences with a shrinking step ladder per parameter."""
    loss = _loss_fn(kind)
    n = cloud.count
    x0 = _pack(cloud, np.asarray(pose_vec, dtype=np.float64))

    def value(x: np.ndarray) -> float:
        c, pv = _unpack(x, n)
        out = render(c, Pose.from_vector(pv), intr, cfg)
        return loss(out, obs, weights)[0].total

    grad = np.zeros_like(x0)
    for j in range(x0.size):
        scale = max(1.0, abs(x0[j]))
        prev = None
        for h0 in FD_LADDER:
            h = h0 * scale
            xp = x0.copy(); xp[j] += h
            xm = x0.copy(); xm[j] -= h
            fd = (value(xp) - value(xm)) / (2.0 * h)
            if prev is not None and abs(fd - prev) <= FD_AGREEMENT * max(abs(fd), abs(prev)) + 1e-10:
                break
            prev = fd
        grad[j] = fd
    return grad


def compare_gradients(analytic: np.ndarray, fd: np.ndarray) -> tuple[float, int]:
    floor = max(1e-6 * float(np.max(np.abs(fd))), 1e-9)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), floor)
    rel = np.abs(analytic - fd) / denom
    j = int(np.argmax(rel))
    return float(rel[j]), j


def run_gradcheck(
    seeds: range | list[int],
    n_gaussians: int = 8,
    size: int = 32,
    weights: LossWeights = LossWeights(),
    corrupt: bool = False,
) -> GradCheckReport:
    """Compare analytic与 FD gradients over randomized scenes.

    ``corrupt`` is a negative-control hook that deliberately perturbs one
    analytic gradient component to prove the comparison can fail.
    """
    worst = 0.0
    worst_param = ""
    per_loss = {"recon": 0.0, "track": 0.0}
    names = None
    for seed in seeds:
        cloud, pose_vec, obs, intr, cfg = make_random_scene(seed, n_gaussians, size)
        if names is None:
            names = param_names(cloud.count)
        for kind in ("recon", "track"):
            _, ana = analytic_gradient(cloud, pose_vec, obs, intr, cfg, weights, kind)
            if corrupt:
                ana[0] += 1.0 + 2.0 * abs(ana[0])
            fd = fd_gradient(cloud, pose_vec, obs, intr, cfg, weights, kind)
            rel, j = compare_gradients(ana, fd)
            per_loss[kind] = max(per_loss[kind], rel)
            if rel > worst:
                worst = rel
                worst_param = f"seed {seed}/{kind}/{names[j]}"
    return GradCheckReport(
        worst_rel_err=worst,
        worst_param=worst_param,
        n_params=len(names) if names else 0,
        per_loss=per_loss,
    )
