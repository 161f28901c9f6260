"""Differentiable splatting of a Gaussian cloud to color/depth/alpha images.

Forward model per pixel (front-to-back over depth-sorted Gaussians):

    alpha_k = clamp(opacity_k * exp(-0.5 * d^T Sigma2d^{-1} d), alpha_max)
    color   = sum_k color_k * alpha_k * T_k + background * T_final
    depth   = sum_k z_k * alpha_k * T_k,      T_k = prod_{j<k} (1 - alpha_j)

with contributions skipped when alpha < alpha_min or the pixel lies
outside the 3-sigma footprint disc, and blending stopped once the
transmittance falls below the configured floor.  The backward pass is
fully analytic, differentiating the composite exactly as computed (gates,
clamps, termination, and the sort order held fixed).

``render`` is the tiled production path, ``render_reference`` a
brute-force per-pixel oracle with the identical contract used for
equivalence testing and ground-truth data generation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np

from . import _kernels
from .cloud import CloudGradients, GaussianCloud
from .geom import CameraIntrinsics, Pose, project_point, projection_jacobian

FOOTPRINT_SIGMA = 3.0  # truncation radius in units of the major std-dev


@dataclass(frozen=True)
class RenderConfig:
    """Rasterizer knobs; the defaults implement the standard numerical guards."""

    tile_size: int = 16
    alpha_min: float = 1.0 / 255.0
    alpha_max: float = 0.99
    transmittance_floor: float = 1e-4
    dilation: float = 0.3  # px², added to the 2D covariance diagonal
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    n_chunks: Optional[int] = None  # backward reduction chunks; None = numba threads

    def __post_init__(self):
        if not (0.0 < self.alpha_min < self.alpha_max <= 1.0):
            raise ValueError("require 0 < alpha_min < alpha_max <= 1")
        if not (0.0 < self.transmittance_floor < 1.0):
            raise ValueError("transmittance_floor must be in (0, 1)")
        if self.tile_size < 1 or self.dilation < 0:
            raise ValueError("invalid tile_size or dilation")


@dataclass
class _ProjectedCloud:
    """Per-Gaussian quantities saved by the forward pass for the backward pass.

    Arrays are compacted over the Gaussians that survive culling;
    ``g_idx`` maps compact rows back to cloud indices.
    """

    n_total: int
    g_idx: np.ndarray  # (M,) int64
    mu_obj: np.ndarray  # (M, 3)
    mu_c: np.ndarray  # (M, 3) camera frame
    u: np.ndarray  # (M, 2) projected centers, px
    j00: np.ndarray
    j02: np.ndarray
    j11: np.ndarray
    j12: np.ndarray
    V: np.ndarray  # (M, 3, 3) camera-frame 3D covariance
    sig_obj: np.ndarray  # (M, 3, 3) object-frame covariance
    Rq: np.ndarray  # (M, 3, 3) Gaussian orientation matrices
    s2: np.ndarray  # (M, 3) squared scales
    q_hat: np.ndarray  # (M, 4) normalized rotations
    q_norm: np.ndarray  # (M,)
    covA: np.ndarray  # 2D covariance entries incl. dilation
    covB: np.ndarray
    covC: np.ndarray
    prec_a: np.ndarray
    prec_b: np.ndarray
    prec_c: np.ndarray
    radius: np.ndarray  # (M,) footprint radius, px
    opac: np.ndarray  # (M,) activated opacity
    colr: np.ndarray  # (M, 3) clamped colors
    colors_raw: np.ndarray  # (M, 3)
    sorted_ids: np.ndarray  # (M,) compact ids by ascending z, index tie-break
    R_pose: np.ndarray  # (3, 3)
    q_pose_hat: np.ndarray  # (4,)
    q_pose_norm: float

    @property
    def count(self) -> int:
        return self.g_idx.shape[0]


@dataclass
class _SavedBlendState:
    pix_offsets: np.ndarray  # (H*W + 1,) int64
    contrib_idx: np.ndarray  # (K,) int32 compact Gaussian ids
    contrib_alpha: np.ndarray  # (K,) float64


@dataclass
class RenderOutput:
    """Rendered images plus the blending state needed by the backward pass."""

    color: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) meters, alpha-blended, 0 where nothing rendered
    alpha: np.ndarray  # (H, W) accumulated opacity in [0, 1]
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    proj: Optional[_ProjectedCloud] = None
    blend: Optional[_SavedBlendState] = None


def _quat_rotation_jacobians_batch(q: np.ndarray) -> np.ndarray:
    """(N, 4, 3, 3) stack of ∂R/∂q_k for the raw unit-quaternion formula."""
    n = q.shape[0]
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros(n)
    dR = np.empty((n, 4, 3, 3), dtype=np.float64)
    dR[:, 0] = 2.0 * np.stack(
        [zero, -z, y, z, zero, -x, -y, x, zero], axis=1
    ).reshape(n, 3, 3)
    dR[:, 1] = 2.0 * np.stack(
        [zero, y, z, y, -2 * x, -w, z, w, -2 * x], axis=1
    ).reshape(n, 3, 3)
    dR[:, 2] = 2.0 * np.stack(
        [-2 * y, x, w, x, zero, z, -w, z, -2 * y], axis=1
    ).reshape(n, 3, 3)
    dR[:, 3] = 2.0 * np.stack(
        [-2 * z, -w, x, w, -2 * z, y, x, y, zero], axis=1
    ).reshape(n, 3, 3)
    return dR


def _project_cloud(
    cloud: GaussianCloud, pose: Pose, intr: CameraIntrinsics, cfg: RenderConfig
) -> _ProjectedCloud:
    """Project every Gaussian to the image plane, culling behind-camera ones."""
    n = cloud.count
    q_pose = pose.rotation
    q_pose_norm = float(np.linalg.norm(q_pose))
    q_pose_hat = q_pose / q_pose_norm
    R_pose = np.array(
        [
            [
                1 - 2 * (q_pose_hat[2] ** 2 + q_pose_hat[3] ** 2),
                2 * (q_pose_hat[1] * q_pose_hat[2] - q_pose_hat[0] * q_pose_hat[3]),
                2 * (q_pose_hat[1] * q_pose_hat[3] + q_pose_hat[0] * q_pose_hat[2]),
            ],
            [
                2 * (q_pose_hat[1] * q_pose_hat[2] + q_pose_hat[0] * q_pose_hat[3]),
                1 - 2 * (q_pose_hat[1] ** 2 + q_pose_hat[3] ** 2),
                2 * (q_pose_hat[2] * q_pose_hat[3] - q_pose_hat[0] * q_pose_hat[1]),
            ],
            [
                2 * (q_pose_hat[1] * q_pose_hat[3] - q_pose_hat[0] * q_pose_hat[2]),
                2 * (q_pose_hat[2] * q_pose_hat[3] + q_pose_hat[0] * q_pose_hat[1]),
                1 - 2 * (q_pose_hat[1] ** 2 + q_pose_hat[2] ** 2),
            ],
        ]
    )
    if n == 0:
        empty3 = np.zeros((0, 3))
        return _ProjectedCloud(
            n_total=0,
            g_idx=np.zeros(0, dtype=np.int64),
            mu_obj=empty3,
            mu_c=empty3,
            u=np.zeros((0, 2)),
            j00=np.zeros(0), j02=np.zeros(0), j11=np.zeros(0), j12=np.zeros(0),
            V=np.zeros((0, 3, 3)), sig_obj=np.zeros((0, 3, 3)), Rq=np.zeros((0, 3, 3)),
            s2=empty3, q_hat=np.zeros((0, 4)), q_norm=np.zeros(0),
            covA=np.zeros(0), covB=np.zeros(0), covC=np.zeros(0),
            prec_a=np.zeros(0), prec_b=np.zeros(0), prec_c=np.zeros(0),
            radius=np.zeros(0), opac=np.zeros(0),
            colr=empty3, colors_raw=empty3,
            sorted_ids=np.zeros(0, dtype=np.int32),
            R_pose=R_pose, q_pose_hat=q_pose_hat, q_pose_norm=q_pose_norm,
        )

    mu_c_all = cloud.means @ R_pose.T + pose.translation
    in_front = mu_c_all[:, 2] > intr.near
    g_idx = np.nonzero(in_front)[0]
    mu_obj = cloud.means[g_idx]
    mu_c = mu_c_all[g_idx]
    x, y, z = mu_c[:, 0], mu_c[:, 1], mu_c[:, 2]
    u = np.stack([intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy], axis=1)
    j00 = intr.fx / z
    j02 = -intr.fx * x / (z * z)
    j11 = intr.fy / z
    j12 = -intr.fy * y / (z * z)

    q = cloud.rotations[g_idx]
    q_norm = np.linalg.norm(q, axis=1)
    q_hat = q / q_norm[:, None]
    w, qx, qy, qz = q_hat[:, 0], q_hat[:, 1], q_hat[:, 2], q_hat[:, 3]
    Rq = np.empty((g_idx.size, 3, 3))
    Rq[:, 0, 0] = 1 - 2 * (qy * qy + qz * qz)
    Rq[:, 0, 1] = 2 * (qx * qy - w * qz)
    Rq[:, 0, 2] = 2 * (qx * qz + w * qy)
    Rq[:, 1, 0] = 2 * (qx * qy + w * qz)
    Rq[:, 1, 1] = 1 - 2 * (qx * qx + qz * qz)
    Rq[:, 1, 2] = 2 * (qy * qz - w * qx)
    Rq[:, 2, 0] = 2 * (qx * qz - w * qy)
    Rq[:, 2, 1] = 2 * (qy * qz + w * qx)
    Rq[:, 2, 2] = 1 - 2 * (qx * qx + qy * qy)
    s2 = np.exp(2.0 * cloud.log_scales[g_idx])
    sig_obj = np.einsum("nij,nj,nkj->nik", Rq, s2, Rq)
    V = np.einsum("ij,njk,lk->nil", R_pose, sig_obj, R_pose)

    covA = (
        j00 * j00 * V[:, 0, 0] + 2.0 * j00 * j02 * V[:, 0, 2] + j02 * j02 * V[:, 2, 2]
    ) + cfg.dilation
    covB = (
        j00 * (V[:, 0, 1] * j11 + V[:, 0, 2] * j12)
        + j02 * (V[:, 2, 1] * j11 + V[:, 2, 2] * j12)
    )
    covC = (
        j11 * j11 * V[:, 1, 1] + 2.0 * j11 * j12 * V[:, 1, 2] + j12 * j12 * V[:, 2, 2]
    ) + cfg.dilation
    det = covA * covC - covB * covB
    prec_a = covC / det
    prec_b = -covB / det
    prec_c = covA / det
    half_tr = 0.5 * (covA + covC)
    lam_max = half_tr + np.sqrt(np.maximum((0.5 * (covA - covC)) ** 2 + covB * covB, 0.0))
    radius = FOOTPRINT_SIGMA * np.sqrt(lam_max)

    opac = 1.0 / (1.0 + np.exp(-cloud.opacity_logits[g_idx]))
    colors_raw = cloud.colors[g_idx]
    colr = np.clip(colors_raw, 0.0, 1.0)

    order = np.lexsort((g_idx, z))
    sorted_ids = order.astype(np.int32)

    return _ProjectedCloud(
        n_total=n,
        g_idx=g_idx.astype(np.int64),
        mu_obj=mu_obj,
        mu_c=mu_c,
        u=u,
        j00=j00, j02=j02, j11=j11, j12=j12,
        V=V, sig_obj=sig_obj, Rq=Rq, s2=s2, q_hat=q_hat, q_norm=q_norm,
        covA=covA, covB=covB, covC=covC,
        prec_a=prec_a, prec_b=prec_b, prec_c=prec_c,
        radius=radius, opac=opac, colr=colr, colors_raw=colors_raw,
        sorted_ids=sorted_ids,
        R_pose=R_pose, q_pose_hat=q_pose_hat, q_pose_norm=q_pose_norm,
    )


def project_gaussian(
    mean_c: np.ndarray,
    cov: np.ndarray,
    pose_rot: np.ndarray,
    intr: CameraIntrinsics,
    cfg: RenderConfig,
) -> Optional[tuple[np.ndarray, np.ndarray]]:
    """Project one Gaussian: camera-frame mean + object covariance -> 2D splat.

    ``pose_rot`` is the object-to-camera rotation (quaternion or 3×3
    matrix).  Returns ``(center_px, cov2d)`` with
    ``cov2d = J · R · cov · Rᵀ · Jᵀ + dilation·I``, or None when the mean
    is culled by the near plane.
    """
    mean_c = np.asarray(mean_c, dtype=np.float64)
    if mean_c[2] <= intr.near:
        return None
    pose_rot = np.asarray(pose_rot, dtype=np.float64)
    if pose_rot.shape == (4,):
        from .geom import quat_to_matrix

        R = quat_to_matrix(pose_rot / np.linalg.norm(pose_rot))
    elif pose_rot.shape == (3, 3):
        R = pose_rot
    else:
        raise ValueError("pose_rot must be a quaternion or 3x3 matrix")
    J = projection_jacobian(intr, mean_c)
    cov2d = J @ R @ np.asarray(cov, dtype=np.float64) @ R.T @ J.T + cfg.dilation * np.eye(2)
    return project_point(intr, mean_c), cov2d


def _empty_output(intr: CameraIntrinsics, cfg: RenderConfig, proj: _ProjectedCloud) -> RenderOutput:
    h, w = intr.height, intr.width
    bg = np.asarray(cfg.background, dtype=np.float64)
    color = np.tile(bg, (h, w, 1))
    return RenderOutput(
        color=color,
        depth=np.zeros((h, w)),
        alpha=np.zeros((h, w)),
        background=bg,
        proj=proj,
        blend=_SavedBlendState(
            pix_offsets=np.zeros(h * w + 1, dtype=np.int64),
            contrib_idx=np.zeros(0, dtype=np.int32),
            contrib_alpha=np.zeros(0),
        ),
    )


def render(
    cloud: GaussianCloud, pose: Pose, intr: CameraIntrinsics, cfg: RenderConfig = RenderConfig()
) -> RenderOutput:
    """Tiled forward splatting; saves the blending state for render_backward."""
    proj = _project_cloud(cloud, pose, intr, cfg)
    h, w = intr.height, intr.width
    if proj.count == 0:
        return _empty_output(intr, cfg, proj)
    bg = np.asarray(cfg.background, dtype=np.float64)
    radius2 = proj.radius * proj.radius
    tile_offsets, tile_ids = _kernels.bin_tiles(
        proj.sorted_ids, proj.u, proj.radius, w, h, cfg.tile_size
    )
    counts = np.zeros((h, w), dtype=np.int64)
    _kernels.forward_count(
        tile_offsets, tile_ids, proj.u, proj.prec_a, proj.prec_b, proj.prec_c,
        radius2, proj.opac, h, w, cfg.tile_size,
        cfg.alpha_min, cfg.alpha_max, cfg.transmittance_floor, counts,
    )
    pix_offsets = np.zeros(h * w + 1, dtype=np.int64)
    np.cumsum(counts.ravel(), out=pix_offsets[1:])
    total = int(pix_offsets[-1])
    contrib_idx = np.empty(total, dtype=np.int32)
    contrib_alpha = np.empty(total, dtype=np.float64)
    color = np.empty((h, w, 3))
    depth = np.empty((h, w))
    alpha = np.empty((h, w))
    _kernels.forward_fill(
        tile_offsets, tile_ids, proj.u, proj.mu_c[:, 2].copy(),
        proj.prec_a, proj.prec_b, proj.prec_c, radius2, proj.opac, proj.colr,
        h, w, cfg.tile_size, cfg.alpha_min, cfg.alpha_max, cfg.transmittance_floor,
        bg, pix_offsets, contrib_idx, contrib_alpha, color, depth, alpha,
    )
    return RenderOutput(
        color=color, depth=depth, alpha=alpha, background=bg, proj=proj,
        blend=_SavedBlendState(pix_offsets, contrib_idx, contrib_alpha),
    )


def render_reference(
    cloud: GaussianCloud, pose: Pose, intr: CameraIntrinsics, cfg: RenderConfig = RenderConfig()
) -> RenderOutput:
    """Brute-force oracle with the identical image contract to :func:`render`.

    No tiling and no per-pixel state is saved, so outputs of this path
    cannot be fed to :func:`render_backward`.
    """
    proj = _project_cloud(cloud, pose, intr, cfg)
    h, w = intr.height, intr.width
    bg = np.asarray(cfg.background, dtype=np.float64)
    if proj.count == 0:
        out = _empty_output(intr, cfg, proj)
        out.blend = None
        return out
    color = np.empty((h, w, 3))
    depth = np.empty((h, w))
    alpha = np.empty((h, w))
    _kernels.forward_reference(
        proj.sorted_ids, proj.u, proj.mu_c[:, 2].copy(),
        proj.prec_a, proj.prec_b, proj.prec_c, proj.radius * proj.radius,
        proj.opac, proj.colr, h, w,
        cfg.alpha_min, cfg.alpha_max, cfg.transmittance_floor, bg,
        color, depth, alpha,
    )
    return RenderOutput(color=color, depth=depth, alpha=alpha, background=bg, proj=proj, blend=None)


def render_backward(
    out: RenderOutput,
    dL_dcolor: np.ndarray,
    dL_ddepth: np.ndarray,
    cloud: GaussianCloud,
    pose: Pose,
    intr: CameraIntrinsics,
    cfg: RenderConfig = RenderConfig(),
) -> tuple[CloudGradients, np.ndarray]:
    """Analytic gradients of the rendered images w.r.t. cloud and pose.

    ``out`` must be the product of :func:`render` on the same inputs.
    Returns per-Gaussian gradients and the pose gradient as the 7-vector
    ``[dt, dq]`` (ambient quaternion gradient; the optimizer renormalizes
    after stepping).
    """
    proj = out.proj
    if proj is None or out.blend is None:
        raise ValueError("output carries no saved blending state (not produced by render)")
    if proj.n_total != cloud.count:
        raise ValueError("saved state does not match the cloud size")
    h, w = intr.height, intr.width
    if dL_dcolor.shape != (h, w, 3) or dL_ddepth.shape != (h, w):
        raise ValueError("gradient image shapes do not match the intrinsics")

    grads = CloudGradients.zeros_for(cloud)
    pose_grad = np.zeros(7)
    m = proj.count
    if m == 0:
        return grads, pose_grad

    n_chunks = cfg.n_chunks if cfg.n_chunks is not None else numba.get_num_threads()
    n_chunks = max(1, min(n_chunks, h))
    gbuf = np.zeros((n_chunks, m, 10))
    _kernels.backward_pixels(
        out.blend.pix_offsets, out.blend.contrib_idx, out.blend.contrib_alpha,
        proj.u, proj.mu_c[:, 2].copy(), proj.prec_a, proj.prec_b, proj.prec_c,
        proj.opac, proj.colr,
        np.ascontiguousarray(dL_dcolor), np.ascontiguousarray(dL_ddepth),
        out.alpha, out.background, h, w, cfg.alpha_max, n_chunks, gbuf,
    )
    g = gbuf.sum(axis=0)  # fixed chunk order: deterministic reduction
    gu = g[:, 0:2]
    gprec = g[:, 2:5]
    gz = g[:, 5]
    gcol = g[:, 6:9]
    gopa = g[:, 9]

    # precision -> 2D covariance entries (A, B, C)
    pa, pb, pc = proj.prec_a, proj.prec_b, proj.prec_c
    ga, gb, gc = gprec[:, 0], gprec[:, 1], gprec[:, 2]
    dA = -(ga * pa * pa + gb * pa * pb + gc * pb * pb)
    dB = -(2.0 * ga * pa * pb + gb * (pa * pc + pb * pb) + 2.0 * gc * pb * pc)
    dC = -(ga * pb * pb + gb * pb * pc + gc * pc * pc)

    # (A, B, C) -> projection Jacobian entries and camera-frame covariance
    J = np.zeros((m, 2, 3))
    J[:, 0, 0] = proj.j00
    J[:, 0, 2] = proj.j02
    J[:, 1, 1] = proj.j11
    J[:, 1, 2] = proj.j12
    M2 = np.zeros((m, 2, 2))
    M2[:, 0, 0] = dA
    M2[:, 0, 1] = dB
    M2[:, 1, 1] = dC
    Msym = M2 + M2.transpose(0, 2, 1)
    dJ = np.einsum("nij,njk,nkl->nil", Msym, J, proj.V)
    dV = np.einsum("nrp,nrs,nsq->npq", J, M2, J)

    # camera-frame covariance -> object covariance and pose rotation
    Rp = proj.R_pose
    dSig = np.einsum("ji,njk,kl->nil", Rp, dV, Rp)
    dVs = dV + dV.transpose(0, 2, 1)
    dRp_cov = np.einsum("nij,jk,nkl->il", dVs, Rp, proj.sig_obj)

    # object covariance -> Gaussian rotation and log scales
    dSigS = dSig + dSig.transpose(0, 2, 1)
    dRq = np.matmul(dSigS, proj.Rq) * proj.s2[:, None, :]
    dD = np.einsum("nji,njk,nki->ni", proj.Rq, dSig, proj.Rq)
    dlog_scales = 2.0 * proj.s2 * dD

    # Gaussian rotation matrices -> quaternions (through normalization)
    dRdq = _quat_rotation_jacobians_batch(proj.q_hat)
    dq_hat = np.einsum("nij,nmij->nm", dRq, dRdq)
    radial = np.sum(dq_hat * proj.q_hat, axis=1, keepdims=True)
    dq = (dq_hat - radial * proj.q_hat) / proj.q_norm[:, None]

    # projected center / Jacobian / depth -> camera-frame mean
    gmu_c = np.einsum("nij,ni->nj", J, gu)
    z = proj.mu_c[:, 2]
    z2 = z * z
    z3 = z2 * z
    gmu_c[:, 0] += dJ[:, 0, 2] * (-intr.fx / z2)
    gmu_c[:, 1] += dJ[:, 1, 2] * (-intr.fy / z2)
    gmu_c[:, 2] += (
        dJ[:, 0, 0] * (-intr.fx / z2)
        + dJ[:, 0, 2] * (2.0 * intr.fx * proj.mu_c[:, 0] / z3)
        + dJ[:, 1, 1] * (-intr.fy / z2)
        + dJ[:, 1, 2] * (2.0 * intr.fy * proj.mu_c[:, 1] / z3)
    )
    gmu_c[:, 2] += gz

    # camera-frame mean -> object-frame mean and pose
    gmu_obj = gmu_c @ Rp
    dt = gmu_c.sum(axis=0)
    dRp = np.einsum("ni,nj->ij", gmu_c, proj.mu_obj) + dRp_cov
    dRdq_pose = _quat_rotation_jacobians_batch(proj.q_pose_hat[None])[0]
    dq_pose_hat = np.einsum("ij,mij->m", dRp, dRdq_pose)
    dq_pose = (
        dq_pose_hat - np.dot(dq_pose_hat, proj.q_pose_hat) * proj.q_pose_hat
    ) / proj.q_pose_norm

    # activations
    o = proj.opac
    dlogit = gopa * o * (1.0 - o)
    # clamp subgradient: pass-through on the closed interval, zero outside
    dcol = gcol * ((proj.colors_raw >= 0.0) & (proj.colors_raw <= 1.0))

    idx = proj.g_idx
    grads.means[idx] = gmu_obj
    grads.log_scales[idx] = dlog_scales
    grads.rotations[idx] = dq
    grads.opacity_logits[idx] = dlogit
    grads.colors[idx] = dcol
    pose_grad[0:3] = dt
    pose_grad[3:7] = dq_pose
    return grads, pose_grad
