"""Photometric and geometric losses with analytic image-space gradients.

The reconstruction objective mixes masked L1 color, an SSIM term, and an
L1 depth term; tracking drops the SSIM term:

    L_recon = (1 - lambda) * L1_color + lambda * (1 - SSIM) + beta * L1_depth
    L_track =                L1_color                       + beta * L1_depth

The color terms run over the full image with the observation's background
replaced by the render background, so silhouette mismatch is penalized
photometrically.  The depth term is evaluated only where the observed
depth is valid and the rendered alpha exceeds 0.5 (the alpha-blended depth
is not normalized, so low-coverage pixels carry meaningless depth).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .dataio import FrameObservation
from .raster import RenderOutput

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_DYNAMIC_RANGE = 1.0
DEPTH_ALPHA_GATE = 0.5


@dataclass(frozen=True)
class LossWeights:
    """Mixing weights: ``ssim_mix`` is the SSIM fraction of the color loss."""

    ssim_mix: float = 0.2  # lambda in L_recon
    depth_weight: float = 0.2  # beta

    def __post_init__(self):
        if not (0.0 <= self.ssim_mix <= 1.0):
            raise ValueError("ssim_mix must be in [0, 1]")
        if self.depth_weight < 0:
            raise ValueError("depth_weight must be >= 0")


@dataclass
class LossReport:
    """Loss value and its parts; ``ssim`` stores the (1 - SSIM) loss term."""

    total: float
    l1_color: float
    ssim: float
    l1_depth: float


def l1_image(
    a: np.ndarray, b: np.ndarray, weight_mask: np.ndarray
) -> tuple[float, np.ndarray]:
    """Weighted mean absolute difference and its gradient w.r.t. ``a``.

    ``weight_mask`` is per-pixel (H, W); the mean runs over weighted
    pixels and channels.  An all-zero mask gives (0, zero gradient).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image shapes disagree")
    w = np.asarray(weight_mask, dtype=np.float64)
    channels = a.shape[2] if a.ndim == 3 else 1
    if a.ndim == 3:
        w = w[:, :, None]
    total_weight = float(np.asarray(weight_mask, dtype=np.float64).sum())
    if total_weight == 0:
        return 0.0, np.zeros_like(a)
    diff = a - b
    value = float(np.sum(np.abs(diff) * w)) / (total_weight * channels)
    grad = np.sign(diff) * w / (total_weight * channels)
    return value, grad


def _gaussian_window() -> np.ndarray:
    half = SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
    return k / k.sum()


_WIN = _gaussian_window()
_PAD = SSIM_WINDOW // 2


def _reflect_indices(n: int) -> np.ndarray:
    return np.pad(np.arange(n), _PAD, mode="reflect")


def _blur(xp: np.ndarray) -> np.ndarray:
    """Separable Gaussian filter of a padded array, cropped to valid size."""
    y = correlate1d(xp, _WIN, axis=0, mode="constant")
    y = correlate1d(y, _WIN, axis=1, mode="constant")
    return y[_PAD:-_PAD, _PAD:-_PAD]


def _blur_adjoint(g: np.ndarray, iy: np.ndarray, ix: np.ndarray, shape) -> np.ndarray:
    """Exact adjoint of pad-reflect -> blur -> crop."""
    gp = np.zeros((shape[0] + 2 * _PAD, shape[1] + 2 * _PAD))
    gp[_PAD:-_PAD, _PAD:-_PAD] = g
    gp = correlate1d(gp, _WIN, axis=0, mode="constant")
    gp = correlate1d(gp, _WIN, axis=1, mode="constant")
    out = np.zeros(shape)
    np.add.at(out, (iy[:, None], ix[None, :]), gp)
    return out


def _ssim_single(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    h, w = a.shape
    iy = _reflect_indices(h)
    ix = _reflect_indices(w)
    ap = a[iy][:, ix]
    bp = b[iy][:, ix]
    mu_a = _blur(ap)
    mu_b = _blur(bp)
    baa = _blur(ap * ap)
    bbb = _blur(bp * bp)
    bab = _blur(ap * bp)
    var_a = baa - mu_a * mu_a
    var_b = bbb - mu_b * mu_b
    cov = bab - mu_a * mu_b
    c1 = (SSIM_K1 * SSIM_DYNAMIC_RANGE) ** 2
    c2 = (SSIM_K2 * SSIM_DYNAMIC_RANGE) ** 2
    a1 = 2.0 * mu_a * mu_b + c1
    a2 = 2.0 * cov + c2
    b1 = mu_a * mu_a + mu_b * mu_b + c1
    b2 = var_a + var_b + c2
    den = b1 * b2
    s = (a1 * a2) / den
    value = float(s.mean())

    # adjoint of the mean and the rational map
    gs = np.full_like(s, 1.0 / s.size)
    g_a1 = gs * a2 / den
    g_a2 = gs * a1 / den
    g_b1 = -gs * s / b1
    g_b2 = -gs * s / b2
    g_mu_a = 2.0 * mu_b * g_a1 - 2.0 * mu_b * g_a2 + 2.0 * mu_a * g_b1 - 2.0 * mu_a * g_b2
    g_bab = 2.0 * g_a2
    g_baa = g_b2
    grad = (
        _blur_adjoint(g_mu_a, iy, ix, a.shape)
        + 2.0 * a * _blur_adjoint(g_baa, iy, ix, a.shape)
        + b * _blur_adjoint(g_bab, iy, ix, a.shape)
    )
    return value, grad


def ssim(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean SSIM of two images and its gradient w.r.t. ``a``.

    Uses the standard 11×11 Gaussian window (sigma 1.5), K1/K2 constants
    of 0.01/0.03 on a dynamic range of 1.0, and reflection padding at the
    borders.  Channels are averaged.  The associated loss is
    ``1 - ssim(a, b)[0]`` with gradient ``-ssim(a, b)[1]``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image shapes disagree")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    if a.ndim == 2:
        return _ssim_single(a, b)
    values = 0.0
    grad = np.zeros_like(a)
    channels = a.shape[2]
    for c in range(channels):
        v, g = _ssim_single(a[:, :, c], b[:, :, c])
        values += v / channels
        grad[:, :, c] = g / channels
    return values, grad


def _masked_observation(out: RenderOutput, obs: FrameObservation) -> np.ndarray:
    return np.where(obs.mask[:, :, None], obs.color, out.background[None, None, :])


def recon_loss(
    rendered: RenderOutput, obs: FrameObservation, w: LossWeights
) -> tuple[LossReport, np.ndarray, np.ndarray]:
    """Reconstruction objective; returns (report, dL/dcolor, dL/ddepth)."""
    target = _masked_observation(rendered, obs)
    ones = np.ones(obs.depth.shape)
    l1c, g_l1c = l1_image(rendered.color, target, ones)
    if w.ssim_mix > 0.0:
        ssim_val, g_ssim = ssim(rendered.color, target)
        ssim_loss = 1.0 - ssim_val
    else:
        ssim_loss = 0.0
        g_ssim = None
    depth_mask = (obs.depth > 0) & (rendered.alpha > DEPTH_ALPHA_GATE)
    l1d, g_l1d = l1_image(rendered.depth, obs.depth, depth_mask)

    total = (1.0 - w.ssim_mix) * l1c + w.ssim_mix * ssim_loss + w.depth_weight * l1d
    d_color = (1.0 - w.ssim_mix) * g_l1c
    if g_ssim is not None:
        d_color = d_color - w.ssim_mix * g_ssim
    d_depth = w.depth_weight * g_l1d
    return LossReport(total=total, l1_color=l1c, ssim=ssim_loss, l1_depth=l1d), d_color, d_depth


def track_loss(
    rendered: RenderOutput, obs: FrameObservation, w: LossWeights
) -> tuple[LossReport, np.ndarray, np.ndarray]:
    """Tracking objective: the reconstruction loss with the SSIM term dropped."""
    return recon_loss(rendered, obs, LossWeights(ssim_mix=0.0, depth_weight=w.depth_weight))
