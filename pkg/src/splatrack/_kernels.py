"""Numba kernels for the splatting rasterizer.

All kernels operate on compacted per-Gaussian arrays (culled Gaussians
removed) and are deterministic: forward passes write disjoint pixel
tiles, and the backward pass accumulates into per-chunk buffers that are
reduced in a fixed order, so results do not depend on thread scheduling.
Pixel (row, col) samples the point (x, y) = (col, row).
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, prange


@njit(cache=True)
def bin_tiles(
    sorted_ids, u, radius, W, H, tile_size
):
    """Build per-tile candidate lists (CSR) in front-to-back order.

    Returns (tile_offsets, tile_ids): for tile t the candidates are
    tile_ids[tile_offsets[t]:tile_offsets[t+1]], ordered as in sorted_ids.
    """
    ntx = (W + tile_size - 1) // tile_size
    nty = (H + tile_size - 1) // tile_size
    n_tiles = ntx * nty
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    m = sorted_ids.shape[0]
    tx0 = np.empty(m, dtype=np.int64)
    tx1 = np.empty(m, dtype=np.int64)
    ty0 = np.empty(m, dtype=np.int64)
    ty1 = np.empty(m, dtype=np.int64)
    for k in range(m):
        g = sorted_ids[k]
        r = radius[g]
        x0 = int(math.floor((u[g, 0] - r) / tile_size))
        x1 = int(math.floor((u[g, 0] + r) / tile_size))
        y0 = int(math.floor((u[g, 1] - r) / tile_size))
        y1 = int(math.floor((u[g, 1] + r) / tile_size))
        if x1 < 0 or y1 < 0 or x0 >= ntx or y0 >= nty:
            tx0[k], tx1[k] = 0, -1  # no tiles
            continue
        tx0[k] = max(0, x0)
        tx1[k] = min(ntx - 1, x1)
        ty0[k] = max(0, y0)
        ty1[k] = min(nty - 1, y1)
        for ty in range(ty0[k], ty1[k] + 1):
            for tx in range(tx0[k], tx1[k] + 1):
                counts[ty * ntx + tx + 1] += 1
    offsets = np.cumsum(counts)
    tile_ids = np.empty(offsets[-1], dtype=np.int32)
    cursor = offsets[:-1].copy()
    for k in range(m):
        if tx1[k] < tx0[k]:
            continue
        g = sorted_ids[k]
        for ty in range(ty0[k], ty1[k] + 1):
            for tx in range(tx0[k], tx1[k] + 1):
                t = ty * ntx + tx
                tile_ids[cursor[t]] = g
                cursor[t] += 1
    return offsets, tile_ids


@njit(cache=True, parallel=True)
def forward_count(
    tile_offsets, tile_ids, u, prec_a, prec_b, prec_c, radius2, opac,
    H, W, tile_size, alpha_min, alpha_max, t_floor, counts,
):
    """First pass: per-pixel contributor counts (same gates as forward_fill)."""
    ntx = (W + tile_size - 1) // tile_size
    nty = (H + tile_size - 1) // tile_size
    for t in prange(ntx * nty):
        ty = t // ntx
        tx = t - ty * ntx
        y1 = min((ty + 1) * tile_size, H)
        x1 = min((tx + 1) * tile_size, W)
        s = tile_offsets[t]
        e = tile_offsets[t + 1]
        for py in range(ty * tile_size, y1):
            for px in range(tx * tile_size, x1):
                trans = 1.0
                cnt = 0
                for k in range(s, e):
                    g = tile_ids[k]
                    dx = px - u[g, 0]
                    dy = py - u[g, 1]
                    if dx * dx + dy * dy > radius2[g]:
                        continue
                    maha = prec_a[g] * dx * dx + 2.0 * prec_b[g] * dx * dy + prec_c[g] * dy * dy
                    alpha = opac[g] * math.exp(-0.5 * maha)
                    if alpha < alpha_min:
                        continue
                    if alpha > alpha_max:
                        alpha = alpha_max
                    cnt += 1
                    trans *= 1.0 - alpha
                    if trans < t_floor:
                        break
                counts[py, px] = cnt


@njit(cache=True, parallel=True)
def forward_fill(
    tile_offsets, tile_ids, u, z, prec_a, prec_b, prec_c, radius2, opac, colr,
    H, W, tile_size, alpha_min, alpha_max, t_floor, bg,
    pix_offsets, contrib_idx, contrib_alpha, out_color, out_depth, out_alpha,
):
    """Second pass: composite color/depth/alpha and record per-pixel blending state."""
    ntx = (W + tile_size - 1) // tile_size
    nty = (H + tile_size - 1) // tile_size
    for t in prange(ntx * nty):
        ty = t // ntx
        tx = t - ty * ntx
        y1 = min((ty + 1) * tile_size, H)
        x1 = min((tx + 1) * tile_size, W)
        s = tile_offsets[t]
        e = tile_offsets[t + 1]
        for py in range(ty * tile_size, y1):
            for px in range(tx * tile_size, x1):
                trans = 1.0
                cr = 0.0
                cg = 0.0
                cb = 0.0
                d = 0.0
                w = pix_offsets[py * W + px]
                for k in range(s, e):
                    g = tile_ids[k]
                    dx = px - u[g, 0]
                    dy = py - u[g, 1]
                    if dx * dx + dy * dy > radius2[g]:
                        continue
                    maha = prec_a[g] * dx * dx + 2.0 * prec_b[g] * dx * dy + prec_c[g] * dy * dy
                    alpha = opac[g] * math.exp(-0.5 * maha)
                    if alpha < alpha_min:
                        continue
                    if alpha > alpha_max:
                        alpha = alpha_max
                    contrib_idx[w] = g
                    contrib_alpha[w] = alpha
                    w += 1
                    weight = alpha * trans
                    cr += colr[g, 0] * weight
                    cg += colr[g, 1] * weight
                    cb += colr[g, 2] * weight
                    d += z[g] * weight
                    trans *= 1.0 - alpha
                    if trans < t_floor:
                        break
                out_color[py, px, 0] = cr + bg[0] * trans
                out_color[py, px, 1] = cg + bg[1] * trans
                out_color[py, px, 2] = cb + bg[2] * trans
                out_depth[py, px] = d
                out_alpha[py, px] = 1.0 - trans


@njit(cache=True, parallel=True)
def forward_reference(
    sorted_ids, u, z, prec_a, prec_b, prec_c, radius2, opac, colr,
    H, W, alpha_min, alpha_max, t_floor, bg,
    out_color, out_depth, out_alpha,
):
    """Oracle renderer: per-pixel loop over all Gaussians, no tiling.

    Applies the identical per-contribution gates as the tiled path so the
    two implement the same image function; only the iteration strategy
    differs.
    """
    m = sorted_ids.shape[0]
    for py in prange(H):
        for px in range(W):
            trans = 1.0
            cr = 0.0
            cg = 0.0
            cb = 0.0
            d = 0.0
            for k in range(m):
                g = sorted_ids[k]
                dx = px - u[g, 0]
                dy = py - u[g, 1]
                if dx * dx + dy * dy > radius2[g]:
                    continue
                maha = prec_a[g] * dx * dx + 2.0 * prec_b[g] * dx * dy + prec_c[g] * dy * dy
                alpha = opac[g] * math.exp(-0.5 * maha)
                if alpha < alpha_min:
                    continue
                if alpha > alpha_max:
                    alpha = alpha_max
                weight = alpha * trans
                cr += colr[g, 0] * weight
                cg += colr[g, 1] * weight
                cb += colr[g, 2] * weight
                d += z[g] * weight
                trans *= 1.0 - alpha
                if trans < t_floor:
                    break
            out_color[py, px, 0] = cr + bg[0] * trans
            out_color[py, px, 1] = cg + bg[1] * trans
            out_color[py, px, 2] = cb + bg[2] * trans
            out_depth[py, px] = d
            out_alpha[py, px] = 1.0 - trans


@njit(cache=True, parallel=True)
def backward_pixels(
    pix_offsets, contrib_idx, contrib_alpha,
    u, z, prec_a, prec_b, prec_c, opac, colr,
    dLdc, dLdd, out_alpha, bg,
    H, W, alpha_max, n_chunks, gbuf,
):
    """Backward sweep per pixel, replaying the saved compositing state.

    gbuf has shape (n_chunks, M, 10) with slots
    [du_x, du_y, dprec_a, dprec_b, dprec_c, dz, dcolor_r, dcolor_g,
    dcolor_b, dopacity_activated]; rows are partitioned into n_chunks
    contiguous blocks so accumulation is race-free and the chunk-ordered
    reduction is reproducible.
    """
    rows_per = (H + n_chunks - 1) // n_chunks
    for c in prange(n_chunks):
        r1 = min(H, (c + 1) * rows_per)
        for py in range(c * rows_per, r1):
            for px in range(W):
                p = py * W + px
                s = pix_offsets[p]
                e = pix_offsets[p + 1]
                if s == e:
                    continue
                gr = dLdc[py, px, 0]
                gg = dLdc[py, px, 1]
                gb = dLdc[py, px, 2]
                gd = dLdd[py, px]
                if gr == 0.0 and gg == 0.0 and gb == 0.0 and gd == 0.0:
                    continue
                t_final = 1.0 - out_alpha[py, px]
                sr = bg[0] * t_final
                sg = bg[1] * t_final
                sb = bg[2] * t_final
                sd = 0.0
                t_after = t_final
                for k in range(e - 1, s - 1, -1):
                    g = contrib_idx[k]
                    a = contrib_alpha[k]
                    om = 1.0 - a
                    t_k = t_after / om
                    weight = a * t_k
                    gbuf[c, g, 6] += gr * weight
                    gbuf[c, g, 7] += gg * weight
                    gbuf[c, g, 8] += gb * weight
                    gbuf[c, g, 5] += gd * weight
                    d_alpha = (
                        gr * (t_k * colr[g, 0] - sr / om)
                        + gg * (t_k * colr[g, 1] - sg / om)
                        + gb * (t_k * colr[g, 2] - sb / om)
                        + gd * (t_k * z[g] - sd / om)
                    )
                    if a < alpha_max:  # clamped contributions have zero local slope
                        gauss = a / opac[g]
                        common = d_alpha * opac[g] * gauss
                        dx = px - u[g, 0]
                        dy = py - u[g, 1]
                        gbuf[c, g, 0] += common * (prec_a[g] * dx + prec_b[g] * dy)
                        gbuf[c, g, 1] += common * (prec_b[g] * dx + prec_c[g] * dy)
                        gbuf[c, g, 2] += -0.5 * dx * dx * common
                        gbuf[c, g, 3] += -dx * dy * common
                        gbuf[c, g, 4] += -0.5 * dy * dy * common
                        gbuf[c, g, 9] += d_alpha * gauss
                    sr += colr[g, 0] * weight
                    sg += colr[g, 1] * weight
                    sb += colr[g, 2] * weight
                    sd += z[g] * weight
                    t_after = t_k
