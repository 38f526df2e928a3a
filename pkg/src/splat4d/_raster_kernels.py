"""Hot per-pixel compositing loops for the splatting rasterizer.

Two interchangeable implementations of the same arithmetic: numba kernels
parallelized over 16x16 tiles, and vectorized numpy fallbacks that sweep
Gaussians in depth order. Within one backend results are bit-identical
across runs and thread counts because every pixel is composited by exactly
one thread in the fixed global depth order.

Compositing per pixel, front to back over depth-sorted Gaussians::

    m     = d^T Sigma2D^{-1} d          (d = pixel center - splat center)
    w     = exp(-m/2) * taper(m)        (support truncated at m = 9, i.e. 3 sigma)
    alpha = opacity * w
    rgb  += T * alpha * color;  T *= 1 - alpha

``taper`` is 1 below m = 7 and falls to 0 at m = 9 along a quintic
smoothstep, so the truncated weight stays C2; finite-difference gradient
checks rely on this. Compositing of a Gaussian is skipped once
transmittance T drops below EARLY_STOP_T.
"""

import numpy as np

from . import backend
from .backend import njit, prange

TILE = 16
SUPPORT_M = 9.0          # 3-sigma truncation of the 2D footprint
TAPER_START_M = 7.0      # C1 taper between here and SUPPORT_M
EARLY_STOP_T = 1e-4
ALPHA_SKIP = 1e-12
DILATION = 0.3           # px^2 added to the screen covariance diagonal


@njit(cache=True, inline="always")
def _weight_and_slope(m):
    """Tapered Gaussian weight w(m) and dw/dm."""
    e = np.exp(-0.5 * m)
    if m <= TAPER_START_M:
        return e, -0.5 * e
    u = (m - TAPER_START_M) / (SUPPORT_M - TAPER_START_M)
    s = 1.0 - u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
    ds = -30.0 * u * u * (1.0 - u) * (1.0 - u) / (SUPPORT_M - TAPER_START_M)
    return e * s, e * (ds - 0.5 * s)


def _weight_and_slope_np(m):
    e = np.exp(-0.5 * np.minimum(m, SUPPORT_M))
    u = np.clip((m - TAPER_START_M) / (SUPPORT_M - TAPER_START_M), 0.0, 1.0)
    s = 1.0 - u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
    ds = np.where((m > TAPER_START_M) & (m < SUPPORT_M),
                  -30.0 * u * u * (1.0 - u) * (1.0 - u) / (SUPPORT_M - TAPER_START_M), 0.0)
    return e * s, e * (ds - 0.5 * s)


@njit(cache=True)
def _bin_tiles(bbox, n_tx, n_ty):
    """Bucket depth-sorted splats into screen tiles.

    bbox rows are integer pixel ranges [x0, x1) x [y0, y1). Returns
    (tile_start, entries): entries[tile_start[t]:tile_start[t+1]] are the
    indices overlapping tile t, in depth order.
    """
    n = bbox.shape[0]
    n_tiles = n_tx * n_ty
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for i in range(n):
        x0, x1, y0, y1 = bbox[i, 0], bbox[i, 1], bbox[i, 2], bbox[i, 3]
        if x1 <= x0 or y1 <= y0:
            continue
        for ty in range(y0 // TILE, (y1 - 1) // TILE + 1):
            for tx in range(x0 // TILE, (x1 - 1) // TILE + 1):
                counts[ty * n_tx + tx + 1] += 1
    tile_start = np.cumsum(counts)
    entries = np.empty(tile_start[-1], dtype=np.int64)
    cursor = tile_start[:-1].copy()
    for i in range(n):
        x0, x1, y0, y1 = bbox[i, 0], bbox[i, 1], bbox[i, 2], bbox[i, 3]
        if x1 <= x0 or y1 <= y0:
            continue
        for ty in range(y0 // TILE, (y1 - 1) // TILE + 1):
            for tx in range(x0 // TILE, (x1 - 1) // TILE + 1):
                t = ty * n_tx + tx
                entries[cursor[t]] = i
                cursor[t] += 1
    return tile_start, entries


def _bin_tiles_np(bbox, n_tx, n_ty):
    n_tiles = n_tx * n_ty
    per_tile = [[] for _ in range(n_tiles)]
    for i in range(bbox.shape[0]):
        x0, x1, y0, y1 = bbox[i]
        if x1 <= x0 or y1 <= y0:
            continue
        for ty in range(y0 // TILE, (y1 - 1) // TILE + 1):
            for tx in range(x0 // TILE, (x1 - 1) // TILE + 1):
                per_tile[ty * n_tx + tx].append(i)
    tile_start = np.zeros(n_tiles + 1, dtype=np.int64)
    for t, lst in enumerate(per_tile):
        tile_start[t + 1] = tile_start[t] + len(lst)
    entries = np.array([i for lst in per_tile for i in lst], dtype=np.int64)
    return tile_start, entries


def bin_tiles(bbox, n_tx, n_ty):
    if backend.numba_enabled():
        return _bin_tiles(bbox, n_tx, n_ty)
    return _bin_tiles_np(bbox, n_tx, n_ty)


@njit(cache=True, parallel=True)
def _forward_tiles(width, height, n_tx, mean2d, conic, opacity, color,
                   tile_start, entries, bg, out_rgb, out_alpha, out_count):
    n_tiles = tile_start.shape[0] - 1
    for t in prange(n_tiles):
        ty = t // n_tx
        tx = t - ty * n_tx
        x0 = tx * TILE
        y0 = ty * TILE
        x1 = min(x0 + TILE, width)
        y1 = min(y0 + TILE, height)
        e0 = tile_start[t]
        e1 = tile_start[t + 1]
        for py in range(y0, y1):
            cy = py + 0.5
            for px in range(x0, x1):
                cx = px + 0.5
                trans = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                cnt = 0
                for e in range(e0, e1):
                    if trans < EARLY_STOP_T:
                        break
                    i = entries[e]
                    dx = cx - mean2d[i, 0]
                    dy = cy - mean2d[i, 1]
                    m = (conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy
                         + conic[i, 2] * dy * dy)
                    if m >= SUPPORT_M:
                        continue
                    w, _ = _weight_and_slope(m)
                    alpha = opacity[i] * w
                    if alpha < ALPHA_SKIP:
                        continue
                    f = trans * alpha
                    r += f * color[i, 0]
                    g += f * color[i, 1]
                    b += f * color[i, 2]
                    trans *= 1.0 - alpha
                    cnt += 1
                out_rgb[py, px, 0] = r + trans * bg[0]
                out_rgb[py, px, 1] = g + trans * bg[1]
                out_rgb[py, px, 2] = b + trans * bg[2]
                out_alpha[py, px] = 1.0 - trans
                out_count[py, px] = cnt


@njit(cache=True, parallel=True)
def _backward_tiles(width, height, n_tx, mean2d, conic, opacity, color,
                    tile_start, entries, bg, upstream, entry_grads):
    """Per-entry partial gradients; entry_grads has 9 slots per entry:

    0..2 color, 3 d/d(activated opacity), 4..6 d/d(conic as full-matrix
    entries A00, A01, A11), 7..8 d/d(screen center).
    """
    n_tiles = tile_start.shape[0] - 1
    for t in prange(n_tiles):
        ty = t // n_tx
        tx = t - ty * n_tx
        x0 = tx * TILE
        y0 = ty * TILE
        x1 = min(x0 + TILE, width)
        y1 = min(y0 + TILE, height)
        e0 = tile_start[t]
        e1 = tile_start[t + 1]
        if e1 == e0:
            continue
        for py in range(y0, y1):
            cy = py + 0.5
            for px in range(x0, x1):
                cx = px + 0.5
                # sweep A: total composited color of this pixel
                trans = 1.0
                tot0 = 0.0
                tot1 = 0.0
                tot2 = 0.0
                for e in range(e0, e1):
                    if trans < EARLY_STOP_T:
                        break
                    i = entries[e]
                    dx = cx - mean2d[i, 0]
                    dy = cy - mean2d[i, 1]
                    m = (conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy
                         + conic[i, 2] * dy * dy)
                    if m >= SUPPORT_M:
                        continue
                    w, _ = _weight_and_slope(m)
                    alpha = opacity[i] * w
                    if alpha < ALPHA_SKIP:
                        continue
                    f = trans * alpha
                    tot0 += f * color[i, 0]
                    tot1 += f * color[i, 1]
                    tot2 += f * color[i, 2]
                    trans *= 1.0 - alpha
                tot0 += trans * bg[0]
                tot1 += trans * bg[1]
                tot2 += trans * bg[2]

                up0 = upstream[py, px, 0]
                up1 = upstream[py, px, 1]
                up2 = upstream[py, px, 2]

                # sweep B: per-splat contributions to the gradient
                trans = 1.0
                cf0 = 0.0
                cf1 = 0.0
                cf2 = 0.0
                for e in range(e0, e1):
                    if trans < EARLY_STOP_T:
                        break
                    i = entries[e]
                    dx = cx - mean2d[i, 0]
                    dy = cy - mean2d[i, 1]
                    m = (conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy
                         + conic[i, 2] * dy * dy)
                    if m >= SUPPORT_M:
                        continue
                    w, dw = _weight_and_slope(m)
                    alpha = opacity[i] * w
                    if alpha < ALPHA_SKIP:
                        continue
                    f = trans * alpha
                    cf0 += f * color[i, 0]
                    cf1 += f * color[i, 1]
                    cf2 += f * color[i, 2]
                    one_m = 1.0 - alpha
                    # d pixel / d alpha_i = T_i c_i - behind_i / (1 - alpha_i)
                    ga = (up0 * (trans * color[i, 0] - (tot0 - cf0) / one_m)
                          + up1 * (trans * color[i, 1] - (tot1 - cf1) / one_m)
                          + up2 * (trans * color[i, 2] - (tot2 - cf2) / one_m))
                    entry_grads[e, 0] += up0 * f
                    entry_grads[e, 1] += up1 * f
                    entry_grads[e, 2] += up2 * f
                    entry_grads[e, 3] += ga * w
                    gm = ga * opacity[i] * dw
                    entry_grads[e, 4] += gm * dx * dx
                    entry_grads[e, 5] += gm * dx * dy
                    entry_grads[e, 6] += gm * dy * dy
                    entry_grads[e, 7] -= 2.0 * gm * (conic[i, 0] * dx + conic[i, 1] * dy)
                    entry_grads[e, 8] -= 2.0 * gm * (conic[i, 1] * dx + conic[i, 2] * dy)
                    trans *= one_m


def _splat_patch(mean2d_i, conic_i, bbox_i):
    x0, x1, y0, y1 = bbox_i
    xs = np.arange(x0, x1) + 0.5 - mean2d_i[0]
    ys = np.arange(y0, y1) + 0.5 - mean2d_i[1]
    dx = xs[None, :]
    dy = ys[:, None]
    m = conic_i[0] * dx * dx + 2.0 * conic_i[1] * dx * dy + conic_i[2] * dy * dy
    return dx, dy, m


def _forward_np(width, height, mean2d, conic, opacity, color, bbox, bg):
    rgb = np.zeros((height, width, 3))
    trans = np.ones((height, width))
    count = np.zeros((height, width), dtype=np.int32)
    for i in range(mean2d.shape[0]):
        x0, x1, y0, y1 = bbox[i]
        if x1 <= x0 or y1 <= y0:
            continue
        dx, dy, m = _splat_patch(mean2d[i], conic[i], bbox[i])
        w, _ = _weight_and_slope_np(m)
        alpha = opacity[i] * w
        tsub = trans[y0:y1, x0:x1]
        act = (tsub >= EARLY_STOP_T) & (m < SUPPORT_M) & (alpha >= ALPHA_SKIP)
        f = np.where(act, tsub * alpha, 0.0)
        rgb[y0:y1, x0:x1] += f[:, :, None] * color[i]
        trans[y0:y1, x0:x1] = np.where(act, tsub * (1.0 - alpha), tsub)
        count[y0:y1, x0:x1] += act
    rgb += trans[:, :, None] * bg
    return rgb, 1.0 - trans, count


def _backward_np(width, height, mean2d, conic, opacity, color, bbox, bg, upstream):
    """Numpy fallback of the backward sweep; returns per-splat gradients
    with the same 9 slots as the numba entry buffer, already reduced."""
    n = mean2d.shape[0]
    grads = np.zeros((n, 9))
    total, _, _ = _forward_np(width, height, mean2d, conic, opacity, color, bbox, bg)
    trans = np.ones((height, width))
    cfront = np.zeros((height, width, 3))
    for i in range(n):
        x0, x1, y0, y1 = bbox[i]
        if x1 <= x0 or y1 <= y0:
            continue
        dx, dy, m = _splat_patch(mean2d[i], conic[i], bbox[i])
        w, dw = _weight_and_slope_np(m)
        alpha = opacity[i] * w
        tsub = trans[y0:y1, x0:x1]
        act = (tsub >= EARLY_STOP_T) & (m < SUPPORT_M) & (alpha >= ALPHA_SKIP)
        f = np.where(act, tsub * alpha, 0.0)
        cfront[y0:y1, x0:x1] += f[:, :, None] * color[i]
        one_m = np.where(act, 1.0 - alpha, 1.0)
        behind = (total[y0:y1, x0:x1] - cfront[y0:y1, x0:x1]) / one_m[:, :, None]
        up = upstream[y0:y1, x0:x1]
        ga = np.where(
            act,
            np.einsum("yxc,yxc->yx", up, tsub[:, :, None] * color[i] - behind),
            0.0,
        )
        grads[i, 0:3] = np.einsum("yxc,yx->c", up, f)
        grads[i, 3] = np.sum(ga * w)
        gm = ga * opacity[i] * dw
        grads[i, 4] = np.sum(gm * dx * dx)
        grads[i, 5] = np.sum(gm * dx * dy)
        grads[i, 6] = np.sum(gm * dy * dy)
        grads[i, 7] = np.sum(-2.0 * gm * (conic[i, 0] * dx + conic[i, 1] * dy))
        grads[i, 8] = np.sum(-2.0 * gm * (conic[i, 1] * dx + conic[i, 2] * dy))
        trans[y0:y1, x0:x1] = np.where(act, tsub * (1.0 - alpha), tsub)
    return grads


def composite_forward(width, height, mean2d, conic, opacity, color, bbox, bg):
    """Dispatch the forward compositing sweep to the active backend."""
    if not backend.numba_enabled():
        return _forward_np(width, height, mean2d, conic, opacity, color, bbox, bg)
    n_tx = (width + TILE - 1) // TILE
    n_ty = (height + TILE - 1) // TILE
    tile_start, entries = _bin_tiles(bbox, n_tx, n_ty)
    rgb = np.empty((height, width, 3))
    alpha = np.empty((height, width))
    count = np.empty((height, width), dtype=np.int32)
    _forward_tiles(width, height, n_tx, mean2d, conic, opacity, color,
                   tile_start, entries, bg, rgb, alpha, count)
    return rgb, alpha, count


def composite_backward(width, height, mean2d, conic, opacity, color, bbox, bg, upstream):
    """Dispatch the backward sweep; returns (n_splats, 9) reduced gradients."""
    if not backend.numba_enabled():
        return _backward_np(width, height, mean2d, conic, opacity, color, bbox, bg, upstream)
    n_tx = (width + TILE - 1) // TILE
    n_ty = (height + TILE - 1) // TILE
    tile_start, entries = _bin_tiles(bbox, n_tx, n_ty)
    entry_grads = np.zeros((entries.shape[0], 9))
    _backward_tiles(width, height, n_tx, mean2d, conic, opacity, color,
                    tile_start, entries, bg, upstream, entry_grads)
    grads = np.zeros((mean2d.shape[0], 9))
    # merge per-tile partials in fixed entry order for determinism
    np.add.at(grads, entries, entry_grads)
    return grads
