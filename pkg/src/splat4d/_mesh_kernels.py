"""Hot loops for mesh export: density-grid accumulation, z-buffered
triangle rasterization and UV-space texel rasterization.

Same backend contract as the splatting kernels: numba by default, numpy
fallback via the env flag. The density kernel parallelizes over z-slabs
(each voxel is owned by one thread and sums Gaussians in index order);
triangle rasterization is serial over faces with a strict depth test, so
ties go to the lower face index.
"""

import numpy as np

from . import backend
from .backend import njit, prange

DENSITY_SUPPORT_M = 9.0  # 3-sigma truncation, matching the splat footprint


@njit(cache=True, parallel=True)
def _density_slabs(positions, inv_cov, weights, vbox, origin, step, values):
    gz = values.shape[2]
    n = positions.shape[0]
    for iz in prange(gz):
        z = origin[2] + (iz + 0.5) * step
        for g in range(n):
            if iz < vbox[g, 4] or iz >= vbox[g, 5]:
                continue
            dz = z - positions[g, 2]
            for ix in range(vbox[g, 0], vbox[g, 1]):
                dx = origin[0] + (ix + 0.5) * step - positions[g, 0]
                for iy in range(vbox[g, 2], vbox[g, 3]):
                    dy = origin[1] + (iy + 0.5) * step - positions[g, 1]
                    m = (inv_cov[g, 0, 0] * dx * dx + inv_cov[g, 1, 1] * dy * dy
                         + inv_cov[g, 2, 2] * dz * dz
                         + 2.0 * (inv_cov[g, 0, 1] * dx * dy
                                  + inv_cov[g, 0, 2] * dx * dz
                                  + inv_cov[g, 1, 2] * dy * dz))
                    if m < DENSITY_SUPPORT_M:
                        values[ix, iy, iz] += weights[g] * np.exp(-0.5 * m)


def _density_np(positions, inv_cov, weights, vbox, origin, step, values):
    g_count = positions.shape[0]
    for g in range(g_count):
        x0, x1, y0, y1, z0, z1 = vbox[g]
        if x1 <= x0 or y1 <= y0 or z1 <= z0:
            continue
        xs = origin[0] + (np.arange(x0, x1) + 0.5) * step - positions[g, 0]
        ys = origin[1] + (np.arange(y0, y1) + 0.5) * step - positions[g, 1]
        zs = origin[2] + (np.arange(z0, z1) + 0.5) * step - positions[g, 2]
        dx = xs[:, None, None]
        dy = ys[None, :, None]
        dz = zs[None, None, :]
        ic = inv_cov[g]
        m = (ic[0, 0] * dx * dx + ic[1, 1] * dy * dy + ic[2, 2] * dz * dz
             + 2.0 * (ic[0, 1] * dx * dy + ic[0, 2] * dx * dz + ic[1, 2] * dy * dz))
        values[x0:x1, y0:y1, z0:z1] += np.where(
            m < DENSITY_SUPPORT_M, weights[g] * np.exp(-0.5 * m), 0.0)


def accumulate_density(positions, inv_cov, weights, vbox, origin, step, values):
    if backend.numba_enabled():
        _density_slabs(positions, inv_cov, weights, vbox, origin, step, values)
    else:
        _density_np(positions, inv_cov, weights, vbox, origin, step, values)


@njit(cache=True)
def _raster_faces(pts2d, z, faces, width, height, face_id, bary, depth):
    """Z-buffered triangle fill with perspective-correct barycentrics.

    pts2d are pixel coordinates of the projected vertices, z their
    camera-space depths (positive in front). Faces with any vertex at
    non-positive depth are skipped.
    """
    for f in range(faces.shape[0]):
        ia, ib, ic = faces[f, 0], faces[f, 1], faces[f, 2]
        za, zb, zc = z[ia], z[ib], z[ic]
        if za <= 0.0 or zb <= 0.0 or zc <= 0.0:
            continue
        ax, ay = pts2d[ia, 0], pts2d[ia, 1]
        bx, by = pts2d[ib, 0], pts2d[ib, 1]
        cx, cy = pts2d[ic, 0], pts2d[ic, 1]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area == 0.0:
            continue
        x0 = max(0, int(np.floor(min(ax, bx, cx) - 0.5)))
        x1 = min(width - 1, int(np.ceil(max(ax, bx, cx) - 0.5)))
        y0 = max(0, int(np.floor(min(ay, by, cy) - 0.5)))
        y1 = min(height - 1, int(np.ceil(max(ay, by, cy) - 0.5)))
        inv_area = 1.0 / area
        for py in range(y0, y1 + 1):
            sy = py + 0.5
            for px in range(x0, x1 + 1):
                sx = px + 0.5
                wa = ((bx - sx) * (cy - sy) - (by - sy) * (cx - sx)) * inv_area
                wb = ((cx - sx) * (ay - sy) - (cy - sy) * (ax - sx)) * inv_area
                wc = 1.0 - wa - wb
                if wa < 0.0 or wb < 0.0 or wc < 0.0:
                    continue
                denom = wa / za + wb / zb + wc / zc
                zp = 1.0 / denom
                if zp < depth[py, px]:
                    depth[py, px] = zp
                    face_id[py, px] = f
                    bary[py, px, 0] = (wa / za) * zp
                    bary[py, px, 1] = (wb / zb) * zp
                    bary[py, px, 2] = (wc / zc) * zp


def _raster_faces_np(pts2d, z, faces, width, height, face_id, bary, depth):
    for f in range(faces.shape[0]):
        ia, ib, ic = faces[f]
        za, zb, zc = z[ia], z[ib], z[ic]
        if za <= 0.0 or zb <= 0.0 or zc <= 0.0:
            continue
        (ax, ay), (bx, by), (cx, cy) = pts2d[ia], pts2d[ib], pts2d[ic]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area == 0.0:
            continue
        x0 = max(0, int(np.floor(min(ax, bx, cx) - 0.5)))
        x1 = min(width - 1, int(np.ceil(max(ax, bx, cx) - 0.5)))
        y0 = max(0, int(np.floor(min(ay, by, cy) - 0.5)))
        y1 = min(height - 1, int(np.ceil(max(ay, by, cy) - 0.5)))
        if x1 < x0 or y1 < y0:
            continue
        sx = np.arange(x0, x1 + 1) + 0.5
        sy = (np.arange(y0, y1 + 1) + 0.5)[:, None]
        wa = ((bx - sx) * (cy - sy) - (by - sy) * (cx - sx)) / area
        wb = ((cx - sx) * (ay - sy) - (cy - sy) * (ax - sx)) / area
        wc = 1.0 - wa - wb
        inside = (wa >= 0) & (wb >= 0) & (wc >= 0)
        denom = wa / za + wb / zb + wc / zc
        with np.errstate(divide="ignore"):
            zp = np.where(inside, 1.0 / denom, np.inf)
        closer = inside & (zp < depth[y0:y1 + 1, x0:x1 + 1])
        sub = depth[y0:y1 + 1, x0:x1 + 1]
        sub[closer] = zp[closer]
        face_id[y0:y1 + 1, x0:x1 + 1][closer] = f
        for k, (wk, zk) in enumerate(((wa, za), (wb, zb), (wc, zc))):
            chan = bary[y0:y1 + 1, x0:x1 + 1, k]
            chan[closer] = ((wk / zk) * zp)[closer]


def raster_faces(pts2d, z, faces, width, height):
    """Rasterize a projected mesh; returns (face_id, bary, depth)."""
    face_id = np.full((height, width), -1, dtype=np.int32)
    bary = np.zeros((height, width, 3))
    depth = np.full((height, width), np.inf)
    if faces.shape[0]:
        if backend.numba_enabled():
            _raster_faces(pts2d, z, np.ascontiguousarray(faces, dtype=np.int64),
                          width, height, face_id, bary, depth)
        else:
            _raster_faces_np(pts2d, z, faces, width, height, face_id, bary, depth)
    return face_id, bary, depth


@njit(cache=True)
def _raster_uv(uv, res, face_id, bary):
    """Fill the texel -> (face, barycentric) map from per-corner UVs."""
    for f in range(uv.shape[0]):
        ax, ay = uv[f, 0, 0] * res, uv[f, 0, 1] * res
        bx, by = uv[f, 1, 0] * res, uv[f, 1, 1] * res
        cx, cy = uv[f, 2, 0] * res, uv[f, 2, 1] * res
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area == 0.0:
            continue
        x0 = max(0, int(np.floor(min(ax, bx, cx) - 0.5)))
        x1 = min(res - 1, int(np.ceil(max(ax, bx, cx) - 0.5)))
        y0 = max(0, int(np.floor(min(ay, by, cy) - 0.5)))
        y1 = min(res - 1, int(np.ceil(max(ay, by, cy) - 0.5)))
        inv_area = 1.0 / area
        for py in range(y0, y1 + 1):
            sy = py + 0.5
            for px in range(x0, x1 + 1):
                sx = px + 0.5
                wa = ((bx - sx) * (cy - sy) - (by - sy) * (cx - sx)) * inv_area
                wb = ((cx - sx) * (ay - sy) - (cy - sy) * (ax - sx)) * inv_area
                wc = 1.0 - wa - wb
                if wa < 0.0 or wb < 0.0 or wc < 0.0:
                    continue
                face_id[py, px] = f
                bary[py, px, 0] = wa
                bary[py, px, 1] = wb
                bary[py, px, 2] = wc


def _raster_uv_np(uv, res, face_id, bary):
    for f in range(uv.shape[0]):
        (ax, ay), (bx, by), (cx, cy) = uv[f] * res
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area == 0.0:
            continue
        x0 = max(0, int(np.floor(min(ax, bx, cx) - 0.5)))
        x1 = min(res - 1, int(np.ceil(max(ax, bx, cx) - 0.5)))
        y0 = max(0, int(np.floor(min(ay, by, cy) - 0.5)))
        y1 = min(res - 1, int(np.ceil(max(ay, by, cy) - 0.5)))
        if x1 < x0 or y1 < y0:
            continue
        sx = np.arange(x0, x1 + 1) + 0.5
        sy = (np.arange(y0, y1 + 1) + 0.5)[:, None]
        wa = ((bx - sx) * (cy - sy) - (by - sy) * (cx - sx)) / area
        wb = ((cx - sx) * (ay - sy) - (cy - sy) * (ax - sx)) / area
        wc = 1.0 - wa - wb
        inside = (wa >= 0) & (wb >= 0) & (wc >= 0)
        face_id[y0:y1 + 1, x0:x1 + 1][inside] = f
        for k, wk in enumerate((wa, wb, wc)):
            chan = bary[y0:y1 + 1, x0:x1 + 1, k]
            arr = np.broadcast_to(wk, inside.shape)
            chan[inside] = arr[inside]


def raster_uv(uv, res):
    """Texel map of UV triangles; returns (face_id, bary)."""
    face_id = np.full((res, res), -1, dtype=np.int32)
    bary = np.zeros((res, res, 3))
    if uv.shape[0]:
        if backend.numba_enabled():
            _raster_uv(np.ascontiguousarray(uv, dtype=np.float64), res, face_id, bary)
        else:
            _raster_uv_np(uv, res, face_id, bary)
    return face_id, bary
