"""Differentiable CPU splatting: forward render and exact reverse-mode pass.

The forward pass projects each Gaussian through the perspective EWA
approximation (3D covariance -> 2D screen covariance via the projection
Jacobian), depth-sorts front to back (ties broken by Gaussian index) and
alpha-composites per pixel with early termination. The backward pass
returns exact gradients of that computation for every Gaussian parameter;
Gaussians with no screen-space support get exactly zero gradient.
"""

from dataclasses import dataclass

import numpy as np

from . import _raster_kernels as kernels
from .gaussians import Camera, GaussianCloud, quat_to_rotmat

__all__ = ["RenderOutput", "RenderGradients", "render", "render_backward", "render_views"]


@dataclass(frozen=True)
class RenderOutput:
    """rgb (H, W, 3), alpha (H, W), per-pixel composited-splat counts."""

    rgb: np.ndarray
    alpha: np.ndarray
    per_pixel_contributor_count: np.ndarray


@dataclass(frozen=True)
class RenderGradients:
    """Gradients matching the shapes of the cloud's parameter arrays."""

    d_position: np.ndarray
    d_rotation: np.ndarray
    d_log_scale: np.ndarray
    d_opacity_logit: np.ndarray
    d_color: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)),
                   np.zeros((n, 1)), np.zeros((n, 3)))


@dataclass(frozen=True)
class _Splats:
    """Screen-space quantities for the depth-sorted visible subset."""

    index: np.ndarray      # into the original cloud
    cam_pos: np.ndarray    # (M, 3)
    mean2d: np.ndarray     # (M, 2)
    cov2d: np.ndarray      # (M, 2, 2), dilated
    conic: np.ndarray      # (M, 3): inverse covariance (a, b, c)
    bbox: np.ndarray       # (M, 4) int64 pixel ranges [x0, x1) x [y0, y1)
    opacity: np.ndarray    # (M,)
    color: np.ndarray      # (M, 3)
    # intermediates kept for the backward chain
    rot_mat: np.ndarray    # (M, 3, 3) from quaternions
    scale_sq: np.ndarray   # (M, 3) exp(2 log_scale)
    jacobian: np.ndarray   # (M, 2, 3)
    cam_rot: np.ndarray    # (3, 3) world->camera rotation


def _prepare(cloud: GaussianCloud, camera: Camera):
    R, t = camera.world_to_camera()
    cam = cloud.positions @ R.T + t
    z = cam[:, 2]
    visible = (z > camera.near) & (z < camera.far)
    idx = np.nonzero(visible)[0]
    if idx.size == 0:
        return None
    cam = cam[idx]
    z = cam[:, 2]
    order = np.argsort(z, kind="stable")
    idx = idx[order]
    cam = cam[order]
    z = cam[:, 2]

    f = camera.focal
    cx, cy = camera.principal
    mean2d = np.stack([f * cam[:, 0] / z + cx, f * cam[:, 1] / z + cy], axis=1)

    rot = quat_to_rotmat(cloud.rotations[idx])
    s2 = np.exp(2.0 * cloud.log_scales[idx])
    cov3 = np.einsum("nij,nj,nkj->nik", rot, s2, rot)
    cov_cam = np.einsum("ij,njk,lk->nil", R, cov3, R)

    J = np.zeros((idx.size, 2, 3))
    J[:, 0, 0] = f / z
    J[:, 0, 2] = -f * cam[:, 0] / (z * z)
    J[:, 1, 1] = f / z
    J[:, 1, 2] = -f * cam[:, 1] / (z * z)
    cov2d = np.einsum("nij,njk,nlk->nil", J, cov_cam, J)
    cov2d[:, 0, 0] += kernels.DILATION
    cov2d[:, 1, 1] += kernels.DILATION

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.stack(
        [cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1
    )

    # tight pixel ranges of the 3-sigma ellipse (max |dx| on m = 9 is 3 sqrt(cov_xx))
    rx = 3.0 * np.sqrt(cov2d[:, 0, 0]) + 1e-9
    ry = 3.0 * np.sqrt(cov2d[:, 1, 1]) + 1e-9
    x0 = np.clip(np.floor(mean2d[:, 0] - rx + 0.5).astype(np.int64), 0, camera.width)
    x1 = np.clip(np.floor(mean2d[:, 0] + rx - 0.5).astype(np.int64) + 1, 0, camera.width)
    y0 = np.clip(np.floor(mean2d[:, 1] - ry + 0.5).astype(np.int64), 0, camera.height)
    y1 = np.clip(np.floor(mean2d[:, 1] + ry - 0.5).astype(np.int64) + 1, 0, camera.height)
    bbox = np.stack([x0, x1, y0, y1], axis=1)

    opacity = 1.0 / (1.0 + np.exp(-cloud.opacity_logits[idx, 0]))
    color = np.ascontiguousarray(cloud.colors[idx])
    return _Splats(idx, cam, mean2d, cov2d, conic, bbox, opacity, color,
                   rot, s2, J, R)


def _background(background):
    bg = np.asarray(background, dtype=np.float64).reshape(-1)
    if bg.shape != (3,):
        raise ValueError("background must be an RGB 3-vector")
    return np.ascontiguousarray(bg)


def render(cloud: GaussianCloud, camera: Camera, background=(1.0, 1.0, 1.0)) -> RenderOutput:
    """Splat a cloud into an RGBA image over the given background."""
    bg = _background(background)
    splats = _prepare(cloud, camera)
    h, w = camera.height, camera.width
    if splats is None:
        return RenderOutput(np.tile(bg, (h, w, 1)), np.zeros((h, w)),
                            np.zeros((h, w), dtype=np.int32))
    rgb, alpha, count = kernels.composite_forward(
        w, h, splats.mean2d, splats.conic, splats.opacity, splats.color,
        splats.bbox, bg)
    return RenderOutput(rgb, alpha, count)


def render_views(cloud: GaussianCloud, cameras, background=(1.0, 1.0, 1.0)):
    """Render a batch of cameras; output order matches the input order."""
    return [render(cloud, cam, background) for cam in cameras]


_DR_DQ_SIGNS = None  # built lazily below


def _rotmat_quat_partials(q_unit):
    """dR/d(w,x,y,z) for unit quaternions, shape (M, 4, 3, 3)."""
    w, x, y, z = q_unit[:, 0], q_unit[:, 1], q_unit[:, 2], q_unit[:, 3]
    zero = np.zeros_like(w)
    dw = np.stack([zero, -z, y, z, zero, -x, -y, x, zero], axis=1)
    dx = np.stack([zero, y, z, y, -2 * x, -w, z, w, -2 * x], axis=1)
    dy = np.stack([-2 * y, x, w, x, zero, z, -w, z, -2 * y], axis=1)
    dz = np.stack([-2 * z, -w, x, w, -2 * z, y, x, y, zero], axis=1)
    out = np.stack([dw, dx, dy, dz], axis=1).reshape(-1, 4, 3, 3)
    return 2.0 * out


def render_backward(cloud: GaussianCloud, camera: Camera, background,
                    upstream_grad: np.ndarray) -> RenderGradients:
    """Exact gradients of ``sum(upstream_grad * render(...).rgb)``.

    ``upstream_grad`` must be (H, W, 3). Matches central finite differences
    of the forward pass (the 3-sigma taper keeps the support differentiable).
    """
    upstream = np.ascontiguousarray(upstream_grad, dtype=np.float64)
    if upstream.shape != (camera.height, camera.width, 3):
        raise ValueError(
            f"upstream gradient shape {upstream.shape} does not match "
            f"render target {(camera.height, camera.width, 3)}")
    bg = _background(background)
    n = len(cloud)
    splats = _prepare(cloud, camera)
    if splats is None:
        return RenderGradients.zeros(n)

    raw = kernels.composite_backward(
        camera.width, camera.height, splats.mean2d, splats.conic,
        splats.opacity, splats.color, splats.bbox, bg, upstream)

    g_color = raw[:, 0:3]
    g_op_act = raw[:, 3]
    g_conic = np.empty((raw.shape[0], 2, 2))
    g_conic[:, 0, 0] = raw[:, 4]
    g_conic[:, 0, 1] = raw[:, 5]
    g_conic[:, 1, 0] = raw[:, 5]
    g_conic[:, 1, 1] = raw[:, 6]
    g_mean = raw[:, 7:9]

    # conic = cov2d^{-1}  =>  dL/dcov2d = -conic dL/dconic conic
    A = np.empty_like(g_conic)
    A[:, 0, 0] = splats.conic[:, 0]
    A[:, 0, 1] = splats.conic[:, 1]
    A[:, 1, 0] = splats.conic[:, 1]
    A[:, 1, 1] = splats.conic[:, 2]
    g_cov2d = -np.einsum("nij,njk,nkl->nil", A, g_conic, A)

    J = splats.jacobian
    R = splats.cam_rot
    cov_cam = np.einsum("ij,njk,lk->nil", R, np.einsum(
        "nij,nj,nkj->nik", splats.rot_mat, splats.scale_sq, splats.rot_mat), R)

    # cov2d = J cov_cam J^T + dilation
    g_J = 2.0 * np.einsum("nij,njk,nkl->nil", g_cov2d, J, cov_cam)
    g_cov_cam = np.einsum("nji,njk,nkl->nil", J, g_cov2d, J)
    g_cov3 = np.einsum("ji,njk,kl->nil", R, g_cov_cam, R)

    # projection: mean2d = (f tx/tz + cx, f ty/tz + cy); J depends on t too
    f = camera.focal
    tx, ty, tz = splats.cam_pos[:, 0], splats.cam_pos[:, 1], splats.cam_pos[:, 2]
    inv_z = 1.0 / tz
    inv_z2 = inv_z * inv_z
    g_t = np.zeros((raw.shape[0], 3))
    g_t[:, 0] = g_mean[:, 0] * f * inv_z - g_J[:, 0, 2] * f * inv_z2
    g_t[:, 1] = g_mean[:, 1] * f * inv_z - g_J[:, 1, 2] * f * inv_z2
    g_t[:, 2] = (-g_mean[:, 0] * f * tx * inv_z2 - g_mean[:, 1] * f * ty * inv_z2
                 - g_J[:, 0, 0] * f * inv_z2 - g_J[:, 1, 1] * f * inv_z2
                 + 2.0 * f * inv_z2 * inv_z * (g_J[:, 0, 2] * tx + g_J[:, 1, 2] * ty))
    g_pos = g_t @ R  # t = R x + const

    # cov3 = Rq diag(s2) Rq^T
    Rq = splats.rot_mat
    g_Rq = 2.0 * np.einsum("nij,njk,nk->nik", g_cov3, Rq, splats.scale_sq)
    g_s2 = np.einsum("nji,njk,nki->ni", Rq, g_cov3, Rq)
    g_log_scale = g_s2 * 2.0 * splats.scale_sq

    q = cloud.rotations[splats.index]
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    q_unit = q / norm
    dR_dq = _rotmat_quat_partials(q_unit)
    g_q_unit = np.einsum("nqij,nij->nq", dR_dq, g_Rq)
    g_q = (g_q_unit - q_unit * np.sum(q_unit * g_q_unit, axis=1, keepdims=True)) / norm

    op = splats.opacity
    g_logit = g_op_act * op * (1.0 - op)

    out = RenderGradients.zeros(n)
    out.d_position[splats.index] = g_pos
    out.d_rotation[splats.index] = g_q
    out.d_log_scale[splats.index] = g_log_scale
    out.d_opacity_logit[splats.index, 0] = g_logit
    out.d_color[splats.index] = g_color
    return out
