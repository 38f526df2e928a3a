"""Differentiable texture-lookup mesh renderer (flat shading).

Geometry is rasterized with the same pinhole model as the splatting
rasterizer; pixels sample the texture bilinearly at interpolated UVs.
Gradients flow to texels only — geometry is frozen by design.
"""

from dataclasses import dataclass

import numpy as np

from . import _mesh_kernels as mk
from .gaussians import Camera
from .mesh import MeshFrame, _project_points

__all__ = ["MeshRaster", "render_textured", "texture_gradient"]


@dataclass
class MeshRaster:
    """Per-pixel rasterization buffers reused by the backward pass."""

    face_id: np.ndarray
    bary: np.ndarray
    uv_pix: np.ndarray   # (n_valid, 2) texel-space sample coordinates
    valid: np.ndarray    # (H, W) bool


def _bilinear_setup(res, coords):
    """Corner indices and weights for bilinear texel access.

    coords are texel-space positions (texel centers at +0.5).
    """
    g = np.clip(coords - 0.5, 0.0, res - 1.0)
    i0 = np.minimum(g.astype(np.int64), res - 2) if res > 1 else np.zeros(
        g.shape, dtype=np.int64)
    frac = g - i0
    return i0, frac


def rasterize(mesh: MeshFrame, uv, camera: Camera, texture_resolution):
    pts2d, z = _project_points(mesh.vertices, camera)
    face_id, bary, _ = mk.raster_faces(pts2d, z, mesh.faces,
                                       camera.width, camera.height)
    valid = face_id >= 0
    fi = face_id[valid]
    bc = bary[valid]
    uv_pix = np.einsum("nk,nkj->nj", bc, uv[fi]) * texture_resolution
    return MeshRaster(face_id, bary, uv_pix, valid)


def render_textured(mesh: MeshFrame, uv, texture, camera: Camera,
                    background=(1.0, 1.0, 1.0)):
    """Render the textured mesh; returns ``(image, raster)``.

    The raster buffers feed :func:`texture_gradient` for the same view.
    """
    res = texture.shape[0]
    raster = rasterize(mesh, uv, camera, res)
    image = np.tile(np.asarray(background, dtype=np.float64),
                    (camera.height, camera.width, 1))
    if raster.uv_pix.shape[0]:
        x0, fx = _bilinear_setup(res, raster.uv_pix[:, 0])
        y0, fy = _bilinear_setup(res, raster.uv_pix[:, 1])
        fx = fx[:, None]
        fy = fy[:, None]
        x1 = np.minimum(x0 + 1, res - 1)
        y1 = np.minimum(y0 + 1, res - 1)
        colors = (texture[y0, x0] * (1 - fx) * (1 - fy)
                  + texture[y0, x1] * fx * (1 - fy)
                  + texture[y1, x0] * (1 - fx) * fy
                  + texture[y1, x1] * fx * fy)
        image[raster.valid] = colors
    return image, raster


def texture_gradient(raster: MeshRaster, upstream, texture_resolution):
    """Scatter an upstream image into texel gradients (exact adjoint of the
    bilinear lookup in :func:`render_textured`)."""
    res = texture_resolution
    grad = np.zeros((res, res, 3))
    if raster.uv_pix.shape[0] == 0:
        return grad
    up = upstream[raster.valid]
    x0, fx = _bilinear_setup(res, raster.uv_pix[:, 0])
    y0, fy = _bilinear_setup(res, raster.uv_pix[:, 1])
    fx = fx[:, None]
    fy = fy[:, None]
    x1 = np.minimum(x0 + 1, res - 1)
    y1 = np.minimum(y0 + 1, res - 1)
    flat = grad.reshape(-1, 3)
    np.add.at(flat, y0 * res + x0, up * (1 - fx) * (1 - fy))
    np.add.at(flat, y0 * res + x1, up * fx * (1 - fy))
    np.add.at(flat, y1 * res + x0, up * (1 - fx) * fy)
    np.add.at(flat, y1 * res + x1, up * fx * fy)
    return grad
