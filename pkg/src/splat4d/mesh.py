"""Mesh export of a fitted scene: density grid, marching cubes, dominant-
axis UV atlas and multi-view color back-projection.

Per-frame meshes share topology when advecting the base mesh through the
deformation field keeps it sane (flipped-normal fraction <= 5%); otherwise
each frame is extracted independently.
"""

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import ndimage
from skimage import measure

from . import _mesh_kernels as mk
from .gaussians import Camera, GaussianCloud, quat_to_rotmat
from .rasterizer import render

__all__ = [
    "DensityGrid",
    "OrbitTrajectory",
    "MeshFrame",
    "TexturedMeshSequence",
    "build_density_grid",
    "marching_cubes",
    "unwrap_uv",
    "backproject_colors",
    "extract_mesh",
    "extract_mesh_sequence",
]


@dataclass
class DensityGrid:
    """Accumulated opacity density sampled at G^3 voxel centers."""

    values: np.ndarray           # (G, G, G)
    bounds: tuple                # ((lo,lo,lo), (hi,hi,hi)), a cube
    resolution: int

    @property
    def voxel_size(self):
        lo, hi = self.bounds
        return (hi[0] - lo[0]) / self.resolution

    def voxel_center(self, i, j, k):
        lo, _ = self.bounds
        h = self.voxel_size
        return np.array([lo[0] + (i + 0.5) * h, lo[1] + (j + 0.5) * h,
                         lo[2] + (k + 0.5) * h])


@dataclass(frozen=True)
class OrbitTrajectory:
    """Constant-speed horizontal orbit at zero elevation."""

    frame_count: int
    start_azimuth: float
    radius: float = 1.5
    fov_y: float = 49.1
    width: int = 256
    height: int = 256
    elevation: float = 0.0
    sweep_degrees: float = 360.0

    def cameras(self):
        step = self.sweep_degrees / self.frame_count
        return [Camera(self.start_azimuth + i * step, self.elevation, self.radius,
                       self.fov_y, self.width, self.height)
                for i in range(self.frame_count)]

    def times(self):
        return np.linspace(0.0, 1.0, self.frame_count)


@dataclass
class MeshFrame:
    vertices: np.ndarray    # (V, 3)
    faces: np.ndarray       # (F, 3) int

    def face_normals(self):
        v = self.vertices
        f = self.faces
        n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        lens = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.maximum(lens, 1e-12)


@dataclass
class TexturedMeshSequence:
    """Per-frame meshes with per-corner UVs and trainable texture maps.

    With shared topology all frames reference the same ``uv`` array and, by
    default, the same texture array object — joint refinement then keeps
    frames' textures identical by construction.
    """

    frames: list
    uv: np.ndarray            # (F, 3, 2) per-corner UVs in [0, 1]^2
    textures: list            # T arrays (R, R, 3); may alias one object
    shared_topology: bool = True
    texel_face: np.ndarray | None = None
    texel_bary: np.ndarray | None = None

    def __len__(self):
        return len(self.frames)

    @property
    def texture_resolution(self):
        return self.textures[0].shape[0]

    def share_texture(self):
        """Alias all frames to frame 0's texture map (the V2V tie)."""
        self.textures = [self.textures[0]] * len(self.frames)
        return self

    def split_textures(self):
        """Give every frame an independent copy (the I2I baseline)."""
        self.textures = [self.textures[0].copy() for _ in self.frames]
        return self


def build_density_grid(cloud: GaussianCloud, resolution=128, bounds=None) -> DensityGrid:
    """Accumulate sigmoid(opacity) * Gaussian kernel at voxel centers.

    Each Gaussian touches only voxels within its 3-sigma ellipsoid.
    """
    if bounds is None:
        bounds = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    h = (hi[0] - lo[0]) / resolution
    rot = quat_to_rotmat(cloud.rotations)
    inv_s2 = np.exp(-2.0 * cloud.log_scales)
    inv_cov = np.einsum("nij,nj,nkj->nik", rot, inv_s2, rot)
    cov_diag = np.einsum("nij,nj,nij->ni", rot, np.exp(2.0 * cloud.log_scales), rot)
    radii = 3.0 * np.sqrt(cov_diag) + 1e-9

    centers = cloud.positions
    vbox = np.empty((len(cloud), 6), dtype=np.int64)
    for axis in range(3):
        lo_idx = np.floor((centers[:, axis] - radii[:, axis] - lo[axis]) / h - 0.5)
        hi_idx = np.floor((centers[:, axis] + radii[:, axis] - lo[axis]) / h - 0.5) + 1
        vbox[:, 2 * axis] = np.clip(lo_idx, 0, resolution).astype(np.int64)
        vbox[:, 2 * axis + 1] = np.clip(hi_idx, 0, resolution).astype(np.int64)

    values = np.zeros((resolution, resolution, resolution))
    mk.accumulate_density(centers, inv_cov, cloud.opacities, vbox, lo, h, values)
    return DensityGrid(values, (tuple(lo), tuple(hi)), resolution)


def marching_cubes(grid: DensityGrid, iso=1.0) -> MeshFrame:
    """Triangulate the iso-surface of the density grid.

    Returns an empty mesh (never an error) when the iso level misses the
    value range. Vertices come out in world coordinates.
    """
    values = grid.values
    if not (values.min() < iso < values.max()):
        return MeshFrame(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    h = grid.voxel_size
    verts, faces, _, _ = measure.marching_cubes(values, level=iso, spacing=(h, h, h))
    lo = np.asarray(grid.bounds[0])
    verts = verts + lo + 0.5 * h  # samples sit at voxel centers
    return MeshFrame(np.asarray(verts, dtype=np.float64),
                     np.asarray(faces, dtype=np.int64))


_AXIS_CHARTS = ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0))
# chart layout: 3 columns x 2 rows; chart c covers axis c//2, sign c%2


def unwrap_uv(mesh: MeshFrame, gutter_texels=4, texture_resolution=1024):
    """Per-corner UVs by 6-way dominant-axis projection.

    Faces are clustered by the dominant axis and sign of their normal and
    projected onto the remaining two axes; the six charts pack into a 3x2
    atlas with a gutter. Degenerate faces are skipped and reported.

    Returns ``(uv, degenerate_face_indices)`` with uv of shape (F, 3, 2).
    """
    v, f = mesh.vertices, mesh.faces
    uv = np.zeros((f.shape[0], 3, 2))
    if f.shape[0] == 0:
        return uv, []
    normals = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    lens = np.linalg.norm(normals, axis=1)
    degenerate = np.nonzero(lens == 0.0)[0]
    dominant = np.argmax(np.abs(normals), axis=1)
    sign = (normals[np.arange(f.shape[0]), dominant] < 0).astype(np.int64)
    chart = dominant * 2 + sign

    gutter = gutter_texels / texture_resolution
    cell_w, cell_h = 1.0 / 3.0, 1.0 / 2.0
    for c in range(6):
        mask = (chart == c) & (lens > 0.0)
        if not np.any(mask):
            continue
        axis = c // 2
        u_axis, v_axis = [a for a in range(3) if a != axis]
        pts = v[f[mask]][:, :, [u_axis, v_axis]]  # (Fc, 3, 2)
        lo = pts.reshape(-1, 2).min(axis=0)
        hi = pts.reshape(-1, 2).max(axis=0)
        span = np.maximum(hi - lo, 1e-12)
        local = (pts - lo) / span  # [0, 1]^2 chart-local
        col, row = c % 3, c // 3
        origin = np.array([col * cell_w + gutter, row * cell_h + gutter])
        extent = np.array([cell_w - 2 * gutter, cell_h - 2 * gutter])
        uv[mask] = origin + local * extent
    return uv, list(degenerate)


def _project_points(points, camera: Camera):
    R, t = camera.world_to_camera()
    cam = points @ R.T + t
    z = cam[:, 2]
    f = camera.focal
    cx, cy = camera.principal
    safe_z = np.where(z > 1e-9, z, 1e-9)
    return np.stack([f * cam[:, 0] / safe_z + cx, f * cam[:, 1] / safe_z + cy],
                    axis=1), z


def texel_map(mesh: MeshFrame, uv, resolution):
    """Texel -> (face, barycentric) lookup for a UV-unwrapped mesh."""
    return mk.raster_uv(uv, resolution)


def _bilinear_sample(image, x, y):
    """Sample (H, W, C) at continuous pixel coords (pixel centers at +0.5)."""
    h, w = image.shape[:2]
    gx = np.clip(x - 0.5, 0.0, w - 1.0)
    gy = np.clip(y - 0.5, 0.0, h - 1.0)
    x0 = np.minimum(gx.astype(np.int64), w - 2) if w > 1 else np.zeros_like(gx, dtype=np.int64)
    y0 = np.minimum(gy.astype(np.int64), h - 2) if h > 1 else np.zeros_like(gy, dtype=np.int64)
    fx = (gx - x0)[:, None]
    fy = (gy - y0)[:, None]
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return (image[y0, x0] * (1 - fx) * (1 - fy) + image[y0, x1] * fx * (1 - fy)
            + image[y1, x0] * (1 - fx) * fy + image[y1, x1] * fx * fy)


def default_backprojection_views(radius, fov_y=49.1, width=256, height=256,
                                 azimuths=8, elevations=(-30.0, 30.0)):
    cams = []
    for el in elevations:
        for k in range(azimuths):
            cams.append(Camera(-180.0 + k * 360.0 / azimuths, el, radius,
                               fov_y, width, height))
    return cams


def backproject_colors(mesh: MeshFrame, uv, scene_render_fn, views,
                       texture_resolution=1024, background=(1.0, 1.0, 1.0),
                       depth_tolerance=2.0):
    """Bake a texture by averaging scene renders seen by each texel.

    ``scene_render_fn(camera) -> (H, W, 3)`` supplies the scene's
    appearance (typically the Gaussian render). Texel weights are the
    cosine between the face normal and the view direction; occlusion is
    tested against the mesh's own z-buffer with a tolerance measured in
    voxel-sized world units. Unseen texels fill by nearest-texel dilation.

    Returns ``(texture, texel_face, texel_bary)``.
    """
    res = texture_resolution
    face_id, bary = texel_map(mesh, uv, res)
    valid = face_id >= 0
    fi = face_id[valid]
    bc = bary[valid]
    pos = np.einsum("nk,nkj->nj", bc, mesh.vertices[mesh.faces[fi]])
    normals = mesh.face_normals()[fi]

    accum = np.zeros((pos.shape[0], 3))
    weight = np.zeros(pos.shape[0])
    for camera in views:
        color_img = scene_render_fn(camera)
        pts2d, vz = _project_points(mesh.vertices, camera)
        zb_face, _, zbuf = mk.raster_faces(pts2d, vz, mesh.faces,
                                           camera.width, camera.height)
        tex2d, tz = _project_points(pos, camera)
        eye = camera.position
        to_cam = eye - pos
        to_cam /= np.maximum(np.linalg.norm(to_cam, axis=1, keepdims=True), 1e-12)
        cosine = np.einsum("nj,nj->n", normals, to_cam)
        px = np.clip(tex2d[:, 0].astype(np.int64), 0, camera.width - 1)
        py = np.clip(tex2d[:, 1].astype(np.int64), 0, camera.height - 1)
        inside = ((tex2d[:, 0] >= 0) & (tex2d[:, 0] < camera.width)
                  & (tex2d[:, 1] >= 0) & (tex2d[:, 1] < camera.height)
                  & (tz > camera.near))
        h = depth_tolerance * _mean_edge_length(mesh)
        visible = inside & (np.abs(cosine) > 1e-3) & (tz <= zbuf[py, px] + h)
        w = np.where(visible, np.abs(cosine), 0.0)
        samples = _bilinear_sample(color_img, tex2d[:, 0], tex2d[:, 1])
        accum += w[:, None] * samples
        weight += w

    texture = np.full((res, res, 3), 0.5)
    baked = weight > 0
    flat = np.zeros((pos.shape[0], 3))
    flat[baked] = accum[baked] / weight[baked, None]
    covered = np.zeros((res, res), dtype=bool)
    covered[valid] = baked
    texture[valid] = flat

    # nearest-texel dilation for texels never seen (and the gutter ring)
    if covered.any():
        _, (iy, ix) = ndimage.distance_transform_edt(~covered, return_indices=True)
        texture = texture[iy, ix]
    return texture, face_id, bary


def _mean_edge_length(mesh: MeshFrame):
    v, f = mesh.vertices, mesh.faces
    if f.shape[0] == 0:
        return 0.0
    e = np.concatenate([v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 1]],
                        v[f[:, 0]] - v[f[:, 2]]])
    return float(np.mean(np.linalg.norm(e, axis=1)))


def extract_mesh(cloud: GaussianCloud, resolution=128, iso=1.0, bounds=None) -> MeshFrame:
    grid = build_density_grid(cloud, resolution, bounds)
    return marching_cubes(grid, iso)


def _advect(mesh: MeshFrame, field, decoder, tau):
    from .hexplane import query

    feats = query(field, mesh.vertices, tau)
    out, _ = decoder.forward(feats)
    return MeshFrame(mesh.vertices + out["position"], mesh.faces)


def extract_mesh_sequence(cloud: GaussianCloud, field, decoder, times,
                          resolution=128, iso=1.0, bounds=None,
                          flipped_normal_limit=0.05):
    """Per-frame meshes: advect the base mesh through the deformation when
    that keeps it intact, else re-extract each frame independently.

    Returns ``(frames, shared_topology)``.
    """
    from .hexplane import deform

    base = extract_mesh(deform(cloud, field, decoder, float(times[0])),
                        resolution, iso, bounds)
    frames = [base]
    shared = base.faces.shape[0] > 0
    base_normals = base.face_normals()
    for tau in list(times)[1:]:
        advected = _advect(base, field, decoder, float(tau))
        if shared:
            flipped = np.einsum("nj,nj->n", advected.face_normals(), base_normals) < 0
            if flipped.mean() > flipped_normal_limit:
                shared = False
        frames.append(advected)
    if not shared:
        frames = [extract_mesh(deform(cloud, field, decoder, float(t)),
                               resolution, iso, bounds) for t in times]
    return frames, shared
