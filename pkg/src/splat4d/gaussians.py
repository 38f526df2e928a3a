"""Scene types: static Gaussian clouds, per-timestamp deltas, pinhole cameras.

A cloud stores raw (unconstrained) parameters; activations are applied on
use: ``exp`` on log-scales, ``sigmoid`` on opacity logits, quaternion
normalization inside covariance construction. Colors are plain per-Gaussian
RGB (no spherical harmonics).
"""

from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "GaussianCloud",
    "GaussianDelta",
    "Camera",
    "apply_delta",
    "apply_delta_backward",
    "build_covariance",
    "quat_normalize",
    "quat_to_rotmat",
    "sigmoid",
    "inverse_sigmoid",
    "normalize_to_unit_box",
]


def _as_f64(a, shape_tail, name):
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1:] != shape_tail:
        raise ValueError(f"{name}: expected (N, {shape_tail[0]}) array, got {arr.shape}")
    return arr


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def inverse_sigmoid(p):
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class GaussianCloud:
    """Static scene of N anisotropic Gaussians.

    Attributes
    ----------
    positions : (N, 3) world-space centers.
    rotations : (N, 4) quaternions (w, x, y, z), stored unnormalized.
    log_scales : (N, 3) natural log of per-axis standard deviations.
    opacity_logits : (N, 1) opacity before sigmoid.
    colors : (N, 3) RGB in [0, 1].
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "positions", _as_f64(self.positions, (3,), "positions"))
        object.__setattr__(self, "rotations", _as_f64(self.rotations, (4,), "rotations"))
        object.__setattr__(self, "log_scales", _as_f64(self.log_scales, (3,), "log_scales"))
        object.__setattr__(
            self, "opacity_logits", _as_f64(self.opacity_logits, (1,), "opacity_logits")
        )
        object.__setattr__(self, "colors", _as_f64(self.colors, (3,), "colors"))
        n = self.positions.shape[0]
        if n < 1:
            raise ValueError("a cloud holds at least one Gaussian")
        for name in ("rotations", "log_scales", "opacity_logits", "colors"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} has {getattr(self, name).shape[0]} rows, expected {n}")
        if np.any(np.abs(self.rotations).sum(axis=1) == 0.0):
            raise ValueError("rotations contain an all-zero quaternion")

    def __len__(self):
        return self.positions.shape[0]

    @property
    def opacities(self):
        """sigmoid(opacity_logits), shape (N,)."""
        return sigmoid(self.opacity_logits[:, 0])

    @property
    def scales(self):
        """exp(log_scales), strictly positive."""
        return np.exp(self.log_scales)

    def copy(self):
        return GaussianCloud(
            self.positions.copy(),
            self.rotations.copy(),
            self.log_scales.copy(),
            self.opacity_logits.copy(),
            self.colors.copy(),
        )


@dataclass(frozen=True)
class GaussianDelta:
    """Additive deformation of positions, quaternions and log-scales.

    Opacity and color are never deformed.
    """

    d_position: np.ndarray
    d_rotation: np.ndarray
    d_log_scale: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "d_position", _as_f64(self.d_position, (3,), "d_position"))
        object.__setattr__(self, "d_rotation", _as_f64(self.d_rotation, (4,), "d_rotation"))
        object.__setattr__(self, "d_log_scale", _as_f64(self.d_log_scale, (3,), "d_log_scale"))
        n = self.d_position.shape[0]
        if self.d_rotation.shape[0] != n or self.d_log_scale.shape[0] != n:
            raise ValueError("delta components disagree on N")

    def __len__(self):
        return self.d_position.shape[0]

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)))


def quat_normalize(q):
    """Normalize quaternions row-wise. Input (N, 4) or (4,)."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / norm


def quat_to_rotmat(q):
    """Rotation matrices from quaternions (w, x, y, z); normalizes internally.

    Input (N, 4) -> (N, 3, 3); input (4,) -> (3, 3).
    """
    single = np.asarray(q).ndim == 1
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    q = quat_normalize(q)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def build_covariance(rotation, log_scale):
    """3x3 covariance R diag(exp(2*log_scale)) R^T from one quaternion.

    Always symmetric positive-definite; eigenvalues are exp(2*log_scale).
    """
    R = quat_to_rotmat(np.asarray(rotation, dtype=np.float64))
    s2 = np.exp(2.0 * np.asarray(log_scale, dtype=np.float64))
    cov = (R * s2[None, :]) @ R.T
    return 0.5 * (cov + cov.T)


def apply_delta(cloud: GaussianCloud, delta: GaussianDelta) -> GaussianCloud:
    """Deform a cloud: positions and log-scales add, quaternions add then
    renormalize. Opacity and color pass through untouched.

    Rows whose delta component is exactly zero are passed through
    bit-identically, so the zero delta is the exact identity.
    """
    if len(cloud) != len(delta):
        raise ValueError(f"cloud has {len(cloud)} Gaussians, delta has {len(delta)}")
    pos = np.where(np.any(delta.d_position != 0.0, axis=1, keepdims=True),
                   cloud.positions + delta.d_position, cloud.positions)
    ls = np.where(np.any(delta.d_log_scale != 0.0, axis=1, keepdims=True),
                  cloud.log_scales + delta.d_log_scale, cloud.log_scales)
    rot_moved = np.any(delta.d_rotation != 0.0, axis=1, keepdims=True)
    rot = np.where(rot_moved, quat_normalize(cloud.rotations + delta.d_rotation),
                   cloud.rotations)
    return GaussianCloud(pos, rot, ls, cloud.opacity_logits, cloud.colors)


def apply_delta_backward(cloud, delta, g_position, g_rotation, g_log_scale):
    """Reverse-mode step through :func:`apply_delta`.

    Given gradients w.r.t. the deformed cloud's stored parameters, returns
    ``(delta_grads, static_grads)`` as two dicts with keys
    ``position | rotation | log_scale``. The quaternion path chains through
    the renormalization of ``q + dq``.
    """
    v = cloud.rotations + delta.d_rotation
    norm = np.linalg.norm(v, axis=1, keepdims=True)
    u = v / norm
    # d normalize(v) / dv = (I - u u^T) / |v|
    g_v = (g_rotation - u * np.sum(u * g_rotation, axis=1, keepdims=True)) / norm
    delta_grads = {"position": g_position.copy(), "rotation": g_v, "log_scale": g_log_scale.copy()}
    static_grads = {"position": g_position.copy(), "rotation": g_v.copy(),
                    "log_scale": g_log_scale.copy()}
    return delta_grads, static_grads


@dataclass(frozen=True)
class Camera:
    """Pinhole orbit camera looking at the world origin.

    Azimuth/elevation in degrees; azimuth 0, elevation 0 puts the camera on
    the +z axis. Camera frame follows the OpenCV convention (x right,
    y down, z forward); pixel (i, j) has center (j + 0.5, i + 0.5).
    """

    azimuth: float
    elevation: float
    radius: float
    fov_y: float = 49.1
    width: int = 256
    height: int = 256
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        if not (0.0 < self.near < self.far):
            raise ValueError("camera requires 0 < near < far")
        if self.width < 1 or self.height < 1:
            raise ValueError("camera resolution must be at least 1x1")

    @property
    def position(self):
        az = np.radians(self.azimuth)
        el = np.radians(self.elevation)
        return self.radius * np.array(
            [np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)]
        )

    def world_to_camera(self):
        """Rotation (3, 3) and translation (3,): x_cam = R x_world + t."""
        eye = self.position
        fwd = -eye / np.linalg.norm(eye)
        up = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, up)
        n = np.linalg.norm(right)
        if n < 1e-8:
            # looking straight up/down; fall back to a z-aligned reference
            right = np.cross(fwd, np.array([0.0, 0.0, 1.0]))
            n = np.linalg.norm(right)
        right = right / n
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        t = -R @ eye
        return R, t

    @property
    def focal(self):
        """Focal length in pixels (square pixels, set by the vertical FOV)."""
        return 0.5 * self.height / np.tan(0.5 * np.radians(self.fov_y))

    @property
    def principal(self):
        return 0.5 * self.width, 0.5 * self.height

    def with_resolution(self, width, height):
        return replace(self, width=width, height=height)


def normalize_to_unit_box(cloud: GaussianCloud, margin: float = 0.05):
    """Recenter and isotropically rescale a cloud to fit inside [-1, 1]^3.

    Returns ``(cloud, center, scale)`` where
    ``new_positions = (old - center) / scale``; log-scales shift by
    ``-log(scale)`` so rendered shapes only change by the similarity.
    """
    lo = cloud.positions.min(axis=0)
    hi = cloud.positions.max(axis=0)
    center = 0.5 * (lo + hi)
    half = np.max(hi - lo) * 0.5
    scale = max(half / (1.0 - margin), 1e-12)
    moved = GaussianCloud(
        (cloud.positions - center) / scale,
        cloud.rotations,
        cloud.log_scales - np.log(scale),
        cloud.opacity_logits,
        cloud.colors,
    )
    return moved, center, scale
