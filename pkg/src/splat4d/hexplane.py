"""Factorized space-time deformation field and its zero-initialized decoder.

Six 2D feature planes (three spatial-pair planes, three space-time planes)
are bilinearly interpolated at (x, y, z, tau) and fused by element-wise
product; a small residual MLP decodes the fused feature into per-Gaussian
position / rotation / scale deltas. The decoder's head layers start at
exactly zero, so a fresh model deforms nothing.
"""

from dataclasses import dataclass, field as dc_field

import numpy as np

from .gaussians import GaussianCloud, GaussianDelta, apply_delta

__all__ = ["HexPlaneField", "DeformDecoder", "query", "deform", "query_gradients"]

# (name, first axis, second axis); axis 3 is time
PLANE_AXES = (
    ("xy", 0, 1),
    ("xz", 0, 2),
    ("yz", 1, 2),
    ("xt", 0, 3),
    ("yt", 1, 3),
    ("zt", 2, 3),
)


@dataclass
class HexPlaneField:
    """Six feature planes over an axis-aligned space-time box.

    Spatial planes are (S, S, F); space-time planes are (S, T, F). Queries
    outside the box are clamped to the boundary. Planes initialize to small
    values around 1 so their product is well-scaled.
    """

    spatial_resolution: int = 32
    temporal_resolution: int = 32
    feature_dim: int = 32
    spatial_bounds: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    time_bounds: tuple = (0.0, 1.0)
    planes: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if self.spatial_resolution < 2 or self.temporal_resolution < 2:
            raise ValueError("plane resolutions must be at least 2")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        if not self.planes:
            s, t, f = self.spatial_resolution, self.temporal_resolution, self.feature_dim
            for name, _, ax_b in PLANE_AXES:
                rb = t if ax_b == 3 else s
                self.planes[name] = np.ones((s, rb, f))

    def init_random(self, rng, low=0.9, high=1.1):
        for name in self.planes:
            self.planes[name] = rng.uniform(low, high, self.planes[name].shape)
        return self

    def axis_bounds(self, axis):
        if axis == 3:
            return self.time_bounds
        return self.spatial_bounds[0][axis], self.spatial_bounds[1][axis]

    def grid_coords(self, axis, values):
        """Continuous grid coordinates plus an in-domain mask for that axis."""
        lo, hi = self.axis_bounds(axis)
        res = self.temporal_resolution if axis == 3 else self.spatial_resolution
        raw = (values - lo) / (hi - lo) * (res - 1)
        interior = (raw > 0.0) & (raw < res - 1)
        return np.clip(raw, 0.0, res - 1), interior


def _interp_plane(plane, ga, gb):
    """Bilinear interpolation of one plane at continuous grid coords.

    Returns (values (N, F), cache) where cache holds corner indices and
    fractions for the backward pass.
    """
    ra, rb = plane.shape[0], plane.shape[1]
    i0 = np.minimum(ga.astype(np.int64), ra - 2)
    j0 = np.minimum(gb.astype(np.int64), rb - 2)
    fa = (ga - i0)[:, None]
    fb = (gb - j0)[:, None]
    f00 = plane[i0, j0]
    f10 = plane[i0 + 1, j0]
    f01 = plane[i0, j0 + 1]
    f11 = plane[i0 + 1, j0 + 1]
    val = (f00 * (1 - fa) * (1 - fb) + f10 * fa * (1 - fb)
           + f01 * (1 - fa) * fb + f11 * fa * fb)
    return val, (i0, j0, fa, fb, f00, f10, f01, f11)


def _plane_coords(field, positions, tau):
    """Per-plane grid coordinates for a batch of positions at one time."""
    n = positions.shape[0]
    coords = {}
    masks = {}
    for axis in range(3):
        coords[axis], masks[axis] = field.grid_coords(axis, positions[:, axis])
    gt, mt = field.grid_coords(3, np.full(n, float(tau)))
    coords[3], masks[3] = gt, mt
    return coords, masks


def query(field: HexPlaneField, positions, tau):
    """Fused feature vectors at (x, y, z, tau); positions (N, 3) -> (N, F)."""
    positions = np.asarray(positions, dtype=np.float64)
    coords, _ = _plane_coords(field, positions, tau)
    fused = None
    for name, ax_a, ax_b in PLANE_AXES:
        val, _ = _interp_plane(field.planes[name], coords[ax_a], coords[ax_b])
        fused = val if fused is None else fused * val
    return fused


@dataclass
class DeformDecoder:
    """Residual MLP mapping fused features to (d_position, d_rotation, d_log_scale).

    Two tanh hidden layers with a residual skip on the second; three linear
    heads whose weights and biases start at exactly zero, making the fresh
    decoder the identity deformation.
    """

    feature_dim: int = 32
    hidden_dim: int = 64
    params: dict = dc_field(default_factory=dict)

    HEADS = (("position", 3), ("rotation", 4), ("log_scale", 3))

    def __post_init__(self):
        if not self.params:
            self.params = {
                "w1": np.zeros((self.feature_dim, self.hidden_dim)),
                "b1": np.zeros(self.hidden_dim),
                "w2": np.zeros((self.hidden_dim, self.hidden_dim)),
                "b2": np.zeros(self.hidden_dim),
            }
            for head, dim in self.HEADS:
                self.params[f"w_{head}"] = np.zeros((self.hidden_dim, dim))
                self.params[f"b_{head}"] = np.zeros(dim)

    def init_random(self, rng):
        """Random hidden layers, zero heads (the zero-deformation start)."""
        for w, fan_in in (("w1", self.feature_dim), ("w2", self.hidden_dim)):
            bound = 1.0 / np.sqrt(fan_in)
            self.params[w] = rng.uniform(-bound, bound, self.params[w].shape)
        self.params["b1"] = np.zeros(self.hidden_dim)
        self.params["b2"] = np.zeros(self.hidden_dim)
        for head, dim in self.HEADS:
            self.params[f"w_{head}"] = np.zeros((self.hidden_dim, dim))
            self.params[f"b_{head}"] = np.zeros(dim)
        return self

    def forward(self, features):
        p = self.params
        a1 = features @ p["w1"] + p["b1"]
        h1 = np.tanh(a1)
        a2 = h1 @ p["w2"] + p["b2"]
        h2 = h1 + np.tanh(a2)
        out = {head: h2 @ p[f"w_{head}"] + p[f"b_{head}"] for head, _ in self.HEADS}
        cache = (features, h1, a2, h2)
        return out, cache

    def __call__(self, features):
        out, _ = self.forward(features)
        return GaussianDelta(out["position"], out["rotation"], out["log_scale"])

    def backward(self, cache, upstream):
        """Gradients from upstream dict {position, rotation, log_scale}.

        Returns (param_grads, feature_grads).
        """
        features, h1, a2, h2 = cache
        p = self.params
        grads = {}
        g_h2 = np.zeros_like(h2)
        for head, _ in self.HEADS:
            g = upstream[head]
            grads[f"w_{head}"] = h2.T @ g
            grads[f"b_{head}"] = g.sum(axis=0)
            g_h2 += g @ p[f"w_{head}"].T
        g_a2 = g_h2 * (1.0 - np.tanh(a2) ** 2)
        grads["w2"] = h1.T @ g_a2
        grads["b2"] = g_a2.sum(axis=0)
        g_h1 = g_h2 + g_a2 @ p["w2"].T
        g_a1 = g_h1 * (1.0 - h1 ** 2)
        grads["w1"] = features.T @ g_a1
        grads["b1"] = g_a1.sum(axis=0)
        g_features = g_a1 @ p["w1"].T
        return grads, g_features

    def zero_grads(self):
        return {k: np.zeros_like(v) for k, v in self.params.items()}


def deform(cloud: GaussianCloud, field: HexPlaneField, decoder: DeformDecoder,
           tau) -> GaussianCloud:
    """Deformed cloud at normalized time tau; fresh decoders are identity."""
    features = query(field, cloud.positions, tau)
    delta = decoder(features)
    return apply_delta(cloud, delta)


def _fused_forward(field, positions, tau):
    coords, masks = _plane_coords(field, positions, tau)
    vals = []
    caches = []
    for name, ax_a, ax_b in PLANE_AXES:
        val, cache = _interp_plane(field.planes[name], coords[ax_a], coords[ax_b])
        vals.append(val)
        caches.append(cache)
    n, f = vals[0].shape
    prefix = [np.ones((n, f))]
    for v in vals[:-1]:
        prefix.append(prefix[-1] * v)
    suffix = [np.ones((n, f))]
    for v in reversed(vals[1:]):
        suffix.append(suffix[-1] * v)
    suffix.reverse()
    fused = prefix[-1] * vals[-1]
    return fused, vals, caches, prefix, suffix, coords, masks


def query_gradients(field: HexPlaneField, decoder: DeformDecoder,
                    cloud: GaussianCloud, tau, upstream: GaussianDelta):
    """Reverse-mode pass through deform's field query and decoder.

    ``upstream`` carries gradients w.r.t. the emitted delta components.
    Returns ``(plane_grads, decoder_grads, position_grads)``; position
    gradients flow through the interpolation coordinates only (they are the
    deformation-path term of d/d position).
    """
    if len(cloud) != len(upstream):
        raise ValueError("upstream delta has wrong N")
    positions = cloud.positions
    fused, vals, caches, prefix, suffix, coords, masks = _fused_forward(
        field, positions, tau)
    _, cache = decoder.forward(fused)
    up = {"position": upstream.d_position, "rotation": upstream.d_rotation,
          "log_scale": upstream.d_log_scale}
    decoder_grads, g_fused = decoder.backward(cache, up)

    plane_grads = {name: np.zeros_like(field.planes[name]) for name, _, _ in PLANE_AXES}
    g_coord_axis = {axis: np.zeros(positions.shape[0]) for axis in range(4)}
    for k, (name, ax_a, ax_b) in enumerate(PLANE_AXES):
        g_val = g_fused * prefix[k] * suffix[k]
        i0, j0, fa, fb, f00, f10, f01, f11 = caches[k]
        pg = plane_grads[name]
        rb = pg.shape[1]
        flat = pg.reshape(-1, pg.shape[2])
        np.add.at(flat, i0 * rb + j0, g_val * (1 - fa) * (1 - fb))
        np.add.at(flat, (i0 + 1) * rb + j0, g_val * fa * (1 - fb))
        np.add.at(flat, i0 * rb + j0 + 1, g_val * (1 - fa) * fb)
        np.add.at(flat, (i0 + 1) * rb + j0 + 1, g_val * fa * fb)
        d_da = (f10 - f00) * (1 - fb) + (f11 - f01) * fb
        d_db = (f01 - f00) * (1 - fa) + (f11 - f10) * fa
        g_coord_axis[ax_a] += np.sum(g_val * d_da, axis=1)
        g_coord_axis[ax_b] += np.sum(g_val * d_db, axis=1)

    position_grads = np.zeros_like(positions)
    for axis in range(3):
        lo, hi = field.axis_bounds(axis)
        scale = (field.spatial_resolution - 1) / (hi - lo)
        position_grads[:, axis] = np.where(masks[axis], g_coord_axis[axis] * scale, 0.0)
    return plane_grads, decoder_grads, position_grads
