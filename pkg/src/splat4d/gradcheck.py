"""Finite-difference verification of every hand-written backward pass.

The rasterizer check compares all five parameter gradients of random small
scenes against central differences; the deformation check does the same
for plane entries, decoder weights and query positions. Scene opacities
stay at or below 0.5 so with at most 10 Gaussians per pixel the
early-termination threshold can never engage inside the difference stencil.
"""

import numpy as np

from .gaussians import Camera, GaussianCloud, GaussianDelta
from .hexplane import DeformDecoder, HexPlaneField, query, query_gradients
from .rasterizer import render, render_backward

__all__ = ["random_scene", "check_rasterizer", "check_deformation", "run_suite"]

STEP = 1e-4
RTOL = 1e-3
ATOL = 1e-5


def random_scene(seed, max_gaussians=10, size=32):
    """Seeded random cloud/camera pair sized for cheap FD sweeps."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, max_gaussians + 1))
    cloud = GaussianCloud(
        positions=rng.uniform(-0.5, 0.5, (n, 3)),
        rotations=rng.normal(size=(n, 4)),
        log_scales=rng.uniform(np.log(0.08), np.log(0.25), (n, 3)),
        opacity_logits=rng.uniform(-2.0, 0.0, (n, 1)),
        colors=rng.uniform(0.1, 0.9, (n, 3)),
    )
    camera = Camera(azimuth=float(rng.uniform(-180, 180)),
                    elevation=float(rng.uniform(-30, 30)),
                    radius=2.0, fov_y=49.1, width=size, height=size)
    upstream = rng.uniform(-1.0, 1.0, (size, size, 3))
    return cloud, camera, upstream


def _ratio(fd, an, rtol, atol):
    return abs(fd - an) / max(atol, rtol * max(abs(fd), abs(an)))


def check_rasterizer(seeds, step=STEP, rtol=RTOL, atol=ATOL):
    """FD-check one scene per seed; returns (failures, worst_ratio)."""
    bg = np.ones(3)
    failures = []
    worst = 0.0
    for seed in seeds:
        cloud, camera, upstream = random_scene(seed)

        def loss():
            return float(np.sum(upstream * render(cloud, camera, bg).rgb))

        grads = render_backward(cloud, camera, bg, upstream)
        pairs = (("position", cloud.positions, grads.d_position),
                 ("rotation", cloud.rotations, grads.d_rotation),
                 ("log_scale", cloud.log_scales, grads.d_log_scale),
                 ("opacity", cloud.opacity_logits, grads.d_opacity_logit),
                 ("color", cloud.colors, grads.d_color))
        for name, arr, analytic in pairs:
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                ix = it.multi_index
                orig = arr[ix]
                arr[ix] = orig + step
                lp = loss()
                arr[ix] = orig - step
                lm = loss()
                arr[ix] = orig
                fd = (lp - lm) / (2.0 * step)
                r = _ratio(fd, analytic[ix], rtol, atol)
                worst = max(worst, r)
                if r > 1.0:
                    failures.append({"seed": seed, "param": name, "index": ix,
                                     "fd": fd, "analytic": float(analytic[ix])})
    return failures, worst


def deformation_instance(seed, n=6, spatial=5, temporal=4, features=3, hidden=8):
    """Small field/decoder/cloud instance with randomized (nonzero) heads so
    gradients reach the planes."""
    rng = np.random.default_rng(seed)
    field = HexPlaneField(spatial_resolution=spatial, temporal_resolution=temporal,
                          feature_dim=features).init_random(rng)
    decoder = DeformDecoder(feature_dim=features, hidden_dim=hidden).init_random(rng)
    for head, dim in decoder.HEADS:
        decoder.params[f"w_{head}"] = 0.1 * rng.normal(size=(hidden, dim))
        decoder.params[f"b_{head}"] = 0.05 * rng.normal(size=dim)
    # positions mid-cell so the FD stencil stays inside one bilinear patch
    cells = rng.integers(0, spatial - 1, (n, 3))
    frac = rng.uniform(0.2, 0.8, (n, 3))
    grid = cells + frac
    positions = grid / (spatial - 1) * 2.0 - 1.0
    cloud = GaussianCloud(positions, rng.normal(size=(n, 4)),
                          rng.uniform(-3.0, -1.0, (n, 3)),
                          rng.uniform(-1.0, 1.0, (n, 1)),
                          rng.uniform(0.0, 1.0, (n, 3)))
    tau = float(rng.uniform(0.15, 0.85))
    upstream = GaussianDelta(rng.normal(size=(n, 3)), rng.normal(size=(n, 4)),
                             rng.normal(size=(n, 3)))
    return field, decoder, cloud, tau, upstream


def check_deformation(seeds, step=STEP, rtol=RTOL, atol=ATOL):
    """FD-check plane, decoder and position gradients of the query path."""
    failures = []
    worst = 0.0
    for seed in seeds:
        field, decoder, cloud, tau, upstream = deformation_instance(seed)

        def loss():
            feats = query(field, cloud.positions, tau)
            out, _ = decoder.forward(feats)
            return float(np.sum(upstream.d_position * out["position"])
                         + np.sum(upstream.d_rotation * out["rotation"])
                         + np.sum(upstream.d_log_scale * out["log_scale"]))

        plane_g, dec_g, pos_g = query_gradients(field, decoder, cloud, tau, upstream)
        arrays = [(f"plane_{name}", field.planes[name], plane_g[name])
                  for name in sorted(field.planes)]
        arrays += [(f"decoder.{name}", decoder.params[name], dec_g[name])
                   for name in sorted(decoder.params)]
        arrays.append(("position", cloud.positions, pos_g))
        for name, arr, analytic in arrays:
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                ix = it.multi_index
                orig = arr[ix]
                arr[ix] = orig + step
                lp = loss()
                arr[ix] = orig - step
                lm = loss()
                arr[ix] = orig
                fd = (lp - lm) / (2.0 * step)
                r = _ratio(fd, np.asarray(analytic)[ix], rtol, atol)
                worst = max(worst, r)
                if r > 1.0:
                    failures.append({"seed": seed, "param": name, "index": ix,
                                     "fd": fd, "analytic": float(np.asarray(analytic)[ix])})
    return failures, worst


def run_suite(seed=0, scenes=20):
    """Full FD suite; returns a report dict with per-part failures."""
    seeds = [seed + k for k in range(scenes)]
    raster_failures, raster_worst = check_rasterizer(seeds)
    deform_failures, deform_worst = check_deformation(seeds)
    return {
        "rasterizer": {"scenes": scenes, "failures": raster_failures,
                       "worst_ratio": raster_worst},
        "deformation": {"scenes": scenes, "failures": deform_failures,
                        "worst_ratio": deform_worst},
        "ok": not raster_failures and not deform_failures,
    }
