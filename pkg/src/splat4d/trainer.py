"""Two-stage fitting: static multi-view optimization, then video-driven
HexPlane deformation. Both stages run Adam on raw parameter arrays; the
static stage periodically densifies high-gradient Gaussians and prunes
near-transparent ones.

Per-view guidance gradients are chained through the rasterizer backward
pass unscaled (the provider's output *is* the upstream gradient image);
reference-image terms use a per-pixel-per-channel mean-squared error.
Sampled guidance views average their gradients.
"""

import json
import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from .gaussians import (Camera, GaussianCloud, GaussianDelta, apply_delta,
                        apply_delta_backward, inverse_sigmoid)
from .guidance import GuidanceProvider, NoiseSchedule, noise_at
from .hexplane import DeformDecoder, HexPlaneField, deform, query, query_gradients
from .rasterizer import render, render_backward

__all__ = [
    "StaticFitConfig",
    "DynamicFitConfig",
    "DrivingVideo",
    "DeformableScene",
    "NumericalError",
    "adam_step",
    "loss_ref",
    "sds_step",
    "fit_static",
    "fit_dynamic",
]

AZIMUTH_RANGE = (-180.0, 180.0)
ELEVATION_RANGE = (-30.0, 30.0)
PRUNE_OPACITY = 0.01
MIN_KEEP_FRACTION = 0.1


class NumericalError(RuntimeError):
    """Raised when a fit produces a non-finite loss."""


@dataclass
class StaticFitConfig:
    iterations: int = 500
    views_per_iteration: int = 16
    background: tuple = (1.0, 1.0, 1.0)
    initial_gaussians: int = 5000
    initial_scale: float = 0.03
    densify_interval: int = 100
    densify_grad_threshold: float = 0.05
    dense_percent: float = 0.1
    t_start: float = 0.98
    t_end: float = 0.02
    learning_rates: dict = dc_field(default_factory=lambda: {
        "position": 2e-3, "rotation": 1e-3, "log_scale": 5e-3,
        "opacity": 5e-2, "color": 2.5e-2,
    })

    def __post_init__(self):
        if min(self.iterations, self.views_per_iteration, self.initial_gaussians,
               self.densify_interval) < 0 or self.initial_gaussians < 1:
            raise ValueError("static fit counts must be positive")
        if self.densify_grad_threshold <= 0 or self.dense_percent <= 0:
            raise ValueError("densification thresholds must be positive")

    def schedule(self):
        return NoiseSchedule(self.t_start, self.t_end, max(self.iterations, 1))


@dataclass
class DynamicFitConfig:
    iterations: int = 200
    views_per_timestep: int = 4
    background: tuple = (1.0, 1.0, 1.0)
    t_start: float = 0.5
    t_end: float = 0.02
    freeze_static: bool = True
    grid_lr: float = 0.0064
    mlp_lr: float = 0.00064
    static_learning_rates: dict = dc_field(default_factory=lambda: {
        "position": 2e-3, "rotation": 1e-3, "log_scale": 5e-3,
        "opacity": 5e-2, "color": 2.5e-2,
    })

    def __post_init__(self):
        if self.iterations < 0 or self.views_per_timestep < 0:
            raise ValueError("dynamic fit counts must be non-negative")

    def schedule(self):
        return NoiseSchedule(self.t_start, self.t_end, max(self.iterations, 1))


@dataclass
class DrivingVideo:
    """Reference-view video defining the desired motion.

    frames: (T, H, W, 3) floats in [0, 1], already composited over white.
    Frame i sits at normalized time i / (T - 1).
    """

    frames: np.ndarray
    reference_camera: Camera

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4 or self.frames.shape[3] != 3:
            raise ValueError("frames must be (T, H, W, 3)")
        if self.frames.shape[0] < 2:
            raise ValueError("a driving video needs at least 2 frames")
        cam = self.reference_camera
        if self.frames.shape[1:3] != (cam.height, cam.width):
            raise ValueError(
                f"frame resolution {self.frames.shape[1:3]} does not match the "
                f"reference camera {(cam.height, cam.width)}")

    def __len__(self):
        return self.frames.shape[0]

    def times(self):
        return np.linspace(0.0, 1.0, len(self))


@dataclass
class DeformableScene:
    """A static cloud plus its deformation model."""

    cloud: GaussianCloud
    field: HexPlaneField
    decoder: DeformDecoder

    def at(self, tau):
        return deform(self.cloud, self.field, self.decoder, tau)


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-15):
    """One in-place Adam update with bias correction.

    ``state`` is a dict holding first/second moments and the step count;
    pass an empty dict to start. Returns (params, state).
    """
    if params.shape != grads.shape:
        raise ValueError(f"params {params.shape} vs grads {grads.shape}")
    if "m" not in state:
        state["m"] = np.zeros_like(params)
        state["v"] = np.zeros_like(params)
        state["step"] = 0
    b1, b2 = betas
    state["step"] += 1
    state["m"] *= b1
    state["m"] += (1.0 - b1) * grads
    state["v"] *= b2
    state["v"] += (1.0 - b2) * grads * grads
    t = state["step"]
    m_hat = state["m"] / (1.0 - b1 ** t)
    v_hat = state["v"] / (1.0 - b2 ** t)
    params -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


def _mse_upstream(rendered, target, scale=1.0):
    """Mean per-pixel-per-channel squared error and its upstream image."""
    if rendered.shape != target.shape:
        raise ValueError(f"image shapes differ: {rendered.shape} vs {target.shape}")
    diff = rendered - target
    loss = float(np.mean(diff * diff))
    return loss, (2.0 * scale / diff.size) * diff


@dataclass
class _DynGrads:
    planes: dict
    decoder: dict
    cloud: dict | None


def _zero_dyn_grads(field, decoder, with_cloud, n):
    cloud = None
    if with_cloud:
        cloud = {"position": np.zeros((n, 3)), "rotation": np.zeros((n, 4)),
                 "log_scale": np.zeros((n, 3)), "opacity": np.zeros((n, 1)),
                 "color": np.zeros((n, 3))}
    return _DynGrads({k: np.zeros_like(v) for k, v in field.planes.items()},
                     decoder.zero_grads(), cloud)


def _accumulate_dynamic(scene, tau, camera, background, upstream, grads, weight=1.0):
    """Chain one view's upstream image into plane/decoder/(cloud) grads."""
    cloud, field, decoder = scene.cloud, scene.field, scene.decoder
    feats = query(field, cloud.positions, tau)
    delta = decoder(feats)
    deformed = apply_delta(cloud, delta)
    rg = render_backward(deformed, camera, background, upstream)
    delta_up, static_up = apply_delta_backward(
        cloud, delta, rg.d_position, rg.d_rotation, rg.d_log_scale)
    plane_g, dec_g, pos_g = query_gradients(
        field, decoder, cloud, tau,
        GaussianDelta(delta_up["position"], delta_up["rotation"], delta_up["log_scale"]))
    for name, g in plane_g.items():
        grads.planes[name] += weight * g
    for name, g in dec_g.items():
        grads.decoder[name] += weight * g
    if grads.cloud is not None:
        grads.cloud["position"] += weight * (static_up["position"] + pos_g)
        grads.cloud["rotation"] += weight * static_up["rotation"]
        grads.cloud["log_scale"] += weight * static_up["log_scale"]
        grads.cloud["opacity"] += weight * rg.d_opacity_logit
        grads.cloud["color"] += weight * rg.d_color
    return rg


def loss_ref(scene: DeformableScene, video: DrivingVideo, background=(1.0, 1.0, 1.0),
             with_cloud_grads=False):
    """Video reconstruction loss (Eq.-style mean over frames) and gradients.

    Returns ``(loss, grads)`` where grads holds per-plane, per-decoder and
    optionally per-cloud-parameter arrays.
    """
    cam = video.reference_camera
    times = video.times()
    grads = _zero_dyn_grads(scene.field, scene.decoder, with_cloud_grads, len(scene.cloud))
    total = 0.0
    n_frames = len(video)
    for i in range(n_frames):
        tau = times[i]
        img = render(scene.at(tau), cam, background).rgb
        frame_loss, upstream = _mse_upstream(img, video.frames[i], scale=1.0 / n_frames)
        total += frame_loss / n_frames
        _accumulate_dynamic(scene, tau, cam, background, upstream, grads)
    return total, grads


def _sample_camera(rng, template: Camera, provider: GuidanceProvider):
    covered = provider.covered_cameras() if provider is not None else None
    if covered:
        return covered[int(rng.integers(len(covered)))]
    az = rng.uniform(*AZIMUTH_RANGE)
    el = rng.uniform(*ELEVATION_RANGE)
    return Camera(az, el, template.radius, template.fov_y,
                  template.width, template.height, template.near, template.far)


def sds_step(scene: DeformableScene, tau, provider: GuidanceProvider,
             schedule: NoiseSchedule, iteration: int, views: int, rng,
             camera_template: Camera, reference_image=None,
             background=(1.0, 1.0, 1.0), grads=None, with_cloud_grads=False):
    """Score-distillation step: sample ``views`` cameras, pull gradient
    images from the provider at the scheduled noise level, chain them
    through the rasterizer and deformation backward passes.

    Per-view gradients are averaged. Returns the accumulated grads object.
    """
    if grads is None:
        grads = _zero_dyn_grads(scene.field, scene.decoder, with_cloud_grads,
                                len(scene.cloud))
    if views == 0:
        return grads
    level = noise_at(schedule, iteration)
    weight = 1.0 / views
    for k in range(views):
        cam = _sample_camera(rng, camera_template, provider)
        rendered = render(scene.at(tau), cam, background).rgb
        upstream = provider(rendered, cam, reference_image, level,
                            seed=iteration * 4096 + k, tau=tau)
        if upstream.shape != rendered.shape:
            raise ValueError("provider returned a mismatched gradient image")
        _accumulate_dynamic(scene, tau, cam, background, upstream, grads, weight)
    return grads


def _init_cloud(config: StaticFitConfig, rng) -> GaussianCloud:
    n = config.initial_gaussians
    direction = rng.normal(size=(n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = 0.5 * rng.uniform(0.0, 1.0, (n, 1)) ** (1.0 / 3.0)
    positions = direction * radius
    rotations = np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1))
    log_scales = np.full((n, 3), np.log(config.initial_scale))
    opacity = np.full((n, 1), inverse_sigmoid(0.1))
    colors = rng.uniform(0.4, 0.6, (n, 3))
    return GaussianCloud(positions, rotations, log_scales, opacity, colors)


class _CloudParams:
    """Mutable parameter arrays plus per-group Adam state."""

    GROUPS = ("position", "rotation", "log_scale", "opacity", "color")

    def __init__(self, cloud: GaussianCloud):
        self.arrays = {
            "position": cloud.positions.copy(),
            "rotation": cloud.rotations.copy(),
            "log_scale": cloud.log_scales.copy(),
            "opacity": cloud.opacity_logits.copy(),
            "color": cloud.colors.copy(),
        }
        self.adam = {g: {} for g in self.GROUPS}

    @property
    def n(self):
        return self.arrays["position"].shape[0]

    def cloud(self) -> GaussianCloud:
        a = self.arrays
        return GaussianCloud(a["position"], a["rotation"], a["log_scale"],
                             a["opacity"], a["color"])

    def step(self, grads, lrs):
        for g in self.GROUPS:
            adam_step(self.arrays[g], grads[g], self.adam[g], lrs[g])
        np.clip(self.arrays["color"], 0.0, 1.0, out=self.arrays["color"])

    def select(self, keep_idx, appended):
        """Keep rows, then append new ones; Adam moments carry over for the
        kept rows and start at zero for appended rows."""
        for g in self.GROUPS:
            new_rows = appended[g]
            self.arrays[g] = np.concatenate([self.arrays[g][keep_idx], new_rows])
            st = self.adam[g]
            if "m" in st:
                zeros = np.zeros_like(new_rows)
                st["m"] = np.concatenate([st["m"][keep_idx], zeros])
                st["v"] = np.concatenate([st["v"][keep_idx], zeros])


def _densify_and_prune(params: _CloudParams, accum, seen, config, rng, floor):
    """Split/clone high-gradient Gaussians, prune near-transparent ones."""
    a = params.arrays
    n = params.n
    avg = accum / np.maximum(seen, 1.0)
    hot = avg > config.densify_grad_threshold
    extent = float(np.max(np.linalg.norm(
        a["position"] - a["position"].mean(axis=0), axis=1)))
    extent = max(extent, 1e-6)
    big = np.exp(a["log_scale"].max(axis=1)) > config.dense_percent * extent
    split = hot & big
    clone = hot & ~big

    new_rows = {g: [] for g in params.GROUPS}
    # clones are exact duplicates; the optimizer separates them later
    for g in params.GROUPS:
        new_rows[g].append(a[g][clone])
    # splits: two samples from the Gaussian itself, shrunk
    split_idx = np.nonzero(split)[0]
    if split_idx.size:
        from .gaussians import build_covariance, quat_to_rotmat  # local to avoid cycle

        rot = quat_to_rotmat(a["rotation"][split_idx])
        sigma = np.exp(a["log_scale"][split_idx])
        samples = []
        for _ in range(2):
            eps = rng.normal(size=(split_idx.size, 3))
            samples.append(a["position"][split_idx]
                           + np.einsum("nij,nj->ni", rot, eps * sigma))
        for g in params.GROUPS:
            rows = np.concatenate([a[g][split_idx]] * 2)
            if g == "position":
                rows = np.concatenate(samples)
            elif g == "log_scale":
                rows = rows - np.log(1.6)
            new_rows[g].append(rows)

    keep = ~split  # split originals are replaced by their two halves
    # prune: opacity below threshold, but never drop under the floor
    opac = 1.0 / (1.0 + np.exp(-a["opacity"][:, 0]))
    transparent = opac < PRUNE_OPACITY
    prune = keep & transparent
    n_new = sum(r.shape[0] for r in new_rows["position"])
    if (keep & ~prune).sum() + n_new < floor:
        # keep the most opaque transparent ones to honor the floor
        order = np.argsort(-opac)
        needed = floor - n_new - int((keep & ~transparent).sum())
        allowed = set()
        for i in order:
            if needed <= 0:
                break
            if keep[i] and transparent[i]:
                allowed.add(int(i))
                needed -= 1
        prune = np.array([keep[i] and transparent[i] and i not in allowed
                          for i in range(n)])
    keep = keep & ~prune
    keep_idx = np.nonzero(keep)[0]
    appended = {g: np.concatenate(new_rows[g]) if new_rows[g] else
                np.zeros((0, a[g].shape[1])) for g in params.GROUPS}
    if keep_idx.size + appended["position"].shape[0] >= 1:
        params.select(keep_idx, appended)
    return int(split.sum()), int(clone.sum()), int(prune.sum())


def _check_finite(loss_value):
    if not np.isfinite(loss_value):
        raise NumericalError(f"non-finite loss: {loss_value}")


def _emit(log_fn, record):
    if log_fn is not None:
        log_fn(json.dumps(record, sort_keys=True))


def fit_static(reference_views, guidance: GuidanceProvider | None,
               config: StaticFitConfig, seed: int, log_fn=None) -> GaussianCloud:
    """Fit a static cloud to reference images plus novel-view guidance.

    ``reference_views`` is a list of (Camera, image) pairs; at least one is
    required. Each iteration combines the reference MSE gradient with
    guidance gradients over ``views_per_iteration`` sampled views, then
    densifies on the accumulated position-gradient norm every
    ``densify_interval`` iterations.
    """
    if not reference_views:
        raise ValueError("fit_static needs at least one reference view")
    rng = np.random.default_rng(seed)
    params = _CloudParams(_init_cloud(config, rng))
    schedule = config.schedule()
    bg = np.asarray(config.background, dtype=np.float64)
    template = reference_views[0][0]
    floor = max(1, int(np.ceil(config.initial_gaussians * MIN_KEEP_FRACTION)))

    accum = np.zeros(params.n)
    seen = np.zeros(params.n)

    for it in range(config.iterations):
        t0 = time.perf_counter()
        cloud = params.cloud()
        grads = {g: np.zeros_like(params.arrays[g]) for g in params.GROUPS}
        ref_loss = 0.0
        for cam, image in reference_views:
            out = render(cloud, cam, bg)
            frame_loss, upstream = _mse_upstream(out.rgb, image)
            ref_loss += frame_loss / len(reference_views)
            rg = render_backward(cloud, cam, bg, upstream / len(reference_views))
            _add_cloud_grads(grads, rg)
            _track_densify(accum, seen, rg)
        level = noise_at(schedule, it)
        guide_mag = 0.0
        if guidance is not None and config.views_per_iteration > 0:
            w = 1.0 / config.views_per_iteration
            for k in range(config.views_per_iteration):
                cam = _sample_camera(rng, template, guidance)
                out = render(cloud, cam, bg)
                gimg = guidance(out.rgb, cam, reference_views[0][1], level,
                                seed=it * 4096 + k, tau=0.0)
                guide_mag += float(np.mean(np.abs(gimg))) * w
                rg = render_backward(cloud, cam, bg, gimg * w)
                _add_cloud_grads(grads, rg)
                _track_densify(accum, seen, rg)
        _check_finite(ref_loss)
        params.step(grads, config.learning_rates)
        if (config.densify_interval > 0 and (it + 1) % config.densify_interval == 0
                and it + 1 < config.iterations):
            n_split, n_clone, n_prune = _densify_and_prune(
                params, accum, seen, config, rng, floor)
            accum = np.zeros(params.n)
            seen = np.zeros(params.n)
            _emit(log_fn, {"iteration": it, "event": "densify", "split": n_split,
                           "clone": n_clone, "prune": n_prune,
                           "gaussians": params.n})
        _emit(log_fn, {"iteration": it, "loss_ref": ref_loss,
                       "guidance_mag": guide_mag, "noise_level": level,
                       "gaussians": params.n,
                       "wall_time": time.perf_counter() - t0})
    return params.cloud()


def _add_cloud_grads(grads, rg):
    grads["position"] += rg.d_position
    grads["rotation"] += rg.d_rotation
    grads["log_scale"] += rg.d_log_scale
    grads["opacity"] += rg.d_opacity_logit
    grads["color"] += rg.d_color


def _track_densify(accum, seen, rg):
    norms = np.linalg.norm(rg.d_position, axis=1)
    accum += norms
    seen += norms > 0.0


def fit_dynamic(cloud: GaussianCloud, video: DrivingVideo,
                provider: GuidanceProvider | None, config: DynamicFitConfig,
                seed: int, field: HexPlaneField | None = None,
                decoder: DeformDecoder | None = None, log_fn=None):
    """Fit a deformation model to the driving video plus guidance.

    The decoder starts zero-initialized, so the first iteration's reference
    loss is exactly the static-render-vs-video error. With
    ``freeze_static`` (the default) the cloud's arrays are never touched.
    Returns ``(field, decoder)``.
    """
    rng = np.random.default_rng(seed)
    if field is None:
        field = HexPlaneField().init_random(rng)
    if decoder is None:
        decoder = DeformDecoder(feature_dim=field.feature_dim).init_random(rng)
    scene = DeformableScene(cloud, field, decoder)
    schedule = config.schedule()
    bg = np.asarray(config.background, dtype=np.float64)
    cam_ref = video.reference_camera
    times = video.times()

    plane_adam = {name: {} for name in field.planes}
    dec_adam = {name: {} for name in decoder.params}
    static = None if config.freeze_static else _CloudParams(cloud)

    for it in range(config.iterations):
        t0 = time.perf_counter()
        if static is not None:
            scene = DeformableScene(static.cloud(), field, decoder)
        frame = int(rng.integers(len(video)))
        tau = times[frame]
        grads = _zero_dyn_grads(field, decoder, static is not None, len(scene.cloud))
        img = render(scene.at(tau), cam_ref, bg).rgb
        frame_loss, upstream = _mse_upstream(img, video.frames[frame])
        _check_finite(frame_loss)
        _accumulate_dynamic(scene, tau, cam_ref, bg, upstream, grads)
        if provider is not None and config.views_per_timestep > 0:
            sds_step(scene, tau, provider, schedule, it,
                     config.views_per_timestep, rng, cam_ref,
                     reference_image=video.frames[frame], background=bg,
                     grads=grads)
        for name in field.planes:
            adam_step(field.planes[name], grads.planes[name], plane_adam[name],
                      config.grid_lr)
        for name in decoder.params:
            adam_step(decoder.params[name], grads.decoder[name], dec_adam[name],
                      config.mlp_lr)
        if static is not None:
            static.step(grads.cloud, config.static_learning_rates)
        _emit(log_fn, {"iteration": it, "frame": frame, "loss_ref": frame_loss,
                       "noise_level": noise_at(schedule, it),
                       "gaussians": len(scene.cloud),
                       "wall_time": time.perf_counter() - t0})
    return field, decoder
