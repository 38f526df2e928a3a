"""Noise-level schedules and pluggable novel-view guidance.

Real diffusion backends stay out of process: guidance is anything that maps
a rendered image (plus camera, reference frame and noise level) to a
gradient image of the same shape. The oracle provider — a perfect denoiser
around a hidden ground-truth scene — makes every downstream gradient
verifiable; an external process can be attached over a line-delimited
stdin/stdout protocol instead.
"""

import json
import os
import subprocess
import tempfile
from dataclasses import dataclass

import numpy as np

from .gaussians import Camera, GaussianCloud
from .images import load_image, save_image
from .rasterizer import render

__all__ = [
    "NoiseSchedule",
    "noise_at",
    "CoverageError",
    "GuidanceProvider",
    "oracle_guidance",
    "OracleGuidance",
    "ExternalGuidance",
    "VideoRefiner",
    "RefineContext",
    "identity_refiner",
    "oracle_refiner",
    "noise_field",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear decay of the noise level over a fixed iteration budget."""

    t_start: float
    t_end: float
    total_iterations: int

    def __post_init__(self):
        for v in (self.t_start, self.t_end):
            if not (0.0 < v <= 1.0):
                raise ValueError("noise levels must lie in (0, 1]")
        if self.total_iterations < 1:
            raise ValueError("total_iterations must be positive")


def noise_at(schedule: NoiseSchedule, iteration: int) -> float:
    """Noise level at an iteration; endpoints are exact."""
    if iteration < 0 or iteration > schedule.total_iterations:
        raise ValueError(
            f"iteration {iteration} outside [0, {schedule.total_iterations}]")
    frac = iteration / schedule.total_iterations
    return schedule.t_start + (schedule.t_end - schedule.t_start) * frac


class CoverageError(Exception):
    """Requested view/trajectory is outside what the provider can supply."""


class GuidanceProvider:
    """Gradient-image provider standing in for a 3D-aware denoiser.

    Callable as ``provider(rendered, camera, reference, noise_level, seed,
    tau)``; must be deterministic given the seed and return an array shaped
    like ``rendered``. ``covered_cameras()`` lists the only cameras the
    provider can serve, or returns None for unrestricted providers.
    """

    def __call__(self, rendered, camera, reference, noise_level, seed, tau=0.0):
        raise NotImplementedError

    def covered_cameras(self):
        return None


def _camera_key(camera: Camera):
    return (round(camera.azimuth, 6), round(camera.elevation, 6),
            round(camera.radius, 6))


class OracleGuidance(GuidanceProvider):
    """Perfect denoiser around hidden ground truth.

    Emits ``weight(t) * (rendered - ground_truth(camera, tau))`` with
    ``weight(t) = t`` by default, driving fits toward the hidden target.
    """

    def __init__(self, render_gt, cameras=None, weight_fn=None):
        self._render_gt = render_gt
        self._cameras = list(cameras) if cameras is not None else None
        self._keys = {_camera_key(c) for c in self._cameras} if cameras is not None else None
        self._weight_fn = weight_fn or (lambda t: t)

    def covered_cameras(self):
        return None if self._cameras is None else list(self._cameras)

    def ground_truth(self, camera, tau=0.0):
        if self._keys is not None and _camera_key(camera) not in self._keys:
            raise CoverageError(
                f"camera (az={camera.azimuth}, el={camera.elevation}) not covered")
        return self._render_gt(camera, tau)

    def __call__(self, rendered, camera, reference, noise_level, seed, tau=0.0):
        gt = self.ground_truth(camera, tau)
        if gt.shape != rendered.shape:
            raise ValueError(f"oracle image {gt.shape} vs render {rendered.shape}")
        return self._weight_fn(noise_level) * (rendered - gt)


def oracle_guidance(hidden_target, cameras=None, background=(1.0, 1.0, 1.0),
                    weight_fn=None) -> OracleGuidance:
    """Build an oracle provider from a hidden target.

    ``hidden_target`` is a static GaussianCloud, a callable
    ``(camera, tau) -> image``, or a dict mapping camera keys (as produced
    for the ``cameras`` list) to images.
    """
    if isinstance(hidden_target, GaussianCloud):
        def render_gt(camera, tau=0.0):
            return render(hidden_target, camera, background).rgb
        return OracleGuidance(render_gt, cameras, weight_fn)
    if callable(hidden_target):
        return OracleGuidance(hidden_target, cameras, weight_fn)
    if isinstance(hidden_target, dict):
        if cameras is None:
            raise ValueError("an image-set oracle needs its camera list")
        table = dict(hidden_target)

        def render_gt(camera, tau=0.0):
            key = _camera_key(camera)
            if key not in table:
                raise CoverageError(f"no stored image for camera {key}")
            stored = table[key]
            return stored[int(round(tau))] if isinstance(stored, (list, tuple)) else stored

        return OracleGuidance(render_gt, cameras, weight_fn)
    raise TypeError("hidden_target must be a cloud, callable or image dict")


class ExternalGuidance(GuidanceProvider):
    """Guidance served by a child process over stdin/stdout.

    One JSON object per line. Request fields: azimuth, elevation, radius,
    fov_y, width, height, noise_level, seed, tau, image (path to the
    rendered PNG). Response: {"gradient": "<path to .npy>"} or
    {"error": "..."}. The child owns the files it writes.
    """

    def __init__(self, command, workdir=None):
        self._command = command
        self._workdir = workdir or tempfile.mkdtemp(prefix="splat4d_guidance_")
        self._proc = None
        self._counter = 0

    def _ensure(self):
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                self._command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                text=True, bufsize=1)
        return self._proc

    def __call__(self, rendered, camera, reference, noise_level, seed, tau=0.0):
        proc = self._ensure()
        self._counter += 1
        img_path = os.path.join(self._workdir, f"render_{self._counter:06d}.png")
        save_image(img_path, np.clip(rendered, 0.0, 1.0))
        request = {
            "azimuth": camera.azimuth, "elevation": camera.elevation,
            "radius": camera.radius, "fov_y": camera.fov_y,
            "width": camera.width, "height": camera.height,
            "noise_level": float(noise_level), "seed": int(seed),
            "tau": float(tau), "image": img_path,
        }
        proc.stdin.write(json.dumps(request) + "\n")
        proc.stdin.flush()
        line = proc.stdout.readline()
        if not line:
            raise RuntimeError("guidance process closed its stdout")
        response = json.loads(line)
        if "error" in response:
            raise RuntimeError(f"guidance process error: {response['error']}")
        grad = np.load(response["gradient"])
        if grad.shape != rendered.shape:
            raise ValueError(f"gradient shape {grad.shape} vs render {rendered.shape}")
        return grad

    def close(self):
        if self._proc is not None and self._proc.poll() is None:
            self._proc.stdin.close()
            self._proc.wait(timeout=10)
        self._proc = None


def noise_field(shape, level, seed):
    """Gaussian noise with standard deviation ``level``, keyed by seed."""
    rng = np.random.default_rng(seed)
    return level * rng.standard_normal(shape)


@dataclass
class RefineContext:
    """Everything a refiner may condition on for one refinement step.

    ``clean_frames`` is the pre-noise rendered video — the null refiner
    returns it verbatim; ``trajectory`` carries the cameras and times the
    frames were rendered from, which oracle refiners use to look up ground
    truth. Real video backends would use only the noisy frames and
    ``input_image``.
    """

    input_image: np.ndarray | None
    noise_level: float
    seed: int
    trajectory: object | None = None
    clean_frames: list | None = None


class VideoRefiner:
    """Maps a noisy rendered video to a refined video, frame count and
    resolution preserved."""

    def refine(self, noisy_frames, context: RefineContext):
        raise NotImplementedError


class _IdentityRefiner(VideoRefiner):
    def refine(self, noisy_frames, context):
        if context.clean_frames is None:
            raise ValueError("identity refiner needs the pre-noise frames in context")
        return [f.copy() for f in context.clean_frames]


class _OracleRefiner(VideoRefiner):
    def __init__(self, gt_video_provider):
        self._provider = gt_video_provider

    def refine(self, noisy_frames, context):
        if context.trajectory is None:
            raise ValueError("oracle refiner needs the trajectory in context")
        frames = self._provider(context.trajectory)
        if len(frames) != len(noisy_frames):
            raise CoverageError("ground-truth provider returned wrong frame count")
        return frames


def identity_refiner() -> VideoRefiner:
    """Null refiner: returns the pre-noise video exactly (fixed point)."""
    return _IdentityRefiner()


def oracle_refiner(ground_truth_video_provider) -> VideoRefiner:
    """Refiner that ignores the noisy input and returns ground truth along
    the synthesized trajectory; raises CoverageError outside coverage."""
    return _OracleRefiner(ground_truth_video_provider)
