"""Video-to-video texture refinement and its image-to-image baseline.

Each iteration synthesizes a horizontal orbit, renders every frame,
perturbs the video with Gaussian noise at a fixed level, asks the refiner
for a clean version and descends the MSE between the rendered and refined
videos into the texture maps. All frames optimize jointly; with a shared
texture map the tie keeps frames identical, which is what suppresses
frame-to-frame flicker compared with refining each frame on its own.
"""

from dataclasses import dataclass

import numpy as np

from .guidance import RefineContext, VideoRefiner, noise_field
from .mesh import OrbitTrajectory, TexturedMeshSequence
from .meshrender import render_textured, texture_gradient
from .trainer import adam_step

__all__ = ["refine_textures", "refine_textures_framewise",
           "frame_texture_variance", "FrameTrajectory"]


@dataclass
class FrameTrajectory:
    """Explicit camera/time lists, duck-typed like OrbitTrajectory."""

    camera_list: list
    time_list: list

    def cameras(self):
        return list(self.camera_list)

    def times(self):
        return np.asarray(self.time_list)


def _unique_textures(seq: TexturedMeshSequence):
    uniq = []
    seen = set()
    for t in seq.textures:
        if id(t) not in seen:
            seen.add(id(t))
            uniq.append(t)
    return uniq


def refine_textures(seq: TexturedMeshSequence, refiner: VideoRefiner,
                    iterations=50, noise_level=0.7, seed=0, radius=1.5,
                    fov_y=49.1, width=256, height=256, lr=0.05,
                    input_image=None, background=(1.0, 1.0, 1.0),
                    log_fn=None) -> TexturedMeshSequence:
    """Joint V2V refinement of the sequence's texture maps (geometry frozen).

    Camera and time advance together along the orbit: frame tau is rendered
    from the tau-th trajectory camera. Returns the sequence (textures
    updated in place).
    """
    rng = np.random.default_rng(seed)
    res = seq.texture_resolution
    n_frames = len(seq)
    adam = {id(t): {} for t in _unique_textures(seq)}
    for it in range(iterations):
        traj = OrbitTrajectory(n_frames, start_azimuth=rng.uniform(-180.0, 180.0),
                               radius=radius, fov_y=fov_y, width=width, height=height)
        cams = traj.cameras()
        clean = []
        rasters = []
        for tau in range(n_frames):
            img, raster = render_textured(seq.frames[tau], seq.uv,
                                          seq.textures[tau], cams[tau], background)
            clean.append(img)
            rasters.append(raster)
        noisy = [np.clip(clean[tau] + noise_field(clean[tau].shape, noise_level,
                                                  (seed, it, tau)), 0.0, 1.0)
                 for tau in range(n_frames)]
        refined = refiner.refine(noisy, RefineContext(
            input_image=input_image, noise_level=noise_level, seed=seed,
            trajectory=traj, clean_frames=clean))
        grads = {key: np.zeros((res, res, 3)) for key in adam}
        loss = 0.0
        denom = n_frames * clean[0].size
        for tau in range(n_frames):
            diff = clean[tau] - refined[tau]
            loss += float(np.sum(diff * diff)) / denom
            upstream = (2.0 / denom) * diff
            grads[id(seq.textures[tau])] += texture_gradient(rasters[tau], upstream, res)
        for tex in _unique_textures(seq):
            adam_step(tex, grads[id(tex)], adam[id(tex)], lr)
            np.clip(tex, 0.0, 1.0, out=tex)
        if log_fn is not None:
            log_fn({"iteration": it, "loss_refine": loss})
    return seq


def refine_textures_framewise(seq: TexturedMeshSequence, refiner: VideoRefiner,
                              iterations=50, noise_level=0.7, seed=0, radius=1.5,
                              fov_y=49.1, width=256, height=256, lr=0.05,
                              input_image=None, background=(1.0, 1.0, 1.0)):
    """I2I-style baseline: every frame refines against its own one-frame
    "video" with independent noise, into its own texture copy.

    Test-harness path for quantifying the flicker the joint V2V objective
    avoids; not part of the export pipeline.
    """
    seq.split_textures()
    rng = np.random.default_rng(seed)
    res = seq.texture_resolution
    n_frames = len(seq)
    times = np.linspace(0.0, 1.0, n_frames)
    adam = [{} for _ in range(n_frames)]
    for it in range(iterations):
        traj = OrbitTrajectory(n_frames, start_azimuth=rng.uniform(-180.0, 180.0),
                               radius=radius, fov_y=fov_y, width=width, height=height)
        cams = traj.cameras()
        for tau in range(n_frames):
            img, raster = render_textured(seq.frames[tau], seq.uv,
                                          seq.textures[tau], cams[tau], background)
            noisy = np.clip(img + noise_field(img.shape, noise_level,
                                              (seed, it, tau, 7)), 0.0, 1.0)
            refined = refiner.refine([noisy], RefineContext(
                input_image=input_image, noise_level=noise_level, seed=seed,
                trajectory=FrameTrajectory([cams[tau]], [times[tau]]),
                clean_frames=[img]))[0]
            diff = img - refined
            upstream = (2.0 / diff.size) * diff
            grad = texture_gradient(raster, upstream, res)
            adam_step(seq.textures[tau], grad, adam[tau], lr)
            np.clip(seq.textures[tau], 0.0, 1.0, out=seq.textures[tau])
    return seq


def frame_texture_variance(seq: TexturedMeshSequence):
    """Mean per-texel variance of the texture maps across frames, measured
    over texels covered by the UV atlas when the texel map is available."""
    stack = np.stack([np.asarray(t) for t in seq.textures])
    var = stack.var(axis=0).mean(axis=-1)
    if seq.texel_face is not None:
        mask = seq.texel_face >= 0
        if mask.any():
            return float(var[mask].mean())
    return float(var.mean())
