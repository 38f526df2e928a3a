"""Desk-scale 4D Gaussian splatting.

Fit a static Gaussian cloud to multi-view supervision, animate it with a
factorized space-time deformation field driven by a reference video, and
export temporally consistent textured mesh sequences. All diffusion-style
guidance hides behind a provider interface, keeping every numerical
component independently checkable on a CPU.
"""

from .backend import active_backend, numba_enabled, set_numba_enabled
from .gaussians import (Camera, GaussianCloud, GaussianDelta, apply_delta,
                        build_covariance, normalize_to_unit_box)
from .guidance import (CoverageError, NoiseSchedule, identity_refiner, noise_at,
                       oracle_guidance, oracle_refiner)
from .hexplane import DeformDecoder, HexPlaneField, deform, query, query_gradients
from .rasterizer import RenderGradients, RenderOutput, render, render_backward, render_views
from .trainer import (DeformableScene, DrivingVideo, DynamicFitConfig,
                      StaticFitConfig, adam_step, fit_dynamic, fit_static,
                      loss_ref, sds_step)

__version__ = "0.1.0"

__all__ = [
    "Camera", "GaussianCloud", "GaussianDelta", "apply_delta", "build_covariance",
    "normalize_to_unit_box", "render", "render_backward", "render_views",
    "RenderOutput", "RenderGradients", "HexPlaneField", "DeformDecoder",
    "query", "deform", "query_gradients", "NoiseSchedule", "noise_at",
    "CoverageError", "oracle_guidance", "identity_refiner", "oracle_refiner",
    "StaticFitConfig", "DynamicFitConfig", "DrivingVideo", "DeformableScene",
    "adam_step", "fit_static", "fit_dynamic", "loss_ref", "sds_step",
    "active_backend", "numba_enabled", "set_numba_enabled",
]
