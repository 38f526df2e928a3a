"""Azimuth alignment of a loaded cloud against a reference image.

Feed-forward generators often hand back clouds whose front does not face
the reference view; scanning horizontal angles for the lowest pixel L2
distance recovers the alignment.
"""

import numpy as np

from .gaussians import Camera, GaussianCloud
from .rasterizer import render

__all__ = ["align_azimuth"]


def align_azimuth(cloud: GaussianCloud, reference, step=1.0, radius=1.5,
                  fov_y=49.1, background=(1.0, 1.0, 1.0)) -> float:
    """Azimuth in [-180, 180] whose render best matches the reference.

    Scans at zero elevation with the given angular step; ties resolve to
    the smallest absolute azimuth (first in ascending scan order on an
    exact tie). The reference resolution fixes the render resolution.
    """
    reference = np.asarray(reference, dtype=np.float64)
    if reference.ndim != 3 or reference.shape[2] != 3:
        raise ValueError("reference must be an (H, W, 3) image")
    height, width = reference.shape[:2]
    best_az = None
    best_d2 = np.inf
    azimuths = np.arange(-180.0, 180.0 + 0.5 * step, step)
    for az in sorted(azimuths, key=lambda a: (abs(a), a)):
        cam = Camera(float(az), 0.0, radius, fov_y, width, height)
        img = render(cloud, cam, background).rgb
        d2 = float(np.sum((img - reference) ** 2))
        if d2 < best_d2:
            best_d2 = d2
            best_az = float(az)
    return best_az
