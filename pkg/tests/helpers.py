"""Shared samplers for the test suite."""

import math

import numpy as np

from splatcam.cameras import Camera, CameraModel
from splatcam.model import Scene


def model_cameras() -> dict[str, Camera]:
    """One camera per model; the fisheye reaches 97.5 degrees incidence."""
    return {
        "pinhole": Camera(CameraModel.PINHOLE, 128, 96, fx=110.0, fy=105.0, cx=60.3, cy=50.1),
        "fisheye_equidistant": Camera(CameraModel.FISHEYE, 128, 128, fx=38.0, fy=37.0,
                                      fov_max=math.radians(97.5)),
        "panorama": Camera(CameraModel.PANORAMA, 256, 128),
    }


def visible_points(cam: Camera, n: int, rng, theta_deg=None) -> np.ndarray:
    """Seeded camera-space points inside the camera's usable field of view.

    ``theta_deg=(lo, hi)`` restricts fisheye samples to an incidence band.
    Panorama samples stay away from the poles and the longitude seam.
    """
    dist = rng.uniform(0.5, 10.0, size=n)
    if cam.model is CameraModel.PINHOLE:
        u = rng.uniform(0, cam.width, size=n)
        v = rng.uniform(0, cam.height, size=n)
        d = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones(n)], axis=1)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return d * np.maximum(dist, 0.3 / d[:, 2])[:, None]
    if cam.model is CameraModel.FISHEYE:
        lo, hi = theta_deg or (0.0, math.degrees(cam.fov_max))
        theta = np.radians(rng.uniform(lo, hi, size=n))
        phi = rng.uniform(0, 2 * math.pi, size=n)
        d = np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], axis=1)
        return d * dist[:, None]
    lon = rng.uniform(-0.95, 0.95, size=n) * math.pi
    lat = rng.uniform(-0.45, 0.45, size=n) * math.pi
    d = np.stack([np.cos(lat) * np.sin(lon), np.sin(lat), np.cos(lat) * np.cos(lon)], axis=1)
    return d * dist[:, None]


def random_scene(n: int, rng, spread: float = 1.0, size=(0.03, 0.12), sh_degree: int = 0,
                 background=(0.1, 0.2, 0.3)) -> Scene:
    means = rng.normal(scale=spread, size=(n, 3))
    q = rng.normal(size=(n, 4))
    log_scales = np.log(rng.uniform(*size, size=(n, 1))) + rng.uniform(-0.3, 0.3, size=(n, 3))
    sh = np.zeros((n, 16, 3))
    k = (sh_degree + 1) ** 2
    sh[:, :k] = rng.normal(scale=0.3, size=(n, k, 3))
    sh[:, 0] = rng.uniform(-1.5, 1.5, size=(n, 3))
    return Scene(means, q, log_scales, rng.uniform(-2.0, 3.0, size=n), sh, background=background)


def matrix_rel_err(a, b) -> np.ndarray:
    """Per-item error of stacked matrices, relative to the larger max-abs entry."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    axes = tuple(range(1, a.ndim))
    scale = np.maximum(np.maximum(np.abs(a).max(axis=axes), np.abs(b).max(axis=axes)), 1e-300)
    return np.abs(a - b).max(axis=axes) / scale
