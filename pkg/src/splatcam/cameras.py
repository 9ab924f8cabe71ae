"""Camera models and the differentiable projection stage.

Every model supplies the same four batched functions over camera-space
points ``(N, 3)``:

* ``project_points``      -> pixels ``(N, 2)`` and a visibility mask
* ``jacobian_points``     -> d(pixel)/d(point), ``(N, 2, 3)``
* ``jacobian_grad_points``-> dJ/dx, dJ/dy, dJ/dz stacked as ``(N, 3, 2, 3)``
* ``unproject_pixels``    -> unit ray directions ``(N, 3)``

Image convention: pixel ``(u, v)`` with ``u`` to the right, ``v`` down; the
center of pixel ``(i, j)`` sits at ``(i + 0.5, j + 0.5)``. Camera space
follows the same convention (x right, y down, z forward).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

NEAR_CLIP = 0.2
FOV_MARGIN = math.radians(10.0)
# below this l_z / z_c the fisheye terms use the series in t = l_z / z_c
SERIES_RATIO = 0.05
_SERIES_TERMS = 12


class CameraModel(str, enum.Enum):
    PINHOLE = "pinhole"
    FISHEYE = "fisheye_equidistant"
    PANORAMA = "panorama"

    @classmethod
    def parse(cls, value) -> "CameraModel":
        if isinstance(value, CameraModel):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown camera model {value!r} (expected one of {names})") from None


@dataclass
class Camera:
    model: CameraModel
    width: int
    height: int
    fx: float = 1.0
    fy: float = 1.0
    cx: float | None = None
    cy: float | None = None
    rotation_wc: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation_wc: np.ndarray = field(default_factory=lambda: np.zeros(3))
    fov_max: float = math.pi / 2

    def __post_init__(self):
        self.model = CameraModel.parse(self.model)
        self.width = int(self.width)
        self.height = int(self.height)
        if self.width < 16 or self.height < 16:
            raise ValueError(f"image must be at least 16x16, got {self.width}x{self.height}")
        if self.cx is None:
            self.cx = self.width / 2.0
        if self.cy is None:
            self.cy = self.height / 2.0
        self.fx, self.fy = float(self.fx), float(self.fy)
        self.cx, self.cy = float(self.cx), float(self.cy)
        if self.model is not CameraModel.PANORAMA and (self.fx <= 0 or self.fy <= 0):
            raise ValueError("focal lengths must be positive")
        self.rotation_wc = np.asarray(self.rotation_wc, dtype=np.float64).reshape(3, 3)
        self.translation_wc = np.asarray(self.translation_wc, dtype=np.float64).reshape(3)
        err = np.abs(self.rotation_wc.T @ self.rotation_wc - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"rotation_wc is not orthonormal (max deviation {err:.2e})")
        self.fov_max = float(self.fov_max)

    @property
    def center(self) -> np.ndarray:
        """Camera position in world space."""
        return -self.rotation_wc.T @ self.translation_wc

    def with_model(self, model, **overrides) -> "Camera":
        """Same pose and image size under a different projection model."""
        kw = dict(model=CameraModel.parse(model), width=self.width, height=self.height,
                  fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy,
                  rotation_wc=self.rotation_wc.copy(),
                  translation_wc=self.translation_wc.copy(), fov_max=self.fov_max)
        kw.update(overrides)
        return Camera(**kw)

    @classmethod
    def look_at(cls, model, width, height, position, target=(0.0, 0.0, 0.0),
                up=(0.0, -1.0, 0.0), **kwargs) -> "Camera":
        """Camera at ``position`` whose optical axis passes through ``target``.

        ``up`` is the world direction that should appear at the top of the
        image (``-y`` in camera space).
        """
        position = np.asarray(position, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - position
        z /= np.linalg.norm(z)
        up = np.asarray(up, dtype=np.float64)
        y = -(up - np.dot(up, z) * z)
        norm = np.linalg.norm(y)
        if norm < 1e-9:
            raise ValueError("up vector is parallel to the viewing direction")
        y /= norm
        x = np.cross(y, z)
        W = np.stack([x, y, z])
        return cls(model=model, width=width, height=height, rotation_wc=W,
                   translation_wc=-W @ position, **kwargs)


@dataclass
class CamPoint:
    x_c: float
    y_c: float
    z_c: float

    def __array__(self, dtype=None, copy=None):
        return np.array([self.x_c, self.y_c, self.z_c], dtype=dtype or np.float64)

    @property
    def l_z(self) -> float:
        return math.hypot(self.x_c, self.y_c)

    @property
    def theta(self) -> float:
        return math.atan2(self.l_z, self.z_c)

    @property
    def l_2(self) -> float:
        return self.x_c ** 2 + self.y_c ** 2 + self.z_c ** 2


@dataclass
class ProjectionResult:
    pixel: np.ndarray | None
    jacobian: np.ndarray | None
    visible: bool


# -- world -> camera ----------------------------------------------------------

def world_to_camera_points(means: np.ndarray, camera: Camera) -> np.ndarray:
    return np.asarray(means, dtype=np.float64) @ camera.rotation_wc.T + camera.translation_wc


def world_to_camera(mean_world, camera: Camera) -> CamPoint:
    p = camera.rotation_wc @ np.asarray(mean_world, dtype=np.float64) + camera.translation_wc
    return CamPoint(*p)


# -- pinhole ------------------------------------------------------------------

def _pinhole_project(p, cam):
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    visible = z > NEAR_CLIP
    zs = np.where(visible, z, 1.0)
    pix = np.stack([cam.cx + cam.fx * x / zs, cam.cy + cam.fy * y / zs], axis=1)
    return pix, visible


def _pinhole_jacobian(p, cam):
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    J = np.zeros((p.shape[0], 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * x / (z * z)
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * y / (z * z)
    return J


def _pinhole_jacobian_grad(p, cam):
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    z2 = z * z
    z3 = z2 * z
    dJ = np.zeros((p.shape[0], 3, 2, 3))
    dJ[:, 0, 0, 2] = -cam.fx / z2
    dJ[:, 1, 1, 2] = -cam.fy / z2
    dJ[:, 2, 0, 0] = -cam.fx / z2
    dJ[:, 2, 0, 2] = 2.0 * cam.fx * x / z3
    dJ[:, 2, 1, 1] = -cam.fy / z2
    dJ[:, 2, 1, 2] = 2.0 * cam.fy * y / z3
    return dJ


def _pinhole_unproject(pix, cam):
    d = np.stack([(pix[:, 0] - cam.cx) / cam.fx, (pix[:, 1] - cam.cy) / cam.fy,
                  np.ones(pix.shape[0])], axis=1)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


# -- equidistant fisheye ------------------------------------------------------
#
# With r = l_z, rho2 = |p|^2, theta = atan2(r, z):
#   g = theta / r           pixel offset = f * (x, y) * g
#   h = (dg/dr) / r         so dg/dx = x h, dg/dy = y h, dg/dz = -1 / rho2
#   k = (dh/dr) / r         and dh/dz = 2 / rho2^2
# Near the optical axis (small t = r / z, z > 0) g, h and k are evaluated
# from the series of atan(t) / t, which avoids the 0/0 and the heavy
# cancellation of the closed forms.

def _series_ghk(r, z):
    t2 = (r / z) ** 2
    g = np.zeros_like(r)
    h = np.zeros_like(r)
    k = np.zeros_like(r)
    for n in reversed(range(_SERIES_TERMS)):
        sign = -1.0 if n % 2 else 1.0
        g = g * t2 + sign / (2 * n + 1)
    for n in reversed(range(1, _SERIES_TERMS)):
        sign = -1.0 if n % 2 else 1.0
        h = h * t2 + sign * 2 * n / (2 * n + 1)
    for n in reversed(range(2, _SERIES_TERMS)):
        sign = -1.0 if n % 2 else 1.0
        k = k * t2 + sign * 2 * n * (2 * n - 2) / (2 * n + 1)
    return g / z, h / z ** 3, k / z ** 5


def _closed_ghk(r, z, theta):
    rho2 = r * r + z * z
    r2 = r * r
    g = theta / r
    h = z / (r2 * rho2) - theta / (r2 * r)
    k = -2.0 * z * (rho2 + r2) / (r2 * r2 * rho2 * rho2) - z / (r2 * r2 * rho2) + 3.0 * theta / (r2 * r2 * r)
    return g, h, k


def _fisheye_ghk(p, force: str | None = None):
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    r = np.hypot(x, y)
    theta = np.arctan2(r, z)
    use_series = (z > 0) & (r < SERIES_RATIO * np.abs(z))
    if force == "series":
        use_series = np.ones_like(use_series)
    elif force == "closed":
        use_series = np.zeros_like(use_series)
    g = np.empty_like(r)
    h = np.empty_like(r)
    k = np.empty_like(r)
    if np.any(use_series):
        g[use_series], h[use_series], k[use_series] = _series_ghk(r[use_series], z[use_series])
    rest = ~use_series
    if np.any(rest):
        with np.errstate(divide="ignore", invalid="ignore"):
            g[rest], h[rest], k[rest] = _closed_ghk(r[rest], z[rest], theta[rest])
    return theta, g, h, k


def _fisheye_visible(p, cam, theta):
    r = np.hypot(p[:, 0], p[:, 1])
    # directly behind the lens the direction of the offset is undefined
    singular = (r <= 1e-12 * np.abs(p[:, 2])) & (p[:, 2] <= 0)
    return (theta <= cam.fov_max + FOV_MARGIN) & ~singular & (np.linalg.norm(p, axis=1) > 1e-12)


def _fisheye_project(p, cam, force=None):
    theta, g, _, _ = _fisheye_ghk(p, force)
    visible = _fisheye_visible(p, cam, theta)
    g = np.where(visible, g, 0.0)
    pix = np.stack([cam.cx + cam.fx * p[:, 0] * g, cam.cy + cam.fy * p[:, 1] * g], axis=1)
    return pix, visible


def _fisheye_jacobian(p, cam, force=None):
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    _, g, h, _ = _fisheye_ghk(p, force)
    inv_rho2 = 1.0 / (x * x + y * y + z * z)
    J = np.empty((p.shape[0], 2, 3))
    J[:, 0, 0] = cam.fx * (g + x * x * h)
    J[:, 0, 1] = cam.fx * x * y * h
    J[:, 0, 2] = -cam.fx * x * inv_rho2
    J[:, 1, 0] = cam.fy * x * y * h
    J[:, 1, 1] = cam.fy * (g + y * y * h)
    J[:, 1, 2] = -cam.fy * y * inv_rho2
    return J


def _fisheye_jacobian_grad(p, cam, force=None):
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    _, _, h, k = _fisheye_ghk(p, force)
    inv_rho2 = 1.0 / (x * x + y * y + z * z)
    inv_rho4 = inv_rho2 * inv_rho2
    xy = x * y
    # rows of J divided by the focal length
    dx = np.empty((p.shape[0], 2, 3))
    dx[:, 0, 0] = 3.0 * x * h + x ** 3 * k
    dx[:, 0, 1] = y * h + x * x * y * k
    dx[:, 0, 2] = -inv_rho2 + 2.0 * x * x * inv_rho4
    dx[:, 1, 0] = dx[:, 0, 1]
    dx[:, 1, 1] = x * h + x * y * y * k
    dx[:, 1, 2] = 2.0 * xy * inv_rho4

    dy = np.empty_like(dx)
    dy[:, 0, 0] = y * h + x * x * y * k
    dy[:, 0, 1] = x * h + x * y * y * k
    dy[:, 0, 2] = 2.0 * xy * inv_rho4
    dy[:, 1, 0] = dy[:, 0, 1]
    dy[:, 1, 1] = 3.0 * y * h + y ** 3 * k
    dy[:, 1, 2] = -inv_rho2 + 2.0 * y * y * inv_rho4

    dz = np.empty_like(dx)
    dz[:, 0, 0] = -inv_rho2 + 2.0 * x * x * inv_rho4
    dz[:, 0, 1] = 2.0 * xy * inv_rho4
    dz[:, 0, 2] = 2.0 * x * z * inv_rho4
    dz[:, 1, 0] = dz[:, 0, 1]
    dz[:, 1, 1] = -inv_rho2 + 2.0 * y * y * inv_rho4
    dz[:, 1, 2] = 2.0 * y * z * inv_rho4

    dJ = np.stack([dx, dy, dz], axis=1)
    dJ[:, :, 0, :] *= cam.fx
    dJ[:, :, 1, :] *= cam.fy
    return dJ


def _fisheye_unproject(pix, cam):
    a = (pix[:, 0] - cam.cx) / cam.fx
    b = (pix[:, 1] - cam.cy) / cam.fy
    theta = np.hypot(a, b)
    if np.any(theta > math.pi):
        raise ValueError("pixel lies beyond the 180 degree incidence circle (theta > pi)")
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(theta > 1e-12, np.sin(theta) / theta, 1.0)
    return np.stack([a * s, b * s, np.cos(theta)], axis=1)


# -- equirectangular panorama ---------------------------------------------------

def _panorama_project(p, cam):
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    q = np.hypot(x, z)
    visible = (q > 1e-12) & (np.linalg.norm(p, axis=1) > 1e-12)
    w, h = cam.width, cam.height
    lon = np.mod(np.arctan2(x, z) + math.pi, 2.0 * math.pi)
    xp = w * lon / (2.0 * math.pi)
    xp = np.where(xp >= w, xp - w, xp)
    yp = h * (np.arctan2(y, q) + math.pi / 2.0) / math.pi
    return np.stack([xp, yp], axis=1), visible


def _panorama_jacobian(p, cam):
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    q2 = x * x + z * z
    q = np.sqrt(q2)
    rho2 = q2 + y * y
    A = cam.width / (2.0 * math.pi)
    B = cam.height / math.pi
    J = np.zeros((p.shape[0], 2, 3))
    J[:, 0, 0] = A * z / q2
    J[:, 0, 2] = -A * x / q2
    J[:, 1, 0] = -B * x * y / (q * rho2)
    J[:, 1, 1] = B * q / rho2
    J[:, 1, 2] = -B * y * z / (q * rho2)
    return J


def _panorama_jacobian_grad(p, cam):
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    q2 = x * x + z * z
    q = np.sqrt(q2)
    rho2 = q2 + y * y
    q4 = q2 * q2
    rho4 = rho2 * rho2
    A = cam.width / (2.0 * math.pi)
    B = cam.height / math.pi
    m = 1.0 / (q * rho2)
    P = (rho2 + 2.0 * q2) / (q2 * q * rho4)
    c = (rho2 - 2.0 * q2) / (q * rho4)

    dJ = np.zeros((p.shape[0], 3, 2, 3))
    # d/dx
    dJ[:, 0, 0, 0] = A * (-2.0 * x * z / q4)
    dJ[:, 0, 0, 2] = A * (x * x - z * z) / q4
    dJ[:, 0, 1, 0] = B * (-y * m + x * x * y * P)
    dJ[:, 0, 1, 1] = B * x * c
    dJ[:, 0, 1, 2] = B * x * y * z * P
    # d/dy (the longitude row does not depend on y)
    dJ[:, 1, 1, 0] = B * (-x * m + 2.0 * x * y * y / (q * rho4))
    dJ[:, 1, 1, 1] = B * (-2.0 * q * y / rho4)
    dJ[:, 1, 1, 2] = B * (-z * m + 2.0 * y * y * z / (q * rho4))
    # d/dz
    dJ[:, 2, 0, 0] = A * (x * x - z * z) / q4
    dJ[:, 2, 0, 2] = A * 2.0 * x * z / q4
    dJ[:, 2, 1, 0] = B * x * y * z * P
    dJ[:, 2, 1, 1] = B * z * c
    dJ[:, 2, 1, 2] = B * (-y * m + y * z * z * P)
    return dJ


def _panorama_unproject(pix, cam):
    lon = 2.0 * math.pi * pix[:, 0] / cam.width - math.pi
    lat = math.pi * pix[:, 1] / cam.height - math.pi / 2.0
    cl = np.cos(lat)
    return np.stack([cl * np.sin(lon), np.sin(lat), cl * np.cos(lon)], axis=1)


# -- dispatch -------------------------------------------------------------------

_PROJECT = {
    CameraModel.PINHOLE: _pinhole_project,
    CameraModel.FISHEYE: _fisheye_project,
    CameraModel.PANORAMA: _panorama_project,
}
_JACOBIAN = {
    CameraModel.PINHOLE: _pinhole_jacobian,
    CameraModel.FISHEYE: _fisheye_jacobian,
    CameraModel.PANORAMA: _panorama_jacobian,
}
_JACOBIAN_GRAD = {
    CameraModel.PINHOLE: _pinhole_jacobian_grad,
    CameraModel.FISHEYE: _fisheye_jacobian_grad,
    CameraModel.PANORAMA: _panorama_jacobian_grad,
}
_UNPROJECT = {
    CameraModel.PINHOLE: _pinhole_unproject,
    CameraModel.FISHEYE: _fisheye_unproject,
    CameraModel.PANORAMA: _panorama_unproject,
}


def _as_points(points) -> np.ndarray:
    return np.asarray(points, dtype=np.float64).reshape(-1, 3)


def project_points(points, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    p = _as_points(points)
    return _PROJECT[camera.model](p, camera)


def jacobian_points(points, camera: Camera) -> np.ndarray:
    """d(x_p, y_p)/d(x_c, y_c, z_c) for each point, shape (N, 2, 3)."""
    return _JACOBIAN[camera.model](_as_points(points), camera)


def jacobian_grad_points(points, camera: Camera) -> np.ndarray:
    """Derivatives of the projection Jacobian, shape (N, 3, 2, 3).

    ``out[:, k]`` is dJ/d(point_k) for k in (x_c, y_c, z_c).
    """
    return _JACOBIAN_GRAD[camera.model](_as_points(points), camera)


def unproject_pixels(pixels, camera: Camera) -> np.ndarray:
    pix = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    return _UNPROJECT[camera.model](pix, camera)


def depth_keys(points: np.ndarray, camera: Camera) -> np.ndarray:
    """Sort key for blending order: z for pinhole, radial distance otherwise."""
    if camera.model is CameraModel.PINHOLE:
        return points[:, 2].copy()
    return np.linalg.norm(points, axis=1)


# -- single-point API -------------------------------------------------------------

def project(point, camera: Camera) -> ProjectionResult:
    p = _as_points(point)
    if np.linalg.norm(p) < 1e-12:
        return ProjectionResult(None, None, False)
    pix, visible = project_points(p, camera)
    if not visible[0]:
        return ProjectionResult(None, None, False)
    return ProjectionResult(pix[0], jacobian_points(p, camera)[0], True)


def projection_jacobian(point, camera: Camera) -> np.ndarray:
    return jacobian_points(point, camera)[0]


def projection_jacobian_grad(point, camera: Camera) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dJ = jacobian_grad_points(point, camera)[0]
    return dJ[0], dJ[1], dJ[2]


def unproject_direction(pixel, camera: Camera) -> np.ndarray:
    return unproject_pixels(pixel, camera)[0]
