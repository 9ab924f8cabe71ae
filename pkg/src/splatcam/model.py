"""Gaussian primitives, scenes, image buffers and the per-Gaussian math that
does not depend on the camera: covariance assembly and SH color."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)
SH_COEFFS = 16


class DegenerateRotation(ValueError):
    pass


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class Gaussian3D:
    mean: np.ndarray
    rotation: np.ndarray  # (w, x, y, z), unnormalized
    log_scale: np.ndarray
    opacity_logit: float
    sh_coeffs: np.ndarray = field(default_factory=lambda: np.zeros((SH_COEFFS, 3)))

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.opacity_logit = float(self.opacity_logit)
        sh = np.asarray(self.sh_coeffs, dtype=np.float64)
        if sh.shape != (SH_COEFFS, 3):
            full = np.zeros((SH_COEFFS, 3))
            full[: sh.reshape(-1, 3).shape[0]] = sh.reshape(-1, 3)
            sh = full
        self.sh_coeffs = sh

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


class Scene:
    """Ordered set of Gaussians stored as parallel arrays.

    Index ``i`` is the identity of a Gaussian for gradients and
    tie-breaking, so the arrays are never reordered in place.
    """

    def __init__(
        self,
        means,
        rotations,
        log_scales,
        opacity_logits,
        sh_coeffs=None,
        background=(0.0, 0.0, 0.0),
    ):
        self.means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
        n = self.means.shape[0]
        self.rotations = np.asarray(rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(opacity_logits, dtype=np.float64).reshape(n)
        if sh_coeffs is None:
            sh_coeffs = np.zeros((n, SH_COEFFS, 3))
        self.sh_coeffs = np.asarray(sh_coeffs, dtype=np.float64).reshape(n, SH_COEFFS, 3)
        self.background = np.asarray(background, dtype=np.float64).reshape(3)

    @classmethod
    def empty(cls, background=(0.0, 0.0, 0.0)) -> "Scene":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
                   background=background)

    @classmethod
    def from_gaussians(cls, gaussians: Iterable[Gaussian3D], background=(0.0, 0.0, 0.0)) -> "Scene":
        gs = list(gaussians)
        if not gs:
            return cls.empty(background)
        return cls(
            [g.mean for g in gs],
            [g.rotation for g in gs],
            [g.log_scale for g in gs],
            [g.opacity_logit for g in gs],
            [g.sh_coeffs for g in gs],
            background=background,
        )

    def __len__(self) -> int:
        return self.means.shape[0]

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(self.means[i], self.rotations[i], self.log_scales[i],
                          self.opacity_logits[i], self.sh_coeffs[i])

    def __iter__(self) -> Iterator[Gaussian3D]:
        return (self[i] for i in range(len(self)))

    @property
    def gaussians(self) -> list[Gaussian3D]:
        return list(self)

    def copy(self) -> "Scene":
        return Scene(self.means.copy(), self.rotations.copy(), self.log_scales.copy(),
                     self.opacity_logits.copy(), self.sh_coeffs.copy(), self.background.copy())

    def sh_degree(self) -> int:
        """Highest SH band with any non-zero coefficient."""
        for degree, first in ((3, 9), (2, 4), (1, 1)):
            if np.any(self.sh_coeffs[:, first:(degree + 1) ** 2]):
                return degree
        return 0


@dataclass
class ImageBuffer:
    pixels: np.ndarray  # (H, W, 3)
    alpha: np.ndarray | None = None  # optional coverage, (H, W)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) pixels, got {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("image contains non-finite values")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @classmethod
    def filled(cls, width: int, height: int, color) -> "ImageBuffer":
        px = np.empty((height, width, 3))
        px[:] = np.asarray(color, dtype=np.float64)
        return cls(px)


# -- rotation / covariance --------------------------------------------------

def _normalize_quats(q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norm = np.linalg.norm(q, axis=-1)
    if np.any(norm < 1e-12):
        raise DegenerateRotation("degenerate rotation: zero-norm quaternion")
    return q / norm[..., None], norm


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions in (w, x, y, z) order."""
    q = np.asarray(q, dtype=np.float64)
    qn, _ = _normalize_quats(q)
    w, x, y, z = np.moveaxis(qn, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def build_covariances(rotations: np.ndarray, log_scales: np.ndarray) -> np.ndarray:
    R = quat_to_rotmat(rotations)
    M = R * np.exp(log_scales)[..., None, :]
    sigma = M @ np.swapaxes(M, -1, -2)
    # exact symmetry; matmul rounding may differ in the mirrored entries
    return 0.5 * (sigma + np.swapaxes(sigma, -1, -2))


def build_covariance(rotation, log_scale) -> np.ndarray:
    """Sigma = R S S^T R^T for one Gaussian (quaternion normalized here)."""
    return build_covariances(np.asarray(rotation, dtype=np.float64)[None],
                             np.asarray(log_scale, dtype=np.float64)[None])[0]


def build_covariances_backward(rotations, log_scales, dL_dsigma):
    """Batched gradients w.r.t. the stored quaternions and log-scales.

    ``dL_dsigma`` is the full-matrix gradient of a symmetric (..., 3, 3)
    covariance.
    """
    rotations = np.asarray(rotations, dtype=np.float64)
    log_scales = np.asarray(log_scales, dtype=np.float64)
    G = np.asarray(dL_dsigma, dtype=np.float64)
    G = 0.5 * (G + np.swapaxes(G, -1, -2))

    qn, norm = _normalize_quats(rotations)
    R = quat_to_rotmat(qn)
    s = np.exp(log_scales)
    M = R * s[..., None, :]
    dM = 2.0 * G @ M

    # dL/ds_i = R[:, i] . dM[:, i]
    dL_ds = np.einsum("...ji,...ji->...i", R, dM)
    dL_dlog_scale = dL_ds * s
    dR = dM * s[..., None, :]

    w, x, y, z = np.moveaxis(qn, -1, 0)
    d = dR
    dw = 2 * (-z * d[..., 0, 1] + y * d[..., 0, 2] + z * d[..., 1, 0]
              - x * d[..., 1, 2] - y * d[..., 2, 0] + x * d[..., 2, 1])
    dx = 2 * (y * d[..., 0, 1] + z * d[..., 0, 2] + y * d[..., 1, 0]
              - 2 * x * d[..., 1, 1] - w * d[..., 1, 2] + z * d[..., 2, 0]
              + w * d[..., 2, 1] - 2 * x * d[..., 2, 2])
    dy = 2 * (-2 * y * d[..., 0, 0] + x * d[..., 0, 1] + w * d[..., 0, 2]
              + x * d[..., 1, 0] + z * d[..., 1, 2] - w * d[..., 2, 0]
              + z * d[..., 2, 1] - 2 * y * d[..., 2, 2])
    dz = 2 * (-2 * z * d[..., 0, 0] - w * d[..., 0, 1] + x * d[..., 0, 2]
              + w * d[..., 1, 0] - 2 * z * d[..., 1, 1] + y * d[..., 1, 2]
              + x * d[..., 2, 0] + y * d[..., 2, 1])
    dqn = np.stack([dw, dx, dy, dz], axis=-1)
    # through q / |q|
    dq = (dqn - qn * np.sum(qn * dqn, axis=-1, keepdims=True)) / norm[..., None]
    return dq, dL_dlog_scale


def build_covariance_backward(rotation, log_scale, dL_dSigma):
    dq, ds = build_covariances_backward(np.asarray(rotation, dtype=np.float64)[None],
                                        np.asarray(log_scale, dtype=np.float64)[None],
                                        np.asarray(dL_dSigma, dtype=np.float64)[None])
    return dq[0], ds[0]


# -- spherical harmonics ----------------------------------------------------

def eval_sh_batch(sh: np.ndarray, dirs: np.ndarray, degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate SH color for (N, 16, 3) coefficients along (N, 3) unit directions.

    Returns the clamped colors and a mask of channels that were *not*
    clamped (the ones that pass gradient).
    """
    if not 0 <= degree <= 3:
        raise ValueError(f"SH degree must be in 0..3, got {degree}")
    result = SH_C0 * sh[:, 0]
    if degree > 0:
        x, y, z = (dirs[:, i:i + 1] for i in range(3))
        result = result - SH_C1 * y * sh[:, 1] + SH_C1 * z * sh[:, 2] - SH_C1 * x * sh[:, 3]
        if degree > 1:
            xx, yy, zz = x * x, y * y, z * z
            xy, yz, xz = x * y, y * z, x * z
            result = (result
                      + SH_C2[0] * xy * sh[:, 4]
                      + SH_C2[1] * yz * sh[:, 5]
                      + SH_C2[2] * (2.0 * zz - xx - yy) * sh[:, 6]
                      + SH_C2[3] * xz * sh[:, 7]
                      + SH_C2[4] * (xx - yy) * sh[:, 8])
            if degree > 2:
                result = (result
                          + SH_C3[0] * y * (3.0 * xx - yy) * sh[:, 9]
                          + SH_C3[1] * xy * z * sh[:, 10]
                          + SH_C3[2] * y * (4.0 * zz - xx - yy) * sh[:, 11]
                          + SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy) * sh[:, 12]
                          + SH_C3[4] * x * (4.0 * zz - xx - yy) * sh[:, 13]
                          + SH_C3[5] * z * (xx - yy) * sh[:, 14]
                          + SH_C3[6] * x * (xx - 3.0 * yy) * sh[:, 15])
    result = result + 0.5
    passed = result > 0.0
    return np.maximum(result, 0.0), passed


def eval_sh(sh_coeffs, view_dir, degree: int = 3) -> np.ndarray:
    sh = np.asarray(sh_coeffs, dtype=np.float64).reshape(1, -1, 3)
    if sh.shape[1] < SH_COEFFS:
        sh = np.concatenate([sh, np.zeros((1, SH_COEFFS - sh.shape[1], 3))], axis=1)
    color, _ = eval_sh_batch(sh, np.asarray(view_dir, dtype=np.float64).reshape(1, 3), degree)
    return color[0]
