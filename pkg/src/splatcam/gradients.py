"""Analytic backward pass for the tiled renderer.

Chain: image gradient -> per-splat (mean_px, conic, color, opacity) ->
camera-space mean through the projection Jacobian (direct path) and through
dJ/dmu_c (covariance path) -> world mean, quaternion, log-scale, opacity
logit and SH DC coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import cameras as cams
from .model import SH_C0, Scene, build_covariances_backward
from .splatting import (
    ForwardContext,
    _blend_tile,
    _dtype,
    _pixel_centers,
    _tile_inputs,
    map_tiles,
)

JacobianGradFn = Callable[[np.ndarray, cams.Camera], np.ndarray]


class ContextMismatch(ValueError):
    pass


@dataclass
class SplatGradients:
    mean_px: np.ndarray  # (K, 2)
    conic: np.ndarray  # (K, 3) w.r.t. (a, b, c); b is the shared off-diagonal
    color: np.ndarray  # (K, 3)
    alpha_max: np.ndarray  # (K,)


@dataclass
class GradientBuffer:
    d_mean: np.ndarray
    d_rotation: np.ndarray
    d_log_scale: np.ndarray
    d_opacity_logit: np.ndarray
    d_sh_dc: np.ndarray

    GROUPS = ("mean", "rotation", "log_scale", "opacity_logit", "sh_dc")

    @classmethod
    def zeros(cls, n: int) -> "GradientBuffer":
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)))

    def group(self, name: str) -> np.ndarray:
        return getattr(self, "d_" + name)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: self.group(name) for name in self.GROUPS}

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.as_dict().values())


# -- rasterization ---------------------------------------------------------------

def rasterize_backward(ctx: ForwardContext, dL_dimage) -> SplatGradients:
    """Gradients of the loss w.r.t. every splat field.

    Re-evaluates each tile's blend with the forward rules, so skipped,
    cut-off and post-termination terms get exactly zero gradient and
    clamped alphas pass none through the clamp.
    """
    cam = ctx.camera
    w, h = cam.width, cam.height
    G_img = np.asarray(dL_dimage, dtype=np.float64)
    if G_img.shape != (h, w, 3):
        raise ContextMismatch(f"image gradient has shape {G_img.shape}, context expects {(h, w, 3)}")
    splats, tiles = ctx.splats, ctx.tiles
    dtype = _dtype(ctx.precision)
    bg = ctx.background.astype(dtype)

    def work(tile):
        refs = tiles.tile_refs(tile)
        if refs.size == 0:
            return None
        x0, x1, y0, y1 = tiles.tile_bounds(tile, w, h)
        G = G_img[y0:y1, x0:x1].reshape(-1, 3).astype(dtype)
        if not np.any(G):
            return None
        px, py = _pixel_centers(x0, x1, y0, y1, np.float64)
        means, conics, opac, colors = _tile_inputs(splats, refs, dtype)
        b = _blend_tile(px, py, means, conics, opac, dtype)
        conics = conics.astype(dtype)

        cg = G @ colors.T  # (P, k): color_j . dL/dC_p
        u = b.weights * cg
        after = np.cumsum(u[:, ::-1], axis=1)[:, ::-1] - u
        after = after + (b.t_final * (G @ bg))[:, None]
        dL_dalpha = b.t_before * cg - after / (1.0 - b.alpha)
        dL_dalpha = np.where(b.included & b.active & b.unclamped, dL_dalpha, 0.0)

        d_color = b.weights.T @ G
        d_opac = np.sum(dL_dalpha * b.gauss, axis=0)
        dL_dq = dL_dalpha * (-0.5 * b.alpha)
        dx, dy = b.dx, b.dy
        ca, cb, cc = conics[:, 0], conics[:, 1], conics[:, 2]
        d_conic = np.stack([np.sum(dL_dq * dx * dx, axis=0),
                            np.sum(dL_dq * 2.0 * dx * dy, axis=0),
                            np.sum(dL_dq * dy * dy, axis=0)], axis=1)
        d_mean = np.stack([np.sum(dL_dq * -2.0 * (ca * dx + cb * dy), axis=0),
                           np.sum(dL_dq * -2.0 * (cb * dx + cc * dy), axis=0)], axis=1)
        return refs, d_mean, d_conic, d_color, d_opac

    k = len(splats)
    out = SplatGradients(np.zeros((k, 2)), np.zeros((k, 3)), np.zeros((k, 3)), np.zeros(k))
    # fixed ascending-tile reduction keeps results independent of thread count
    for part in map_tiles(work, tiles.num_tiles, ctx.threads):
        if part is None:
            continue
        refs, d_mean, d_conic, d_color, d_opac = part
        out.mean_px[refs] += d_mean
        out.conic[refs] += d_conic
        out.color[refs] += d_color
        out.alpha_max[refs] += d_opac
    return out


# -- projection -----------------------------------------------------------------

def mean_backward_batch(points, camera: cams.Camera, dL_dmean_px) -> np.ndarray:
    J = cams.jacobian_points(points, camera)
    return np.einsum("nij,ni->nj", J, np.asarray(dL_dmean_px, dtype=np.float64).reshape(-1, 2))


def mean_backward(point, camera: cams.Camera, dL_dmean_px) -> np.ndarray:
    """dL/dmu_c = J^T dL/dmu_p for a single camera-space point."""
    return mean_backward_batch(point, camera, dL_dmean_px)[0]


def conic_to_cov2d_grad(conics, dL_dconic) -> np.ndarray:
    """Full-matrix gradient w.r.t. Sigma_p given gradients w.r.t. its inverse."""
    A = np.empty(conics.shape[:-1] + (2, 2))
    A[..., 0, 0], A[..., 0, 1], A[..., 1, 0], A[..., 1, 1] = (
        conics[..., 0], conics[..., 1], conics[..., 1], conics[..., 2])
    GA = np.empty_like(A)
    GA[..., 0, 0] = dL_dconic[..., 0]
    GA[..., 0, 1] = GA[..., 1, 0] = 0.5 * dL_dconic[..., 1]
    GA[..., 1, 1] = dL_dconic[..., 2]
    return -A @ GA @ A


def covariance_projection_backward_batch(points, camera: cams.Camera, cov3d, dL_dcov2d,
                                         jacobian=None, jacobian_grad: JacobianGradFn | None = None):
    """Returns (dL/dSigma (N,3,3), extra dL/dmu_c (N,3)) for Sigma_p = T Sigma T^T."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    W = camera.rotation_wc
    J = cams.jacobian_points(points, camera) if jacobian is None else jacobian
    T = J @ W
    G = np.asarray(dL_dcov2d, dtype=np.float64)
    G = 0.5 * (G + np.swapaxes(G, -1, -2))
    dL_dcov3d = np.swapaxes(T, 1, 2) @ G @ T
    dL_dT = 2.0 * G @ T @ cov3d
    dL_dJ = dL_dT @ W.T
    dJ = (jacobian_grad or cams.jacobian_grad_points)(points, camera)
    extra = np.einsum("nij,nkij->nk", dL_dJ, dJ)
    return dL_dcov3d, extra


def covariance_projection_backward(point, camera: cams.Camera, W, Sigma, dL_dSigma_p,
                                   jacobian_grad: JacobianGradFn | None = None):
    W = np.asarray(W, dtype=np.float64)
    if not np.allclose(W, camera.rotation_wc):
        camera = camera.with_model(camera.model, rotation_wc=W)
    d_cov, extra = covariance_projection_backward_batch(
        point, camera, np.asarray(Sigma, dtype=np.float64)[None],
        np.asarray(dL_dSigma_p, dtype=np.float64)[None], jacobian_grad=jacobian_grad)
    return d_cov[0], extra[0]


# -- full backward ----------------------------------------------------------------

def _check_context(scene: Scene, camera: cams.Camera, ctx: ForwardContext):
    if ctx.num_gaussians != len(scene):
        raise ContextMismatch(f"context was rendered from {ctx.num_gaussians} Gaussians, scene has {len(scene)}")
    if ctx.scene_means is not None and not np.array_equal(ctx.scene_means, scene.means):
        raise ContextMismatch("scene means changed since the forward pass")
    c = ctx.camera
    if (c.model is not camera.model or (c.width, c.height) != (camera.width, camera.height)
            or not np.array_equal(c.rotation_wc, camera.rotation_wc)
            or not np.array_equal(c.translation_wc, camera.translation_wc)
            or (c.fx, c.fy, c.cx, c.cy) != (camera.fx, camera.fy, camera.cx, camera.cy)):
        raise ContextMismatch("camera differs from the one used in the forward pass")


def backward(scene: Scene, camera: cams.Camera, ctx: ForwardContext, dL_dimage,
             jacobian_grad: JacobianGradFn | None = None, parts: str = "all") -> GradientBuffer:
    """Gradients of the loss w.r.t. every trainable Gaussian parameter.

    ``parts`` selects the mean paths ("all", "direct" or "covariance") so the
    two contributions to d_mean can be checked separately.
    """
    _check_context(scene, camera, ctx)
    n = len(scene)
    out = GradientBuffer.zeros(n)
    splats = ctx.splats
    if len(splats) == 0:
        return out
    sg = rasterize_backward(ctx, dL_dimage)
    geo = splats.geometry
    src = splats.source

    dL_dmc = np.zeros((len(splats), 3))
    if parts in ("all", "direct"):
        dL_dmc += np.einsum("nij,ni->nj", geo.jacobian, sg.mean_px)
    dL_dcov2d = conic_to_cov2d_grad(splats.conics, sg.conic)
    dL_dcov3d, extra = covariance_projection_backward_batch(
        geo.mean_cam, camera, geo.cov3d, dL_dcov2d, jacobian=geo.jacobian, jacobian_grad=jacobian_grad)
    if parts in ("all", "covariance"):
        dL_dmc += extra

    d_rot, d_ls = build_covariances_backward(scene.rotations[src], scene.log_scales[src], dL_dcov3d)
    op = splats.opacities
    out.d_mean[src] = dL_dmc @ camera.rotation_wc
    out.d_rotation[src] = d_rot
    out.d_log_scale[src] = d_ls
    out.d_opacity_logit[src] = sg.alpha_max * op * (1.0 - op)
    out.d_sh_dc[src] = SH_C0 * sg.color * geo.color_passed
    return out
