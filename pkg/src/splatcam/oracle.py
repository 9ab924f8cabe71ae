"""Reference machinery for validating the fast renderer and its gradients.

Nothing here imports projection, binning or blending code from the fast
path. The brute-force renderer re-derives the camera projection from the
model formulas (its Jacobian comes from complex-step differentiation),
assembles covariances with its own quaternion formula and blends every
splat at every pixel in global (depth, index) order.

Review checklist for changes to this module:
  - no imports from ``splatcam.cameras``, ``splatcam.splatting`` or
    ``splatcam.gradients`` except the ``Camera``/``CameraModel`` data types;
  - blend constants are restated here, not imported.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .cameras import Camera, CameraModel
from .model import ImageBuffer, Scene, eval_sh_batch

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_STOP = 1e-4
CUTOFF = 9.0
DILATION = 0.3
NEAR = 0.2
MARGIN = math.radians(10.0)
TILE = 16
DEFAULT_LIMIT = 2000

# decision codes for one (pixel, splat) pair
SKIP, BLEND, CLAMPED = 0, 1, 2


class LimitExceeded(ValueError):
    pass


@dataclass
class FDConfig:
    step: float = 1e-5
    scheme: str = "central"
    tolerance: float = 1e-3
    group_tolerance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("finite-difference step must be positive")
        if self.scheme != "central":
            raise ValueError("only central differences are supported")

    def tol(self, group: str) -> float:
        return self.group_tolerance.get(group, self.tolerance)


def rel_err(a, b, floor: float = 1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def fd_jacobian(f: Callable, x, config: FDConfig | None = None) -> np.ndarray:
    """Central-difference Jacobian of ``f`` at ``x``; shape f(x).shape + x.shape."""
    config = config or FDConfig()
    x = np.asarray(x, dtype=np.float64)
    h = config.step
    f0 = np.asarray(f(x), dtype=np.float64)
    cols = []
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h
        e = e.reshape(x.shape)
        fp = np.asarray(f(x + e), dtype=np.float64)
        fm = np.asarray(f(x - e), dtype=np.float64)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise FloatingPointError(f"non-finite function value when perturbing coordinate {i}")
        cols.append((fp - fm) / (2.0 * h))
    return np.stack(cols, axis=-1).reshape(f0.shape + x.shape)


# -- reference projection --------------------------------------------------------

def _atan_over(s, z):
    """atan2(sqrt(s), z) / sqrt(s) for complex-capable inputs (s >= 0, not on the back axis)."""
    out = np.empty(np.broadcast(s, z).shape, dtype=np.result_type(s, z, np.float64))
    small = (np.real(z) > 0) & (np.real(s) < 1e-4 * np.real(z) ** 2)
    if np.any(small):
        u = s[small] / z[small] ** 2
        acc = np.zeros_like(u)
        for n in reversed(range(14)):
            acc = acc * (-u) + 1.0 / (2 * n + 1)
        out[small] = acc / z[small]
    big = ~small
    if np.any(big):
        lz = np.sqrt(s[big])
        out[big] = (math.pi / 2 - np.arctan(z[big] / lz)) / lz
    return out


def _reference_project(p, cam: Camera):
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    if cam.model is CameraModel.PINHOLE:
        return np.stack([cam.cx + cam.fx * x / z, cam.cy + cam.fy * y / z], axis=1)
    if cam.model is CameraModel.FISHEYE:
        g = _atan_over(x * x + y * y, z)
        return np.stack([cam.cx + cam.fx * x * g, cam.cy + cam.fy * y * g], axis=1)
    q = np.sqrt(x * x + z * z)
    front = np.real(z) >= 0
    half = np.where(front, np.arctan(x / np.where(front, q + z, 1.0)),
                    np.arctan((q - z) / np.where(front, 1.0, x)))
    lon = 2.0 * half
    lat = np.arctan(y / q)
    return np.stack([cam.width * (lon + math.pi) / (2.0 * math.pi),
                     cam.height * (lat + math.pi / 2.0) / math.pi], axis=1)


def _reference_visible(p, cam: Camera):
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    if cam.model is CameraModel.PINHOLE:
        return z > NEAR
    if cam.model is CameraModel.FISHEYE:
        lz = np.sqrt(x * x + y * y)
        theta = np.arctan2(lz, z)
        return (theta <= cam.fov_max + MARGIN) & ~((lz <= 1e-12 * np.abs(z)) & (z <= 0))
    q = np.sqrt(x * x + z * z)
    return q > 1e-12


def reference_jacobian(p, cam: Camera, h: float = 1e-30) -> np.ndarray:
    """Projection Jacobian by complex-step differentiation (exact to rounding)."""
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    cols = []
    for k in range(3):
        pc = p.astype(np.complex128)
        pc[:, k] += 1j * h
        cols.append(np.imag(_reference_project(pc, cam)) / h)
    return np.stack(cols, axis=-1)


def _reference_rotations(q):
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, v = q[:, 0], q[:, 1:]
    n = q.shape[0]
    cross = np.zeros((n, 3, 3))
    cross[:, 0, 1], cross[:, 0, 2] = -v[:, 2], v[:, 1]
    cross[:, 1, 0], cross[:, 1, 2] = v[:, 2], -v[:, 0]
    cross[:, 2, 0], cross[:, 2, 1] = -v[:, 1], v[:, 0]
    eye = np.eye(3)[None] * (w * w - np.sum(v * v, axis=1))[:, None, None]
    return eye + 2.0 * v[:, :, None] * v[:, None, :] + 2.0 * w[:, None, None] * cross


@dataclass
class ReferenceSplats:
    index: np.ndarray
    means: np.ndarray
    conics: np.ndarray
    depths: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray


def reference_splats(scene: Scene, cam: Camera, sh_degree: int = 3,
                     visible: np.ndarray | None = None) -> ReferenceSplats:
    W, b = cam.rotation_wc, cam.translation_wc
    mc = np.einsum("ij,nj->ni", W, scene.means) + b
    if visible is None:
        visible = _reference_visible(mc, cam)
    idx = np.flatnonzero(visible)
    mc = mc[idx]
    pix = _reference_project(mc, cam)
    J = reference_jacobian(mc, cam)
    R = _reference_rotations(scene.rotations[idx])
    s2 = np.exp(2.0 * scene.log_scales[idx])
    sigma = np.einsum("nij,nj,nkj->nik", R, s2, R)
    T = np.einsum("nij,jk->nik", J, W)
    cov = np.einsum("nij,njk,nlk->nil", T, sigma, T)
    a = cov[:, 0, 0] + DILATION
    bb = 0.5 * (cov[:, 0, 1] + cov[:, 1, 0])
    c = cov[:, 1, 1] + DILATION
    det = a * c - bb * bb
    conics = np.stack([c / det, -bb / det, a / det], axis=1)
    if cam.model is CameraModel.PINHOLE:
        depths = mc[:, 2]
    else:
        depths = np.sqrt(np.sum(mc * mc, axis=1))
    center = -W.T @ b
    dirs = scene.means[idx] - center
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    colors, _ = eval_sh_batch(scene.sh_coeffs[idx], dirs, sh_degree)
    opac = 1.0 / (1.0 + np.exp(-scene.opacity_logits[idx]))
    return ReferenceSplats(idx, pix, conics, depths, colors, opac)


# -- brute-force renderer --------------------------------------------------------------

@dataclass
class FrozenState:
    """Branch decisions of a reference render, replayable under perturbation."""

    visible: np.ndarray  # (N,) bool over scene Gaussians
    order: np.ndarray  # scene indices in blend order
    decisions: np.ndarray  # (pixels, len(order)) int8


def bruteforce_render(scene: Scene, camera: Camera, background=None, limit: int = DEFAULT_LIMIT,
                      sh_degree: int = 3, frozen: FrozenState | None = None,
                      return_state: bool = False):
    """Per-pixel blend over every splat in global (depth, index) order.

    With ``frozen`` the skip/clamp/stop decisions, visibility and order are
    replayed instead of re-evaluated, which makes the output a smooth function
    of the Gaussian parameters for finite differencing.
    """
    if len(scene) > limit:
        raise LimitExceeded(f"scene has {len(scene)} Gaussians, brute-force limit is {limit}")
    bg = scene.background if background is None else np.asarray(background, dtype=np.float64)
    w, h = camera.width, camera.height
    ys, xs = np.mgrid[0:h, 0:w]
    px = xs.ravel() + 0.5
    py = ys.ravel() + 0.5
    npix = px.size

    if len(scene) == 0:
        img = np.broadcast_to(bg, (h, w, 3)).copy()
        state = FrozenState(np.zeros(0, bool), np.zeros(0, np.int64), np.zeros((npix, 0), np.int8))
        out = ImageBuffer(img, alpha=np.zeros((h, w)))
        return (out, state) if return_state else out

    rs = reference_splats(scene, camera, sh_degree, None if frozen is None else frozen.visible)
    if frozen is None:
        order_local = np.lexsort((rs.index, rs.depths))
        order = rs.index[order_local]
    else:
        order = frozen.order
        pos = {int(g): i for i, g in enumerate(rs.index)}
        order_local = np.array([pos[int(g)] for g in order], dtype=np.int64)

    T = np.ones(npix)
    C = np.zeros((npix, 3))
    done = np.zeros(npix, bool)
    decisions = np.zeros((npix, order.size), np.int8) if frozen is None else frozen.decisions

    for slot, j in enumerate(order_local):
        mx, my = rs.means[j]
        ca, cb, cc = rs.conics[j]
        op = rs.opacities[j]
        dx = px - mx
        dy = py - my
        q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
        raw = op * np.exp(-0.5 * q)
        if frozen is None:
            alpha = np.minimum(raw, ALPHA_MAX)
            active = (q <= CUTOFF) & (alpha >= ALPHA_MIN) & ~done
            test_T = T * (1.0 - alpha)
            stop = active & (test_T < T_STOP)
            done |= stop
            use = active & ~stop
            decisions[use, slot] = np.where(raw[use] < ALPHA_MAX, BLEND, CLAMPED)
        else:
            code = decisions[:, slot]
            use = code != SKIP
            alpha = np.where(code == CLAMPED, ALPHA_MAX, raw)
            test_T = T * (1.0 - alpha)
        contrib = alpha * T
        C[use] += contrib[use, None] * rs.colors[j]
        T = np.where(use, test_T, T)

    img = (C + T[:, None] * bg).reshape(h, w, 3)
    out = ImageBuffer(img, alpha=(1.0 - T).reshape(h, w))
    if return_state:
        vis = np.zeros(len(scene), bool)
        vis[rs.index] = True
        return out, FrozenState(vis, order, decisions)
    return out


def count_intersections_bruteforce(means, radii, width: int, height: int) -> int:
    """(splat, tile) pairs whose closed box [m - r, m + r] meets the tile."""
    tiles_x, tiles_y = -(-width // TILE), -(-height // TILE)
    total = 0
    for (mx, my), r in zip(np.asarray(means, dtype=np.float64), np.asarray(radii, dtype=np.float64)):
        for ty in range(tiles_y):
            for tx in range(tiles_x):
                hi_x = min((tx + 1) * TILE, width)
                hi_y = min((ty + 1) * TILE, height)
                if mx - r < hi_x and mx + r >= tx * TILE and my - r < hi_y and my + r >= ty * TILE:
                    total += 1
    return total


# -- gradcheck -------------------------------------------------------------------------

@dataclass
class LossSpec:
    """Scalar image loss used by gradcheck: ``sum_sq`` (sum of squared
    pixels) or ``weighted`` (fixed random per-pixel weights)."""

    kind: str = "sum_sq"
    seed: int = 0

    def _weights(self, shape):
        return np.random.default_rng(self.seed).uniform(-1.0, 1.0, size=shape)

    def value(self, pixels: np.ndarray) -> float:
        if self.kind == "sum_sq":
            return float(np.sum(pixels * pixels))
        if self.kind == "weighted":
            return float(np.sum(self._weights(pixels.shape) * pixels))
        raise ValueError(f"unknown loss kind {self.kind!r}")

    def grad(self, pixels: np.ndarray) -> np.ndarray:
        if self.kind == "sum_sq":
            return 2.0 * pixels
        if self.kind == "weighted":
            return self._weights(pixels.shape)
        raise ValueError(f"unknown loss kind {self.kind!r}")


@dataclass
class GroupReport:
    name: str
    max_rel_err: float
    worst_gaussian: int
    worst_coord: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err <= self.tolerance)

    def record(self) -> dict:
        return {"group": self.name, "max_rel_err": float(self.max_rel_err), "pass": self.passed,
                "tolerance": self.tolerance, "worst_gaussian": self.worst_gaussian,
                "worst_coord": self.worst_coord}


@dataclass
class GradcheckReport:
    groups: list[GroupReport]
    analytic: dict = field(default_factory=dict, repr=False)
    numeric: dict = field(default_factory=dict, repr=False)

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.groups)

    def group(self, name: str) -> GroupReport:
        return next(g for g in self.groups if g.name == name)

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(g.record()) for g in self.groups)


_GROUP_FIELDS = {
    "mean": ("means", None),
    "rotation": ("rotations", None),
    "log_scale": ("log_scales", None),
    "opacity_logit": ("opacity_logits", None),
    "sh_dc": ("sh_coeffs", 0),
}


def _perturbed(scene: Scene, group: str, i: int, coord: int, delta: float) -> Scene:
    s = scene.copy()
    attr, sh_row = _GROUP_FIELDS[group]
    arr = getattr(s, attr)
    if sh_row is not None:
        arr[i, sh_row, coord] += delta
    elif arr.ndim == 1:
        arr[i] += delta
    else:
        arr[i, coord] += delta
    return s


def numeric_gradients(scene: Scene, camera: Camera, loss: LossSpec, config: FDConfig,
                      sh_degree: int = 0) -> dict[str, np.ndarray]:
    """Finite differences of the loss through the frozen brute-force renderer."""
    _, state = bruteforce_render(scene, camera, sh_degree=sh_degree, return_state=True)
    h = config.step
    sizes = {"mean": 3, "rotation": 4, "log_scale": 3, "opacity_logit": 1, "sh_dc": 3}
    out = {}
    for group, size in sizes.items():
        g = np.zeros((len(scene), size))
        for i in range(len(scene)):
            if not state.visible[i]:
                continue
            for c in range(size):
                lp = loss.value(bruteforce_render(_perturbed(scene, group, i, c, h), camera,
                                                  sh_degree=sh_degree, frozen=state).pixels)
                lm = loss.value(bruteforce_render(_perturbed(scene, group, i, c, -h), camera,
                                                  sh_degree=sh_degree, frozen=state).pixels)
                g[i, c] = (lp - lm) / (2.0 * h)
        out[group] = g[:, 0] if size == 1 else g
    return out


def compare_gradients(analytic: dict, numeric: dict, config: FDConfig) -> list[GroupReport]:
    reports = []
    for group, num in numeric.items():
        ana = np.asarray(analytic[group], dtype=np.float64).reshape(num.shape)
        err = rel_err(ana, num).reshape(len(num), -1)
        flat = int(np.argmax(err)) if err.size else 0
        gi, gc = divmod(flat, max(err.shape[1], 1)) if err.size else (-1, -1)
        reports.append(GroupReport(group, float(err.max()) if err.size else 0.0, gi, gc, config.tol(group)))
    return reports


def gradcheck(scene: Scene, camera: Camera, loss: LossSpec | None = None,
              config: FDConfig | None = None, jacobian_grad=None) -> GradcheckReport:
    """Compare the analytic backward pass with finite differences of the
    brute-force renderer, one record per parameter group.

    ``jacobian_grad`` replaces the camera's dJ/dmu_c in the analytic pass
    (used to prove the check notices a corrupted derivative).
    """
    from . import gradients, splatting  # the path under test

    loss = loss or LossSpec()
    config = config or FDConfig(step=1e-4, tolerance=1e-3)
    if len(scene) > DEFAULT_LIMIT:
        raise LimitExceeded(f"scene has {len(scene)} Gaussians, brute-force limit is {DEFAULT_LIMIT}")
    image, _, ctx = splatting.render(scene, camera, precision="double", sh_degree=0)
    grads = gradients.backward(scene, camera, ctx, loss.grad(image.pixels), jacobian_grad=jacobian_grad)
    analytic = {name: grads.group(name) for name in gradients.GradientBuffer.GROUPS}
    numeric = numeric_gradients(scene, camera, loss, config)
    return GradcheckReport(compare_gradients(analytic, numeric, config), analytic, numeric)


def scaled_jacobian_grad(axis: int, factor: float = 1.1):
    """dJ/dmu_c provider with one of the three derivative matrices scaled."""
    from .cameras import jacobian_grad_points

    def fn(points, camera):
        dJ = jacobian_grad_points(points, camera).copy()
        dJ[:, axis] *= factor
        return dJ

    return fn


# -- check scenes ------------------------------------------------------------------------

def _random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True) * rng.uniform(0.7, 1.4, size=(n, 1))


def check_camera(model, size: int = 32, fov_deg: float = 180.0) -> Camera:
    model = CameraModel.parse(model)
    half = math.radians(fov_deg) / 2.0
    if model is CameraModel.FISHEYE:
        f = (size / 2.0) / half
        return Camera(model, size, size, fx=f, fy=f, fov_max=half)
    if model is CameraModel.PINHOLE:
        f = size * 0.9
        return Camera(model, size, size, fx=f, fy=f)
    return Camera(model, 2 * size, size)


def check_scene(model, seed: int = 0, n: int = 10, size: int = 32,
                fov_deg: float = 180.0) -> tuple[Scene, Camera]:
    """Small random scene in front of an identity-pose camera.

    Gaussians are spread over the camera's usable field of view (fisheye
    scenes always include one at 85 degrees incidence), anisotropic, with
    colors away from the SH clamp.
    """
    rng = np.random.default_rng(seed)
    cam = check_camera(model, size, fov_deg)
    dirs = []
    for i in range(n):
        if cam.model is CameraModel.PINHOLE:
            u, v = rng.uniform(0.15, 0.85, size=2) * size
            d = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
        elif cam.model is CameraModel.FISHEYE:
            theta = math.radians(85.0) if i == 0 else rng.uniform(0.0, min(cam.fov_max, math.radians(80)))
            phi = rng.uniform(0, 2 * math.pi)
            d = np.array([math.sin(theta) * math.cos(phi), math.sin(theta) * math.sin(phi), math.cos(theta)])
        else:
            lon = rng.uniform(-0.8, 0.8) * math.pi
            lat = rng.uniform(-0.35, 0.35) * math.pi
            d = np.array([math.cos(lat) * math.sin(lon), math.sin(lat), math.cos(lat) * math.cos(lon)])
        dirs.append(d / np.linalg.norm(d))
    dist = rng.uniform(3.0, 6.0, size=n)
    means = np.array(dirs) * dist[:, None]
    pix_per_unit = {CameraModel.PINHOLE: cam.fx, CameraModel.FISHEYE: cam.fx,
                    CameraModel.PANORAMA: cam.width / (2 * math.pi)}[cam.model]
    # footprint of a few pixels regardless of model
    base = np.log(rng.uniform(1.5, 3.5, size=n) * dist / pix_per_unit)
    log_scales = base[:, None] + rng.uniform(-0.4, 0.4, size=(n, 3))
    sh = np.zeros((n, 16, 3))
    sh[:, 0] = (rng.uniform(0.15, 0.85, size=(n, 3)) - 0.5) / 0.28209479177387814
    scene = Scene(means, _random_quats(rng, n), log_scales, rng.uniform(-1.5, 2.0, size=n), sh,
                  background=rng.uniform(0.0, 0.3, size=3))
    return scene, cam
