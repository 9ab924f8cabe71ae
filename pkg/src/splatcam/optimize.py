"""Training loop, image losses and metrics, and the synthetic dataset generator."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from . import gradients, splatting
from .cameras import Camera, CameraModel
from .model import SH_C0, ImageBuffer, Scene, logit

log = logging.getLogger(__name__)

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_CAP = 100.0


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


WINDOW = _gaussian_window()


def _pixels(img) -> np.ndarray:
    return np.asarray(img.pixels if isinstance(img, ImageBuffer) else img, dtype=np.float64)


def _same_shape(a, b):
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape} vs {b.shape}")
    return a, b


def _blur(x: np.ndarray) -> np.ndarray:
    # zero-padded "same" filtering; the operator is symmetric, so it is its own adjoint
    x = correlate1d(x, WINDOW, axis=0, mode="constant", cval=0.0)
    return correlate1d(x, WINDOW, axis=1, mode="constant", cval=0.0)


def _ssim_terms(x, y):
    mx, my = _blur(x), _blur(y)
    exx, eyy, exy = _blur(x * x), _blur(y * y), _blur(x * y)
    num1 = 2.0 * mx * my + SSIM_C1
    num2 = 2.0 * (exy - mx * my) + SSIM_C2
    den1 = mx * mx + my * my + SSIM_C1
    den2 = (exx - mx * mx) + (eyy - my * my) + SSIM_C2
    return mx, my, num1, num2, den1, den2


def ssim(rendered, target) -> float:
    x, y = _same_shape(rendered, target)
    _, _, num1, num2, den1, den2 = _ssim_terms(x, y)
    return float(np.mean((num1 * num2) / (den1 * den2)))


def ssim_with_grad(rendered, target) -> tuple[float, np.ndarray]:
    """Mean SSIM and its gradient w.r.t. ``rendered``."""
    x, y = _same_shape(rendered, target)
    mx, my, num1, num2, den1, den2 = _ssim_terms(x, y)
    N = num1 * num2
    D = den1 * den2
    value = float(np.mean(N / D))
    scale = 1.0 / x.size
    # partials of each map entry w.r.t. blur(x), blur(x*x) and blur(x*y)
    dN_dmx = 2.0 * my * num2 - 2.0 * my * num1
    dD_dmx = 2.0 * mx * den2 - 2.0 * mx * den1
    d_mx = (dN_dmx * D - N * dD_dmx) / (D * D) * scale
    # grouped so the terms cancel exactly (not just to rounding) when x == y
    u = scale / D
    d_exx = -(N / D) * den1 * u
    d_exy = 2.0 * num1 * u
    grad = _blur(d_mx) + 2.0 * x * _blur(d_exx) + y * _blur(d_exy)
    return value, grad


def psnr(rendered, target) -> float:
    x, y = _same_shape(rendered, target)
    mse = float(np.mean((x - y) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def loss(rendered, target, lam: float = 0.2) -> tuple[float, np.ndarray]:
    """(1 - lam) * L1 + lam * (1 - SSIM); L1 is the mean over pixel-channels."""
    x, y = _same_shape(rendered, target)
    diff = x - y
    l1 = float(np.mean(np.abs(diff)))
    grad = (1.0 - lam) * np.sign(diff) / diff.size
    if lam == 0.0:
        return (1.0 - lam) * l1, grad
    s, ds = ssim_with_grad(x, y)
    return (1.0 - lam) * l1 + lam * (1.0 - s), grad - lam * ds


# -- Adam ---------------------------------------------------------------------------

GROUPS = ("mean", "rotation", "log_scale", "opacity_logit", "sh_dc")


class NonFiniteGradient(FloatingPointError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: dict,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15) -> dict:
    """One Adam update (with bias correction) applied to ``params`` in place."""
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        if g.shape != np.shape(params[name]):
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {np.shape(params[name])}")
        bad = ~np.isfinite(g)
        if np.any(bad):
            idx = np.argwhere(bad)[0]
            raise NonFiniteGradient(f"non-finite gradient in group {name!r} for Gaussian {int(idx[0])}")
    state.step += 1
    t = state.step
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        params[name] -= lr[name] * m_hat / (np.sqrt(v_hat) + eps)
    return params


# -- dataset and training -------------------------------------------------------------

@dataclass
class Dataset:
    views: list  # (Camera, ImageBuffer)
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    holdout_every: int = 8

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        if not self.train_indices:
            raise ValueError("dataset needs at least one training view")

    @property
    def test_indices(self) -> list[int]:
        return [i for i in range(len(self.views)) if i % self.holdout_every == 0]

    @property
    def train_indices(self) -> list[int]:
        return [i for i in range(len(self.views)) if i % self.holdout_every != 0]

    def scene_extent(self) -> float:
        """1.1 x the largest camera distance from the camera centroid."""
        centers = np.array([cam.center for cam, _ in self.views])
        radius = float(np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1)))
        return 1.1 * radius if radius > 1e-9 else 1.0


@dataclass
class TrainConfig:
    iterations: int = 2000
    lr_mean: float = 1.6e-4  # times scene extent
    lr_mean_final: float = 1.6e-6
    lr_rotation: float = 1e-3
    lr_log_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_sh_dc: float = 2.5e-3
    loss_lambda: float = 0.2
    random_background: bool = False
    seed: int = 0
    eval_every: int = 100
    precision: str = "double"

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if not 0.0 <= self.loss_lambda <= 1.0:
            raise ValueError("loss_lambda must lie in [0, 1]")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    scene: Scene
    losses: list[float]
    test_psnr: dict[int, float]
    test_metrics: dict[str, float]

    def trace_rows(self):
        for i, value in enumerate(self.losses, start=1):
            yield i, value, self.test_psnr.get(i)


def _params(scene: Scene) -> dict:
    return {"mean": scene.means, "rotation": scene.rotations, "log_scale": scene.log_scales,
            "opacity_logit": scene.opacity_logits, "sh_dc": scene.sh_coeffs[:, 0, :]}


def _mean_lr(config: TrainConfig, extent: float, it: int) -> float:
    # log-linear decay, as in the reference 3DGS position schedule
    t = min(max(it / max(config.iterations - 1, 1), 0.0), 1.0)
    lo, hi = config.lr_mean_final * extent, config.lr_mean * extent
    return math.exp((1 - t) * math.log(hi) + t * math.log(lo))


def composite_target(target: ImageBuffer, stored_bg, new_bg) -> np.ndarray:
    """Re-composite a target onto another background using its coverage."""
    if target.alpha is None:
        return target.pixels
    trans = 1.0 - target.alpha
    return target.pixels + trans[..., None] * (np.asarray(new_bg) - np.asarray(stored_bg))


def evaluate(scene: Scene, dataset: Dataset, indices=None, precision="double") -> dict[str, float]:
    indices = dataset.test_indices if indices is None else indices
    ps, ss = [], []
    for i in indices:
        cam, target = dataset.views[i]
        img = splatting.render(scene, cam, background=dataset.background, precision=precision).image
        ps.append(psnr(img, target))
        ss.append(ssim(img, target))
    return {"psnr": float(np.mean(ps)) if ps else float("nan"),
            "ssim": float(np.mean(ss)) if ss else float("nan")}


def train(initial: Scene, dataset: Dataset, config: TrainConfig | None = None, callback=None) -> TrainResult:
    """Optimize all Gaussian parameters against the training views.

    No densification or pruning: the Gaussian count is fixed.
    """
    config = config or TrainConfig()
    scene = initial.copy()
    rng = np.random.default_rng(config.seed)
    extent = dataset.scene_extent()
    state = AdamState()
    train_ids = dataset.train_indices
    order: list[int] = []
    losses: list[float] = []
    test_psnr: dict[int, float] = {}
    params = _params(scene)

    for it in range(1, config.iterations + 1):
        if not order:
            order = list(rng.permutation(train_ids))
        view = order.pop()
        cam, target = dataset.views[view]
        bg = rng.random(3) if config.random_background else dataset.background
        target_px = composite_target(target, dataset.background, bg)

        image, _, ctx = splatting.render(scene, cam, background=bg, precision=config.precision, sh_degree=0)
        value, dL_dimage = loss(image.pixels, target_px, config.loss_lambda)
        if not math.isfinite(value):
            raise TrainingDiverged(f"loss became non-finite at iteration {it}")
        losses.append(value)
        g = gradients.backward(scene, cam, ctx, dL_dimage)
        grads = {"mean": g.d_mean, "rotation": g.d_rotation, "log_scale": g.d_log_scale,
                 "opacity_logit": g.d_opacity_logit, "sh_dc": g.d_sh_dc}
        lr = {"mean": _mean_lr(config, extent, it - 1), "rotation": config.lr_rotation,
              "log_scale": config.lr_log_scale, "opacity_logit": config.lr_opacity,
              "sh_dc": config.lr_sh_dc}
        adam_step(params, grads, state, lr)

        if config.eval_every and (it % config.eval_every == 0 or it == config.iterations) and dataset.test_indices:
            test_psnr[it] = evaluate(scene, dataset, precision=config.precision)["psnr"]
            log.info("iteration %d loss %.6f test psnr %.2f", it, value, test_psnr[it])
        if callback is not None:
            callback(it, value, test_psnr.get(it))

    metrics = evaluate(scene, dataset, precision=config.precision) if dataset.test_indices else {}
    return TrainResult(scene, losses, test_psnr, metrics)


# -- synthetic data --------------------------------------------------------------------

@dataclass
class SynthSpec:
    n_gaussians: int = 50
    extent: float = 1.0
    seed: int = 0
    camera_model: str = "fisheye_equidistant"
    n_views: int = 8
    fov_deg: float = 120.0
    width: int = 128
    height: int = 128
    init_noise: float = 0.05  # std of mean noise, fraction of extent

    def __post_init__(self):
        if self.n_views < 2:
            raise ValueError("need at least two views")
        self.camera_model = CameraModel.parse(self.camera_model).value

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synthetic-scene options: {sorted(unknown)}")
        return cls(**data)


def ring_cameras(spec: SynthSpec) -> list[Camera]:
    model = CameraModel.parse(spec.camera_model)
    half = math.radians(spec.fov_deg) / 2.0
    radius = 1.3 * spec.extent
    cams = []
    for i in range(spec.n_views):
        a = 2.0 * math.pi * i / spec.n_views
        pos = (radius * math.sin(a), -0.15 * spec.extent, radius * math.cos(a))
        kw = {}
        if model is CameraModel.FISHEYE:
            f = (min(spec.width, spec.height) / 2.0) / half
            kw = dict(fx=f, fy=f, fov_max=half)
        elif model is CameraModel.PINHOLE:
            f = (min(spec.width, spec.height) / 2.0) / math.tan(min(half, math.radians(80)))
            kw = dict(fx=f, fy=f)
        cams.append(Camera.look_at(model, spec.width, spec.height, pos, **kw))
    return cams


def _synthetic_scene(spec: SynthSpec, rng) -> Scene:
    n = spec.n_gaussians
    ext = spec.extent
    n_shell = n * 2 // 5
    n_core = n - n_shell
    core = rng.normal(size=(n_core, 3))
    core *= (0.6 * ext * rng.uniform(0.2, 1.0, size=(n_core, 1)) ** (1 / 3)
             / np.linalg.norm(core, axis=1, keepdims=True))
    # a ring of "wall" Gaussians around the cameras, evenly spaced in azimuth
    az = (np.arange(n_shell) + rng.uniform(0.0, 0.6, size=n_shell)) * 2.0 * math.pi / max(n_shell, 1)
    r = ext * rng.uniform(1.9, 2.3, size=n_shell)
    shell = np.stack([r * np.sin(az), ext * rng.uniform(-0.5, 0.4, size=n_shell), r * np.cos(az)], axis=1)
    means = np.concatenate([core, shell])
    size = np.concatenate([rng.uniform(0.05, 0.11, size=n_core), rng.uniform(0.1, 0.18, size=n_shell)]) * ext
    log_scales = np.log(size)[:, None] + rng.uniform(-0.35, 0.35, size=(n, 3))
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    sh = np.zeros((n, 16, 3))
    sh[:, 0] = (rng.uniform(0.1, 0.9, size=(n, 3)) - 0.5) / SH_C0
    opac = logit(rng.uniform(0.6, 0.95, size=n))
    return Scene(means, q, log_scales, opac, sh, background=(0.0, 0.0, 0.0))


def wide_angle_counts(scene: Scene, cameras, min_theta_deg: float = 60.0) -> list[int]:
    """Per camera, how many Gaussian means sit beyond ``min_theta_deg`` incidence
    while still inside the camera's usable field of view."""
    out = []
    for cam in cameras:
        mc = scene.means @ cam.rotation_wc.T + cam.translation_wc
        theta = np.degrees(np.arctan2(np.hypot(mc[:, 0], mc[:, 1]), mc[:, 2]))
        limit = math.degrees(cam.fov_max) if cam.model is CameraModel.FISHEYE else 180.0
        out.append(int(np.count_nonzero((theta > min_theta_deg) & (theta <= limit))))
    return out


def make_synthetic(spec: SynthSpec | dict) -> tuple[Scene, Dataset]:
    """Seeded ground-truth scene plus a ring of views rendered by the reference
    renderer (not the tiled path under training)."""
    from .oracle import bruteforce_render

    if isinstance(spec, dict):
        spec = SynthSpec.from_dict(spec)
    rng = np.random.default_rng(spec.seed)
    scene = _synthetic_scene(spec, rng)
    cams = ring_cameras(spec)
    if CameraModel.parse(spec.camera_model) is CameraModel.FISHEYE and spec.fov_deg >= 180.0:
        counts = wide_angle_counts(scene, cams)
        if min(counts) < 1:
            raise RuntimeError(f"generator post-condition failed: wide-angle Gaussians per view {counts}")
    views = [(cam, bruteforce_render(scene, cam, sh_degree=0)) for cam in cams]
    return scene, Dataset(views, background=scene.background)


def perturb_means(scene: Scene, sigma: float, seed: int = 0) -> Scene:
    out = scene.copy()
    out.means += np.random.default_rng(seed).normal(scale=sigma, size=out.means.shape)
    return out
