"""Tile-based forward renderer.

The pipeline has four stages: ``preprocess`` (the only camera-dependent
one), ``bin_and_sort``, ``rasterize`` and the ``render`` composition. The
stages after preprocessing see nothing but :class:`Splats`.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import cameras as cams
from .model import ImageBuffer, Scene, build_covariances, eval_sh_batch, sigmoid

TILE = 16
DILATION = 0.3
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_STOP = 1e-4
# squared Mahalanobis distance beyond which a splat contributes nothing;
# keeps every contributing pixel inside the 3-sigma bounding box
CUTOFF = 9.0
THREADS_ENV = "SPLATCAM_THREADS"

_DTYPES = {"single": np.float32, "double": np.float64}


def resolve_threads(threads: int | None = None) -> int:
    if threads is None:
        threads = int(os.environ.get(THREADS_ENV, "1") or 1)
    return max(1, int(threads))


def _dtype(precision: str):
    try:
        return _DTYPES[precision]
    except KeyError:
        raise ValueError(f"precision must be 'single' or 'double', got {precision!r}") from None


@dataclass
class Splat2D:
    mean_px: np.ndarray
    conic: np.ndarray
    depth: float
    radius_px: int
    color: np.ndarray
    alpha_max: float
    source: int


@dataclass
class SplatGeometry:
    """Per-splat intermediates kept for the backward pass."""

    mean_cam: np.ndarray  # (K, 3)
    jacobian: np.ndarray  # (K, 2, 3)
    cov3d: np.ndarray  # (K, 3, 3)
    cov2d: np.ndarray  # (K, 2, 2), dilated
    color_passed: np.ndarray  # (K, 3) bool, SH output not clamped


@dataclass
class Splats:
    """Projected Gaussians as parallel arrays; ``source`` maps back to the scene."""

    means: np.ndarray
    conics: np.ndarray
    depths: np.ndarray
    radii: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    source: np.ndarray
    geometry: SplatGeometry | None = None
    num_culled: int = 0
    num_skipped: int = 0

    def __len__(self) -> int:
        return self.means.shape[0]

    def __getitem__(self, i: int) -> Splat2D:
        return Splat2D(self.means[i].copy(), self.conics[i].copy(), float(self.depths[i]),
                       int(self.radii[i]), self.colors[i].copy(), float(self.opacities[i]),
                       int(self.source[i]))

    @classmethod
    def from_list(cls, splats: Sequence[Splat2D]) -> "Splats":
        if not splats:
            return cls(np.zeros((0, 2)), np.zeros((0, 3)), np.zeros(0), np.zeros(0, np.int64),
                       np.zeros((0, 3)), np.zeros(0), np.zeros(0, np.int64))
        return cls(
            np.array([s.mean_px for s in splats], dtype=np.float64),
            np.array([s.conic for s in splats], dtype=np.float64),
            np.array([s.depth for s in splats], dtype=np.float64),
            np.array([s.radius_px for s in splats], dtype=np.int64),
            np.array([s.color for s in splats], dtype=np.float64),
            np.array([s.alpha_max for s in splats], dtype=np.float64),
            np.array([s.source for s in splats], dtype=np.int64),
        )

    @property
    def nbytes(self) -> int:
        total = sum(a.nbytes for a in (self.means, self.conics, self.depths, self.radii,
                                       self.colors, self.opacities, self.source))
        if self.geometry is not None:
            g = self.geometry
            total += sum(a.nbytes for a in (g.mean_cam, g.jacobian, g.cov3d, g.cov2d, g.color_passed))
        return total


@dataclass
class TileIndex:
    tiles_x: int
    tiles_y: int
    ranges: np.ndarray  # (tiles, 2) [start, end) into refs
    refs: np.ndarray  # splat indices, sorted by (tile, depth, source)
    ref_tiles: np.ndarray

    @property
    def num_tiles(self) -> int:
        return self.tiles_x * self.tiles_y

    @property
    def num_intersections(self) -> int:
        return int(self.refs.shape[0])

    def tile_refs(self, tile: int) -> np.ndarray:
        start, end = self.ranges[tile]
        return self.refs[start:end]

    def tile_bounds(self, tile: int, width: int, height: int) -> tuple[int, int, int, int]:
        ty, tx = divmod(tile, self.tiles_x)
        x0, y0 = tx * TILE, ty * TILE
        return x0, min(x0 + TILE, width), y0, min(y0 + TILE, height)


@dataclass
class RenderStats:
    num_intersections: int = 0
    num_splats: int = 0
    num_culled: int = 0
    num_skipped: int = 0
    preprocess_ms: float = 0.0
    binning_ms: float = 0.0
    sort_ms: float = 0.0
    raster_ms: float = 0.0
    peak_aux_bytes: int = 0

    @property
    def total_ms(self) -> float:
        return self.preprocess_ms + self.binning_ms + self.sort_ms + self.raster_ms

    def as_record(self) -> dict:
        return {
            "num_intersections": self.num_intersections,
            "num_splats": self.num_splats,
            "num_culled": self.num_culled,
            "num_skipped": self.num_skipped,
            "preprocess_ms": round(self.preprocess_ms, 4),
            "binning_ms": round(self.binning_ms, 4),
            "sort_ms": round(self.sort_ms, 4),
            "raster_ms": round(self.raster_ms, 4),
            "peak_aux_bytes": self.peak_aux_bytes,
        }


@dataclass
class RasterOutput:
    image: ImageBuffer
    final_transmittance: np.ndarray  # (H, W)
    n_contrib: np.ndarray  # (H, W), refs consumed per pixel


@dataclass
class ForwardContext:
    camera: cams.Camera
    num_gaussians: int
    background: np.ndarray
    splats: Splats
    tiles: TileIndex
    raster: RasterOutput
    precision: str
    threads: int = 1
    scene_means: np.ndarray = field(default=None, repr=False)


class RenderResult(NamedTuple):
    image: ImageBuffer
    stats: RenderStats
    context: ForwardContext


# -- preprocess -----------------------------------------------------------------

def _empty_splats(n_culled=0, n_skipped=0) -> Splats:
    s = Splats.from_list([])
    s.geometry = SplatGeometry(np.zeros((0, 3)), np.zeros((0, 2, 3)), np.zeros((0, 3, 3)),
                               np.zeros((0, 2, 2)), np.zeros((0, 3), bool))
    s.num_culled, s.num_skipped = n_culled, n_skipped
    return s


def preprocess(scene: Scene, camera: cams.Camera, sh_degree: int = 3) -> Splats:
    """Project every Gaussian to a 2D splat; culled ones are dropped.

    Sigma_p = (J W) Sigma (J W)^T + dilation * I, where J is the
    Jacobian of the camera's projection at the camera-space mean.
    """
    n = len(scene)
    if n == 0:
        return _empty_splats()
    mean_cam = cams.world_to_camera_points(scene.means, camera)
    pix, visible = cams.project_points(mean_cam, camera)
    idx = np.flatnonzero(visible)
    n_culled = n - idx.size
    if idx.size == 0:
        return _empty_splats(n_culled)

    mc = mean_cam[idx]
    J = cams.jacobian_points(mc, camera)
    cov3d = build_covariances(scene.rotations[idx], scene.log_scales[idx])
    T = J @ camera.rotation_wc
    cov2d = T @ cov3d @ np.swapaxes(T, 1, 2)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, 1, 2))
    cov2d[:, 0, 0] += DILATION
    cov2d[:, 1, 1] += DILATION
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    ok = np.isfinite(det) & (det > 0) & np.all(np.isfinite(pix[idx]), axis=1)
    n_skipped = int(np.count_nonzero(~ok))
    idx, mc, J, cov3d, cov2d = idx[ok], mc[ok], J[ok], cov3d[ok], cov2d[ok]
    a, b, c, det = a[ok], b[ok], c[ok], det[ok]
    if idx.size == 0:
        return _empty_splats(n_culled, n_skipped)

    conics = np.stack([c / det, -b / det, a / det], axis=1)
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radii = np.ceil(3.0 * np.sqrt(lam_max)).astype(np.int64)

    dirs = scene.means[idx] - camera.center
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    colors, passed = eval_sh_batch(scene.sh_coeffs[idx], dirs, sh_degree)

    return Splats(
        means=pix[idx],
        conics=conics,
        depths=cams.depth_keys(mc, camera),
        radii=radii,
        colors=colors,
        opacities=sigmoid(scene.opacity_logits[idx]),
        source=idx.astype(np.int64),
        geometry=SplatGeometry(mc, J, cov3d, cov2d, passed),
        num_culled=n_culled,
        num_skipped=n_skipped,
    )


# -- binning and sorting ----------------------------------------------------------

def tile_rects(splats: Splats, width: int, height: int) -> np.ndarray:
    """Inclusive tile rectangle (tx0, ty0, tx1, ty1) per splat; empty if tx1 < tx0."""
    tiles_x = -(-width // TILE)
    tiles_y = -(-height // TILE)
    r = splats.radii.astype(np.float64)
    mx, my = splats.means[:, 0], splats.means[:, 1]
    tx0 = np.clip(np.floor((mx - r) / TILE), 0, tiles_x - 1)
    tx1 = np.clip(np.floor((mx + r) / TILE), -1, tiles_x - 1)
    ty0 = np.clip(np.floor((my - r) / TILE), 0, tiles_y - 1)
    ty1 = np.clip(np.floor((my + r) / TILE), -1, tiles_y - 1)
    # entirely left/above the image
    tx1 = np.where(mx + r < 0, -1, tx1)
    ty1 = np.where(my + r < 0, -1, ty1)
    # entirely right/below the image
    tx0 = np.where(mx - r >= width, tiles_x, tx0)
    ty0 = np.where(my - r >= height, tiles_y, ty0)
    return np.stack([tx0, ty0, tx1, ty1], axis=1).astype(np.int64)


def _bin(splats: Splats, width: int, height: int):
    tiles_x = -(-width // TILE)
    rect = tile_rects(splats, width, height)
    nx = np.maximum(rect[:, 2] - rect[:, 0] + 1, 0)
    ny = np.maximum(rect[:, 3] - rect[:, 1] + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    splat_ids = np.repeat(np.arange(len(splats), dtype=np.int64), counts)
    # position of each entry inside its splat's rectangle
    offsets = np.arange(total, dtype=np.int64) - np.repeat(np.cumsum(counts) - counts, counts)
    nx_rep = np.repeat(np.maximum(nx, 1), counts)
    tx = np.repeat(rect[:, 0], counts) + offsets % nx_rep
    ty = np.repeat(rect[:, 1], counts) + offsets // nx_rep
    return splat_ids, ty * tiles_x + tx


def _sort(splat_ids, tile_ids, splats: Splats):
    # stable lexicographic sort on (tile, depth, source)
    order = np.lexsort((splats.source[splat_ids], splats.depths[splat_ids], tile_ids))
    return splat_ids[order], tile_ids[order]


def _tile_ranges(sorted_tiles, n_tiles):
    starts = np.searchsorted(sorted_tiles, np.arange(n_tiles), side="left")
    ends = np.searchsorted(sorted_tiles, np.arange(n_tiles), side="right")
    return np.stack([starts, ends], axis=1)


def bin_and_sort(splats: Splats, width: int, height: int) -> TileIndex:
    """One entry per (splat, overlapped tile), sorted by tile, then depth, then source."""
    tiles_x = -(-width // TILE)
    tiles_y = -(-height // TILE)
    splat_ids, tile_ids = _bin(splats, width, height)
    refs, ref_tiles = _sort(splat_ids, tile_ids, splats)
    return TileIndex(tiles_x, tiles_y, _tile_ranges(ref_tiles, tiles_x * tiles_y), refs, ref_tiles)


# -- rasterization ------------------------------------------------------------------

@dataclass
class _TileBlend:
    dx: np.ndarray
    dy: np.ndarray
    gauss: np.ndarray  # exp(-q/2)
    alpha: np.ndarray  # zero where inactive
    unclamped: np.ndarray
    active: np.ndarray
    included: np.ndarray
    t_before: np.ndarray
    weights: np.ndarray
    t_final: np.ndarray
    n_incl: np.ndarray


def _pixel_centers(x0, x1, y0, y1, dtype):
    ys, xs = np.mgrid[y0:y1, x0:x1]
    return (xs.ravel() + 0.5).astype(dtype), (ys.ravel() + 0.5).astype(dtype)


def _blend_tile(px, py, means, conics, opacities, dtype=np.float64) -> _TileBlend:
    """Front-to-back blending terms for every (pixel, splat) pair of a tile.

    Splats are in blend order along axis 1. Mirrors the sequential rule:
    skip alpha < 1/255 and pixels outside the 3-sigma ellipse, stop before the
    splat that would push transmittance below ``T_STOP``.

    Which pairs contribute, and their alphas, are decided in double precision
    so the working ``dtype`` only affects transmittance and accumulation.
    """
    dx = px[:, None] - means[None, :, 0]
    dy = py[:, None] - means[None, :, 1]
    ca, cb, cc = conics[:, 0], conics[:, 1], conics[:, 2]
    q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
    gauss = np.exp(-0.5 * q)
    raw = opacities * gauss
    alpha = np.minimum(raw, ALPHA_MAX)
    active = (q <= CUTOFF) & (alpha >= ALPHA_MIN)
    alpha = np.where(active, alpha, 0.0)
    included = np.cumprod(1.0 - alpha, axis=1) >= T_STOP

    alpha = alpha.astype(dtype, copy=False)
    t_after = np.cumprod(1.0 - alpha, axis=1)
    t_before = np.empty_like(t_after)
    t_before[:, 0] = 1.0
    t_before[:, 1:] = t_after[:, :-1]
    weights = np.where(included, alpha * t_before, 0.0).astype(dtype, copy=False)
    n_incl = included.sum(axis=1)
    rows = np.arange(px.shape[0])
    t_final = np.where(n_incl > 0, t_after[rows, np.maximum(n_incl - 1, 0)], 1.0).astype(dtype, copy=False)
    return _TileBlend(dx.astype(dtype, copy=False), dy.astype(dtype, copy=False),
                      gauss.astype(dtype, copy=False), alpha, raw < ALPHA_MAX, active, included,
                      t_before, weights, t_final, n_incl)


def _tile_inputs(splats: Splats, refs: np.ndarray, dtype):
    # geometry stays double for the blend decisions; colors use the working precision
    return (splats.means[refs], splats.conics[refs], splats.opacities[refs],
            splats.colors[refs].astype(dtype))


def map_tiles(fn: Callable[[int], object], n_tiles: int, threads: int) -> list:
    """Run ``fn`` over tile ids; results come back in tile order."""
    if threads <= 1 or n_tiles <= 1:
        return [fn(t) for t in range(n_tiles)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n_tiles)))


def rasterize(tiles: TileIndex, splats: Splats, background, width: int, height: int,
              precision: str = "double", threads: int | None = None) -> RasterOutput:
    dtype = _dtype(precision)
    threads = resolve_threads(threads)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    bg_d = bg.astype(dtype)

    def work(tile):
        x0, x1, y0, y1 = tiles.tile_bounds(tile, width, height)
        refs = tiles.tile_refs(tile)
        shape = (y1 - y0, x1 - x0)
        if refs.size == 0:
            block = np.broadcast_to(bg, shape + (3,))
            return block, np.ones(shape), np.zeros(shape, np.int64)
        px, py = _pixel_centers(x0, x1, y0, y1, np.float64)
        means, conics, opac, colors = _tile_inputs(splats, refs, dtype)
        b = _blend_tile(px, py, means, conics, opac, dtype)
        rgb = b.weights @ colors + b.t_final[:, None] * bg_d
        return (rgb.astype(np.float64).reshape(shape + (3,)),
                b.t_final.astype(np.float64).reshape(shape), b.n_incl.reshape(shape))

    pixels = np.empty((height, width, 3))
    t_final = np.empty((height, width))
    n_contrib = np.empty((height, width), np.int64)
    for tile, (rgb, tf, nc) in enumerate(map_tiles(work, tiles.num_tiles, threads)):
        x0, x1, y0, y1 = tiles.tile_bounds(tile, width, height)
        pixels[y0:y1, x0:x1] = rgb
        t_final[y0:y1, x0:x1] = tf
        n_contrib[y0:y1, x0:x1] = nc
    return RasterOutput(ImageBuffer(pixels, alpha=1.0 - t_final), t_final, n_contrib)


def _aux_bytes(splats: Splats, tiles: TileIndex, width: int, height: int, dtype) -> int:
    itemsize = np.dtype(dtype).itemsize
    sort_bytes = tiles.num_intersections * (8 + 8 + 8)  # keys, values, sort permutation
    ranges = tiles.ranges.nbytes
    counts = np.diff(tiles.ranges, axis=1).ravel()
    widest = int(counts.max()) if counts.size else 0
    # about a dozen (pixel, splat) scratch planes per tile in flight
    scratch = TILE * TILE * widest * itemsize * 12
    per_pixel = width * height * (8 + 8 + 3 * 8)
    return int(splats.nbytes + sort_bytes + ranges + scratch + per_pixel)


def render(scene: Scene, camera: cams.Camera, background=None, precision: str = "double",
           threads: int | None = None, sh_degree: int = 3) -> RenderResult:
    """Render ``scene`` through ``camera``; keeps what the backward pass needs."""
    threads = resolve_threads(threads)
    bg = scene.background if background is None else np.asarray(background, dtype=np.float64)
    w, h = camera.width, camera.height

    t0 = time.perf_counter()
    splats = preprocess(scene, camera, sh_degree=sh_degree)
    t1 = time.perf_counter()
    splat_ids, tile_ids = _bin(splats, w, h)
    t2 = time.perf_counter()
    refs, ref_tiles = _sort(splat_ids, tile_ids, splats)
    tiles_x, tiles_y = -(-w // TILE), -(-h // TILE)
    tiles = TileIndex(tiles_x, tiles_y, _tile_ranges(ref_tiles, tiles_x * tiles_y), refs, ref_tiles)
    t3 = time.perf_counter()
    raster = rasterize(tiles, splats, bg, w, h, precision=precision, threads=threads)
    t4 = time.perf_counter()

    stats = RenderStats(
        num_intersections=tiles.num_intersections,
        num_splats=len(splats),
        num_culled=splats.num_culled,
        num_skipped=splats.num_skipped,
        preprocess_ms=(t1 - t0) * 1e3,
        binning_ms=(t2 - t1) * 1e3,
        sort_ms=(t3 - t2) * 1e3,
        raster_ms=(t4 - t3) * 1e3,
        peak_aux_bytes=_aux_bytes(splats, tiles, w, h, _dtype(precision)),
    )
    ctx = ForwardContext(camera, len(scene), bg.copy(), splats, tiles, raster, precision, threads,
                         scene_means=scene.means.copy())
    return RenderResult(raster.image, stats, ctx)

