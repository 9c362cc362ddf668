"""Feature pyramids and pixel-aligned feedback (PaF) feature sampling.

A `FeatureMap` is an ``(H, W, C)`` grid stretched over the full pixel
rectangle of its camera; grid node ``(i, j)`` sits at the center of pixel
block ``(i, j)``. Sampling outside the rectangle returns zeros and flags the
sample invalid.

In descent mode the pyramid is synthesised from the ground-truth mesh so
that the sampled channels are the misalignment between the estimate and the
body seen in the image: occupancy, the pixel offset to the nearest body
vertex, and a signed distance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraView, project_points, project_weak_perspective
from .tensorio import load_tensors, save_tensors

CH_OCC, CH_DU, CH_DV, CH_SDF = 0, 1, 2, 3
CH_CODE = 4  # first of the surface-code channels


@dataclass(frozen=True)
class FeatureMap:
    grid: np.ndarray  # (H, W, C)
    level: int
    resolution: tuple[int, int]  # (width, height) in pixels

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        if g.ndim != 3 or g.shape[0] < 2 or g.shape[1] < 2:
            raise ValueError("feature grid must be (H, W, C) with H, W >= 2")
        if not np.all(np.isfinite(g)):
            raise ValueError("feature grid has non-finite entries")
        object.__setattr__(self, "grid", g)

    @property
    def shape(self):
        return self.grid.shape

    @property
    def cell(self) -> tuple[float, float]:
        H, W, _ = self.grid.shape
        return self.resolution[0] / W, self.resolution[1] / H

    def cell_centers(self):
        """Pixel coordinates of all grid nodes, shape ``(H, W, 2)``."""
        H, W, _ = self.grid.shape
        cx, cy = self.cell
        u = (np.arange(W) + 0.5) * cx
        v = (np.arange(H) + 0.5) * cy
        uu, vv = np.meshgrid(u, v)
        return np.stack([uu, vv], axis=-1)


@dataclass(frozen=True)
class FeaturePyramid:
    levels: tuple

    def __post_init__(self):
        if len(self.levels) != 3:
            raise ValueError("a pyramid has exactly three levels")
        sizes = [m.grid.shape[0] * m.grid.shape[1] for m in self.levels]
        if not (sizes[0] < sizes[1] < sizes[2]):
            raise ValueError("pyramid levels must strictly increase in resolution")

    def __getitem__(self, i) -> FeatureMap:
        return self.levels[i]

    @property
    def channels(self) -> int:
        return self.levels[0].grid.shape[2]


@dataclass(frozen=True)
class PixelAlignedFeature:
    features: np.ndarray  # (|D|, C + 2)
    valid: np.ndarray  # (|D|,)
    uv: np.ndarray  # (|D|, 2) sample pixels
    level: int = 1


@dataclass
class PyramidConfig:
    sizes: tuple = (14, 28, 56)
    channels: int = 8
    sigma_cells: float = 2.0  # in coarse-level cells
    clamp_px: float = 32.0
    body_radius_px: float = 6.0
    occluders: list = field(default_factory=list)  # [(x0, y0, x1, y1)] pixels


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------


def _grid_coords(fmap: FeatureMap, uv):
    uv = np.asarray(uv, dtype=float)
    cx, cy = fmap.cell
    W_px, H_px = fmap.resolution
    inside = (
        np.isfinite(uv).all(axis=-1)
        & (uv[..., 0] >= 0) & (uv[..., 0] <= W_px)
        & (uv[..., 1] >= 0) & (uv[..., 1] <= H_px)
    )  # fmt: skip
    g = np.stack([uv[..., 0] / cx - 0.5, uv[..., 1] / cy - 0.5], axis=-1)
    return g, inside


def _corners(fmap: FeatureMap, g):
    H, W, _ = fmap.grid.shape
    gx = np.clip(g[..., 0], 0.0, W - 1)
    gy = np.clip(g[..., 1], 0.0, H - 1)
    x0 = np.clip(np.floor(gx).astype(int), 0, W - 2)
    y0 = np.clip(np.floor(gy).astype(int), 0, H - 2)
    fx = gx - x0
    fy = gy - y0
    G = fmap.grid
    f00 = G[y0, x0]
    f10 = G[y0, x0 + 1]
    f01 = G[y0 + 1, x0]
    f11 = G[y0 + 1, x0 + 1]
    clamped_x = (g[..., 0] < 0) | (g[..., 0] > W - 1)
    clamped_y = (g[..., 1] < 0) | (g[..., 1] > H - 1)
    return f00, f10, f01, f11, fx[..., None], fy[..., None], clamped_x, clamped_y


def sample(fmap: FeatureMap, uv):
    """Vectorised bilinear sampling: ``(values (..., C), valid (...))``."""
    g, inside = _grid_coords(fmap, np.nan_to_num(uv, nan=-1e9))
    f00, f10, f01, f11, fx, fy, _, _ = _corners(fmap, g)
    val = (1 - fx) * (1 - fy) * f00 + fx * (1 - fy) * f10 + (1 - fx) * fy * f01 + fx * fy * f11
    return np.where(inside[..., None], val, 0.0), inside


def sample_grad(fmap: FeatureMap, uv):
    """Vectorised d(value)/d(uv), shape ``(..., C, 2)``; zero outside the rectangle."""
    g, inside = _grid_coords(fmap, np.nan_to_num(uv, nan=-1e9))
    f00, f10, f01, f11, fx, fy, clamped_x, clamped_y = _corners(fmap, g)
    cx, cy = fmap.cell
    du = ((1 - fy) * (f10 - f00) + fy * (f11 - f01)) / cx
    dv = ((1 - fx) * (f01 - f00) + fx * (f11 - f10)) / cy
    du = np.where((inside & ~clamped_x)[..., None], du, 0.0)
    dv = np.where((inside & ~clamped_y)[..., None], dv, 0.0)
    return np.stack([du, dv], axis=-1)


def bilinear_sample(fmap: FeatureMap, uv):
    """Sample one pixel; returns ``(C-vector, valid)``."""
    val, ok = sample(fmap, np.asarray(uv, dtype=float).reshape(2))
    return val, bool(ok)


def bilinear_grad(fmap: FeatureMap, uv):
    """Analytic ``C x 2`` Jacobian of `bilinear_sample` at one pixel.

    On a grid line the derivative of the cell containing ``uv + eps`` is
    returned.
    """
    return sample_grad(fmap, np.asarray(uv, dtype=float).reshape(2))


def grid_sample_init(fmap: FeatureMap, grid_res: int = 8):
    """Samples on a uniform ``grid_res x grid_res`` lattice, flattened row-major."""
    if grid_res < 2:
        raise ValueError("grid_res must be at least 2")
    W_px, H_px = fmap.resolution
    u = (np.arange(grid_res) + 0.5) / grid_res * W_px
    v = (np.arange(grid_res) + 0.5) / grid_res * H_px
    uu, vv = np.meshgrid(u, v)
    val, _ = sample(fmap, np.stack([uu, vv], axis=-1).reshape(-1, 2))
    return val.reshape(-1)


# ---------------------------------------------------------------------------
# PaF extraction
# ---------------------------------------------------------------------------


def paf_from_pixels(uv, valid, pyramid: FeaturePyramid, level: int) -> PixelAlignedFeature:
    fmap = pyramid[level]
    vals, inside = sample(fmap, uv)
    ok = inside & valid
    W_px, H_px = fmap.resolution
    coords = np.stack([2 * uv[:, 0] / W_px - 1, 2 * uv[:, 1] / H_px - 1], axis=1)
    feats = np.concatenate([vals, coords], axis=1)
    feats[~ok] = 0.0
    return PixelAlignedFeature(feats, ok, uv, level)


def extract_paf(vertices_down, cam: CameraView, pyramid: FeaturePyramid, level: int,
                weak=None) -> PixelAlignedFeature:
    """Project the downsampled mesh into one view and sample its feature map.

    With ``weak=(s, o)`` the vertices are camera-aligned body points and are
    projected with the weak-perspective camera instead of ``cam``.
    """
    if level not in (1, 2):
        raise ValueError("mesh sampling uses pyramid levels 1 or 2")
    X = np.asarray(vertices_down, dtype=float)
    if weak is None:
        uv, depth = project_points(cam.to_camera(X), cam.K)
        front = depth > 0
    else:
        s, o = weak
        uv = project_weak_perspective(X, s, o, crop_res=cam.resolution[0])
        front = np.ones(len(X), dtype=bool)
    return paf_from_pixels(uv, front, pyramid, level)


# ---------------------------------------------------------------------------
# descent-mode pyramids
# ---------------------------------------------------------------------------


def _synth_level(points_px, size, channels, resolution, sigma, cfg: PyramidConfig, codes=None):
    H = W = size
    probe = FeatureMap(np.zeros((H, W, 1)), 0, resolution)
    centers = probe.cell_centers().reshape(-1, 2)
    grid = np.zeros((H * W, channels))
    if len(points_px):
        diff = points_px[None, :, :] - centers[:, None, :]
        d2 = np.einsum("cpk,cpk->cp", diff, diff)
        nearest = np.argmin(d2, axis=1)
        off = diff[np.arange(len(centers)), nearest]
        d = np.sqrt(d2[np.arange(len(centers)), nearest])
        grid[:, CH_OCC] = np.exp(-(d**2) / (2 * sigma**2))
        grid[:, CH_DU : CH_DV + 1] = np.clip(off, -cfg.clamp_px, cfg.clamp_px)
        grid[:, CH_SDF] = d - cfg.body_radius_px
        if codes is not None:
            k = min(codes.shape[1], channels - CH_CODE)
            grid[:, CH_CODE : CH_CODE + k] = codes[nearest, :k]
    for x0, y0, x1, y1 in cfg.occluders:
        hide = (centers[:, 0] >= x0) & (centers[:, 0] <= x1) & (centers[:, 1] >= y0) & (centers[:, 1] <= y1)
        grid[hide] = 0.0
    return grid.reshape(H, W, channels)


CODE_SCALE_MM = 1000.0


def surface_codes(template):
    """Per downsampled vertex identity code: its rest-template position in meters."""
    return template.v_template[template.down_idx] / CODE_SCALE_MM


def synth_pyramid(gt_vertices_down, cam: CameraView, cfg: PyramidConfig | None = None,
                  jitter=None, codes=None) -> FeaturePyramid:
    """Analytic misalignment pyramid rendered from the ground-truth mesh.

    ``jitter`` is an optional ``(n, 2)`` pixel perturbation of the projected
    ground-truth points, modelling detector noise.
    """
    cfg = cfg or PyramidConfig()
    if cfg.channels < 4:
        raise ValueError("descent-mode pyramids need at least 4 channels")
    uv, depth = project_points(cam.to_camera(gt_vertices_down), cam.K)
    if jitter is not None:
        uv = uv + np.asarray(jitter, dtype=float)
    front = depth > 0
    pts = uv[front]
    if codes is not None:
        codes = np.asarray(codes, dtype=float)[front]
    sigma = cfg.sigma_cells * cam.resolution[0] / cfg.sizes[0]
    levels = tuple(
        FeatureMap(_synth_level(pts, n, cfg.channels, cam.resolution, sigma, cfg, codes), i, tuple(cam.resolution))
        for i, n in enumerate(cfg.sizes)
    )
    return FeaturePyramid(levels)


def save_pyramids(stem, pyramids, meta=None):
    tensors = {}
    for v, pyr in enumerate(pyramids):
        for lv, fmap in enumerate(pyr.levels):
            tensors[f"view{v}/level{lv}"] = fmap.grid
    info = dict(meta or {})
    info["resolutions"] = [list(p[0].resolution) for p in pyramids]
    return save_tensors(stem, tensors, info)


def load_pyramids(stem):
    tensors, meta = load_tensors(stem)
    out = []
    for v, res in enumerate(meta["resolutions"]):
        levels = tuple(FeatureMap(tensors[f"view{v}/level{lv}"], lv, tuple(res)) for lv in range(3))
        out.append(FeaturePyramid(levels))
    return out
