"""Image-quality metrics for rectified documents.

* :func:`ms_ssim` - five-scale structural similarity (11x11 Gaussian window,
  sigma 1.5, K1=0.01, K2=0.03, dynamic range 1, weights 0.0448 ... 0.1333).
* :func:`local_distortion` - mean magnitude of a dense correspondence field
  from the rectified image to the reference, averaged over the page region.
  The field comes from coarse-to-fine block matching (4 levels, 8x8 blocks,
  +-4 px search per level, quadratic subpixel refinement, 3x3 median
  smoothing).  Values are in pixels but are not comparable with SIFT-flow
  based numbers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .flow_core import ImageRaster, resize_bilinear, to_gray

__all__ = [
    "MS_SSIM_WEIGHTS",
    "MetricReport",
    "LDResult",
    "common_gray",
    "gaussian_window",
    "ssim_components",
    "ms_ssim",
    "dense_correspondence",
    "page_region",
    "local_distortion",
    "flow_to_rgb",
    "evaluate_pair",
]

MS_SSIM_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
WIN_SIZE = 11
WIN_SIGMA = 1.5
K1, K2 = 0.01, 0.03
MIN_SIDE = 176


@dataclass
class MetricReport:
    ms_ssim: float | None
    ld: float
    per_scale_ssim: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"ms_ssim": self.ms_ssim, "per_scale": list(self.per_scale_ssim), "ld": self.ld, "flags": list(self.flags)}


@dataclass
class LDResult:
    ld: float
    field: np.ndarray  # (H, W, 2) correspondence vectors (x, y)
    region: np.ndarray
    low_confidence: bool = False


def _gray(img) -> np.ndarray:
    if isinstance(img, ImageRaster):
        return to_gray(img)
    a = np.asarray(img, dtype=np.float64)
    return a if a.ndim == 2 else ImageRaster(a).data @ np.array([0.299, 0.587, 0.114])


def _letterbox(g: np.ndarray, h: int, w: int, fill: float) -> np.ndarray:
    gh, gw = g.shape
    if (gh, gw) == (h, w):
        return g
    s = min(h / gh, w / gw)
    nh, nw = max(1, round(gh * s)), max(1, round(gw * s))
    out = np.full((h, w), fill)
    r0, c0 = (h - nh) // 2, (w - nw) // 2
    out[r0:r0 + nh, c0:c0 + nw] = resize_bilinear(g, nh, nw)
    return out


def common_gray(a, b, fill: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Luma of both images at the dimensions of the smaller one (letterboxed)."""
    ga, gb = _gray(a), _gray(b)
    h, w = ga.shape if ga.size <= gb.size else gb.shape
    return _letterbox(ga, h, w, fill), _letterbox(gb, h, w, fill)


def gaussian_window(size: int = WIN_SIZE, sigma: float = WIN_SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    r = len(win) // 2
    y = ndimage.correlate1d(x, win, axis=0, mode="constant")
    y = ndimage.correlate1d(y, win, axis=1, mode="constant")
    return y[r:-r, r:-r]


def ssim_components(x: np.ndarray, y: np.ndarray, data_range: float = 1.0) -> tuple[float, float]:
    """Mean SSIM and mean contrast-structure term for one scale."""
    win = gaussian_window()
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    mu_x, mu_y = _filter_valid(x, win), _filter_valid(y, win)
    sxx = _filter_valid(x * x, win) - mu_x * mu_x
    syy = _filter_valid(y * y, win) - mu_y * mu_y
    sxy = _filter_valid(x * y, win) - mu_x * mu_y
    cs_map = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    return float(np.mean(lum * cs_map)), float(np.mean(cs_map))


def _pool2(x: np.ndarray) -> np.ndarray:
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def ms_ssim(a, b) -> tuple[float, list[float]]:
    """Return ``(ms_ssim, per_scale)``.

    ``per_scale`` holds the factors entering the product: the contrast-
    structure term at scales 1-4 and the full SSIM at scale 5.  Negative
    factors are clamped to 0 so the result stays in [0, 1].
    """
    x, y = common_gray(a, b)
    if min(x.shape) < MIN_SIDE:
        raise ValueError(f"images must be at least {MIN_SIDE} px on each side for 5 scales, got {x.shape}")
    factors = []
    for level in range(5):
        s, cs = ssim_components(x, y)
        factors.append(s if level == 4 else cs)
        x, y = _pool2(x), _pool2(y)
    factors = [max(f, 0.0) for f in factors]
    value = float(np.prod(np.power(factors, MS_SSIM_WEIGHTS)))
    return value, factors


def _pyramid(g: np.ndarray, levels: int) -> list[np.ndarray]:
    out = [g]
    for _ in range(levels - 1):
        out.append(_pool2(ndimage.gaussian_filter(out[-1], 1.0, mode="nearest")))
    return out


def _warp(img: np.ndarray, field_xy: np.ndarray) -> np.ndarray:
    h, w = img.shape
    rows, cols = np.indices((h, w), dtype=np.float64)
    coords = [rows + field_xy[..., 1], cols + field_xy[..., 0]]
    return ndimage.map_coordinates(img, coords, order=1, mode="nearest")


def _match_level(src, ref, init, block, radius):
    warped = _warp(ref, init)
    offsets = np.arange(-radius, radius + 1)
    n = len(offsets)
    cost = np.empty((n, n) + src.shape)
    for i, dy in enumerate(offsets):
        for j, dx in enumerate(offsets):
            shifted = ndimage.shift(warped, (-dy, -dx), order=0, mode="nearest")
            cost[i, j] = ndimage.uniform_filter((src - shifted) ** 2, size=block, mode="nearest")
    # prefer the smallest residual among ties (flat regions keep the coarse estimate)
    penalty = 1e-9 * (offsets[:, None] ** 2 + offsets[None, :] ** 2)
    flat = (cost + penalty[:, :, None, None]).reshape(n * n, *src.shape)
    best = np.argmin(flat, axis=0)
    bi, bj = np.divmod(best, n)
    rr, cc = np.indices(src.shape)
    c0 = cost[bi, bj, rr, cc]

    def refine(cm, cp, ok):
        den = cm - 2 * c0 + cp
        with np.errstate(invalid="ignore", divide="ignore"):
            off = np.where(ok & (den > 0) & (c0 > 1e-12), (cm - cp) / (2 * den), 0.0)
        return np.clip(np.nan_to_num(off), -0.5, 0.5)

    okx = (bj > 0) & (bj < n - 1)
    oky = (bi > 0) & (bi < n - 1)
    sx = refine(cost[bi, np.clip(bj - 1, 0, n - 1), rr, cc], cost[bi, np.clip(bj + 1, 0, n - 1), rr, cc], okx)
    sy = refine(cost[np.clip(bi - 1, 0, n - 1), bj, rr, cc], cost[np.clip(bi + 1, 0, n - 1), bj, rr, cc], oky)
    step = np.stack([offsets[bj] + sx, offsets[bi] + sy], axis=-1)
    out = init + step
    for k in range(2):
        out[..., k] = ndimage.median_filter(out[..., k], size=3, mode="nearest")
    return out


def _confidence(src: np.ndarray, block: int, tau: float = 1e-3) -> np.ndarray:
    # smaller structure-tensor eigenvalue over the block: high on corners/texture,
    # zero on flat areas and along straight edges (aperture problem)
    gy, gx = np.gradient(src)
    jxx = ndimage.uniform_filter(gx * gx, size=block, mode="nearest")
    jyy = ndimage.uniform_filter(gy * gy, size=block, mode="nearest")
    jxy = ndimage.uniform_filter(gx * gy, size=block, mode="nearest")
    lam_min = 0.5 * (jxx + jyy - np.sqrt((jxx - jyy) ** 2 + 4 * jxy ** 2))
    return lam_min > tau


def _fill(field_xy: np.ndarray, conf: np.ndarray, sigma: float) -> np.ndarray:
    """Replace low-confidence vectors by a Gaussian-weighted mean of confident ones."""
    if conf.all() or not conf.any():
        return field_xy
    w = conf.astype(np.float64)
    den = ndimage.gaussian_filter(w, sigma, mode="nearest")
    out = field_xy.copy()
    hole = ~conf & (den > 1e-3)
    for k in range(2):
        num = ndimage.gaussian_filter(field_xy[..., k] * w, sigma, mode="nearest")
        out[..., k][hole] = num[hole] / den[hole]
    return out


def dense_correspondence(src: np.ndarray, ref: np.ndarray, levels: int = 4, block: int = 8,
                         radius: int = 4) -> np.ndarray:
    """Per-pixel vector ``v`` such that ``src(p)`` best matches ``ref(p + v)``.

    At every level, vectors in low-texture pixels are replaced by a weighted
    mean of nearby confident vectors before moving to the finer level.
    """
    ps, pr = _pyramid(src, levels), _pyramid(ref, levels)
    field_xy = np.zeros(ps[-1].shape + (2,))
    for level in range(levels - 1, -1, -1):
        s, r = ps[level], pr[level]
        if field_xy.shape[:2] != s.shape:
            fh, fw = field_xy.shape[:2]
            sh, sw = s.shape
            field_xy = resize_bilinear(field_xy, sh, sw) * np.array([sw / fw, sh / fh])
        field_xy = _match_level(s, r, field_xy, block, radius)
        field_xy = _fill(field_xy, _confidence(s, block), sigma=block)
    return field_xy


def page_region(reference_gray: np.ndarray, threshold: float = 0.98, dilate: int = 15) -> np.ndarray:
    """Non-background pixels of the reference, dilated by ``dilate`` px."""
    return ndimage.maximum_filter(reference_gray < threshold, size=2 * dilate + 1, mode="constant")


def local_distortion(rectified, reference) -> LDResult:
    a, b = common_gray(rectified, reference)
    region = page_region(b)
    if np.ptp(a) < 1e-6 or np.ptp(b) < 1e-6 or not region.any():
        return LDResult(0.0, np.zeros(a.shape + (2,)), region, True)
    field_xy = dense_correspondence(a, b)
    mag = np.hypot(field_xy[..., 0], field_xy[..., 1])
    return LDResult(float(mag[region].mean()), field_xy, region)


def flow_to_rgb(field_xy: np.ndarray, max_mag: float | None = None) -> np.ndarray:
    """Hue = direction, value = magnitude visualization (H x W x 3 in [0, 1])."""
    from matplotlib.colors import hsv_to_rgb

    mag = np.hypot(field_xy[..., 0], field_xy[..., 1])
    ang = np.arctan2(field_xy[..., 1], field_xy[..., 0])
    top = max_mag or max(float(mag.max()), 1e-9)
    hsv = np.stack([(ang + np.pi) / (2 * np.pi), np.ones_like(mag), np.clip(mag / top, 0, 1)], axis=-1)
    return hsv_to_rgb(hsv)


def evaluate_pair(rectified, reference, min_side: int = MIN_SIDE) -> MetricReport:
    """MS-SSIM and LD for one pair.

    Pairs too small for five MS-SSIM scales are upsampled (short side to
    ``min_side``) for MS-SSIM only and flagged ``upsampled_for_ms_ssim``;
    LD always runs at native resolution.
    """
    a, b = common_gray(rectified, reference)
    flags = []
    sa, sb = a, b
    if min(a.shape) < min_side:
        s = min_side / min(a.shape)
        h, w = max(min_side, round(a.shape[0] * s)), max(min_side, round(a.shape[1] * s))
        sa, sb = resize_bilinear(a, h, w), resize_bilinear(b, h, w)
        flags.append("upsampled_for_ms_ssim")
    value, per_scale = ms_ssim(sa, sb)
    ld = local_distortion(a, b)
    if ld.low_confidence:
        flags.append("ld_low_confidence")
    return MetricReport(value, ld.ld, per_scale, flags)
