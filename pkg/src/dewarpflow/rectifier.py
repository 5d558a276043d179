"""Forward-mapping rectification.

Foreground pixels are pushed to ``p + flow(p)``; the pushed points are
connected into triangles and every output pixel whose center falls in a
triangle pulls its color from the distorted image through barycentric
interpolation of the triangle's source positions.

The production path triangulates on the regular source grid (two triangles
per 2x2 foreground block).  :func:`delaunay_triangles` is an incremental
Bowyer-Watson triangulation of the scattered target points, kept as the
reference pipeline for small instances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flow_core import FlowField, ForegroundMask, ImageRaster, resize_bilinear, scale_flow

__all__ = [
    "TriangleMesh",
    "RasterResult",
    "forward_positions",
    "triangulate_grid",
    "scan_triangles",
    "sample_bilinear",
    "rasterize",
    "rectify",
    "rectify_scaled",
    "paste",
    "delaunay_triangles",
    "rectify_delaunay",
]

TEAR_RATIO = 32.0
# triangles scanned per batch; bounds the candidate-pixel working set
_CHUNK = 1 << 16


@dataclass(frozen=True)
class TriangleMesh:
    points: np.ndarray  # (N, 2) target (x, y)
    src_points: np.ndarray  # (N, 2) source (x, y)
    triangles: np.ndarray  # (T, 3) indices

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        src = np.asarray(self.src_points, dtype=np.float64).reshape(-1, 2)
        tri = np.asarray(self.triangles, dtype=np.intp).reshape(-1, 3)
        if len(pts) != len(src):
            raise ValueError(f"{len(pts)} target points but {len(src)} source points")
        if len(tri) and (tri.min() < 0 or tri.max() >= len(pts)):
            raise ValueError("triangle index out of range")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "src_points", src)
        object.__setattr__(self, "triangles", tri)

    def source_areas(self) -> np.ndarray:
        return _signed_areas(self.src_points[self.triangles])

    def target_areas(self) -> np.ndarray:
        return _signed_areas(self.points[self.triangles])


@dataclass(frozen=True)
class RasterResult:
    """Rectified raster on the bounding-box canvas of the mapped points.

    Canvas pixel ``(r, c)`` sits at absolute position ``(c + tx, r + ty)``
    where ``translation = (tx, ty)``.
    """

    image: ImageRaster
    coverage: np.ndarray
    translation: tuple[int, int]
    n_clamped: int = 0


def _signed_areas(tri_pts: np.ndarray) -> np.ndarray:
    a, b, c = tri_pts[:, 0], tri_pts[:, 1], tri_pts[:, 2]
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))


def forward_positions(flow: FlowField, mask: ForegroundMask) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(targets, sources)`` as (N, 2) xy arrays, foreground pixels in row-major order."""
    if flow.shape != mask.shape:
        raise ValueError(f"flow {flow.shape} and mask {mask.shape} differ")
    rows, cols = np.nonzero(mask.binary())
    src = np.stack([cols, rows], axis=1).astype(np.float64)
    tgt = src + np.stack([flow.dx[rows, cols], flow.dy[rows, cols]], axis=1)
    return tgt, src


def triangulate_grid(flow: FlowField, mask: ForegroundMask, tear_ratio: float = TEAR_RATIO) -> TriangleMesh:
    """Two triangles per all-foreground 2x2 block, split along TL-BR."""
    tgt, src = forward_positions(flow, mask)
    fg = mask.binary()
    h, w = fg.shape
    index = np.full((h, w), -1, dtype=np.intp)
    index[fg] = np.arange(len(tgt))
    full = fg[:-1, :-1] & fg[:-1, 1:] & fg[1:, :-1] & fg[1:, 1:]
    r, c = np.nonzero(full)
    tl, tr = index[r, c], index[r, c + 1]
    bl, br = index[r + 1, c], index[r + 1, c + 1]
    tris = np.concatenate([np.stack([tl, tr, br], 1), np.stack([tl, br, bl], 1)])
    # each source triangle has area 0.5
    keep = np.abs(_signed_areas(tgt[tris])) <= tear_ratio * 0.5
    return TriangleMesh(tgt, src, tris[keep])


def scan_triangles(tgt, src, tris, shape, offset=(0, 0)):
    """Rasterize triangles onto an ``shape`` canvas whose pixel (0, 0) is at ``offset``.

    Returns ``(src_xy, covered)``: the barycentrically interpolated source
    coordinate per covered pixel (H x W x 2, NaN elsewhere) and the coverage
    mask.  Where triangles overlap, the one with the smallest target area
    wins; ties go to the lower triangle index, so the result does not depend
    on processing order.
    """
    h, w = shape
    tgt = np.asarray(tgt, dtype=np.float64) - np.asarray(offset, dtype=np.float64)
    src = np.asarray(src, dtype=np.float64)
    tris = np.asarray(tris, dtype=np.intp).reshape(-1, 3)
    best_area = np.full(h * w, np.inf)
    best_tri = np.full(h * w, -1, dtype=np.intp)
    out = np.full((h * w, 2), np.nan)
    for start in range(0, len(tris), _CHUNK):
        _scan_chunk(tgt, src, tris[start:start + _CHUNK], start, h, w, best_area, best_tri, out)
    covered = best_tri >= 0
    return out.reshape(h, w, 2), covered.reshape(h, w)


def _scan_chunk(tgt, src, tris, base, h, w, best_area, best_tri, out):
    p = tgt[tris]
    area = np.abs(_signed_areas(p))
    lo = np.ceil(p.min(axis=1) - 1e-9).astype(np.int64)
    hi = np.floor(p.max(axis=1) + 1e-9).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, [w - 1, h - 1])
    nx = np.clip(hi[:, 0] - lo[:, 0] + 1, 0, None)
    ny = np.clip(hi[:, 1] - lo[:, 1] + 1, 0, None)
    counts = np.where(area > 0, nx * ny, 0)
    total = int(counts.sum())
    if total == 0:
        return
    t = np.repeat(np.arange(len(tris)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    px = lo[t, 0] + local % nx[t]
    py = lo[t, 1] + local // nx[t]

    a, b, c = p[t, 0], p[t, 1], p[t, 2]
    den = (b[:, 1] - c[:, 1]) * (a[:, 0] - c[:, 0]) + (c[:, 0] - b[:, 0]) * (a[:, 1] - c[:, 1])
    l1 = ((b[:, 1] - c[:, 1]) * (px - c[:, 0]) + (c[:, 0] - b[:, 0]) * (py - c[:, 1])) / den
    l2 = ((c[:, 1] - a[:, 1]) * (px - c[:, 0]) + (a[:, 0] - c[:, 0]) * (py - c[:, 1])) / den
    l3 = 1.0 - l1 - l2
    tol = -1e-9
    inside = (l1 >= tol) & (l2 >= tol) & (l3 >= tol)
    if not inside.any():
        return
    t, px, py = t[inside], px[inside], py[inside]
    l1, l2, l3 = l1[inside], l2[inside], l3[inside]
    pix = py * w + px
    tri_area = area[t]
    gid = t + base

    order = np.lexsort((gid, tri_area, pix))
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix[order][1:] != pix[order][:-1]
    sel = order[first]
    pix, tri_area, gid = pix[sel], tri_area[sel], gid[sel]
    better = (tri_area < best_area[pix]) | ((tri_area == best_area[pix]) & (gid < best_tri[pix]))
    sel, pix = sel[better], pix[better]
    best_area[pix] = tri_area[better]
    best_tri[pix] = gid[better]
    s = src[tris[t[sel]]]
    out[pix] = l1[sel, None] * s[:, 0] + l2[sel, None] * s[:, 1] + l3[sel, None] * s[:, 2]


def sample_bilinear(data: np.ndarray, xy: np.ndarray) -> tuple[np.ndarray, int]:
    """Sample ``data`` (H x W x C) at continuous ``xy`` (..., 2).

    Coordinates within 1e-6 of an integer are snapped so that integral
    positions copy pixels exactly.  Out-of-bounds positions are clamped to
    the image and counted.
    """
    h, w = data.shape[:2]
    x, y = xy[..., 0].copy(), xy[..., 1].copy()
    for v in (x, y):
        r = np.round(v)
        snap = np.abs(v - r) < 1e-6
        v[snap] = r[snap]
    oob = (x < 0) | (x > w - 1) | (y < 0) | (y > h - 1)
    x = np.clip(x, 0, w - 1)
    y = np.clip(y, 0, h - 1)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    d = data.astype(np.float64)
    top = d[y0, x0] * (1 - fx) + d[y0, x1] * fx
    bot = d[y1, x0] * (1 - fx) + d[y1, x1] * fx
    return top * (1 - fy) + bot * fy, int(oob.sum())


def rasterize(image: ImageRaster, mesh: TriangleMesh) -> RasterResult:
    """Fill the bounding-box canvas of ``mesh.points`` from ``image``."""
    c = image.channels
    if len(mesh.points) == 0:
        return RasterResult(ImageRaster(np.zeros((1, 1, c)), image.color_space), np.zeros((1, 1), bool), (0, 0))
    lo = np.floor(mesh.points.min(axis=0) + 1e-9).astype(int)
    hi = np.floor(mesh.points.max(axis=0) + 1e-9).astype(int)
    w, h = hi - lo + 1
    src_xy, covered = scan_triangles(mesh.points, mesh.src_points, mesh.triangles, (h, w), lo)
    out = np.zeros((h, w, c))
    vals, n_clamped = sample_bilinear(image.data, src_xy[covered])
    out[covered] = vals
    return RasterResult(ImageRaster(out, image.color_space), covered, (int(lo[0]), int(lo[1])), n_clamped)


def rectify(image: ImageRaster, flow: FlowField, mask: ForegroundMask, tear_ratio: float = TEAR_RATIO) -> RasterResult:
    if image.shape != flow.shape:
        raise ValueError(f"image {image.shape} and flow {flow.shape} differ")
    return rasterize(image, triangulate_grid(flow, mask, tear_ratio))


def rectify_scaled(image_hd: ImageRaster, flow: FlowField, mask: ForegroundMask, lam: float,
                   tear_ratio: float = TEAR_RATIO) -> RasterResult:
    """Rectify a high-resolution image with a flow predicted at lower resolution.

    The flow is zoomed by ``lam`` (positions and magnitudes) and applied to
    ``image_hd``, whose size must be ``round(lam * flow size)`` within 1 px.
    """
    if not lam > 0:
        raise ValueError(f"scale factor must be positive, got {lam}")
    h, w = flow.shape
    eh, ew = round(lam * h), round(lam * w)
    ih, iw = image_hd.shape
    if abs(ih - eh) > 1 or abs(iw - ew) > 1:
        raise ValueError(f"image {ih}x{iw} does not match flow {h}x{w} scaled by {lam} ({eh}x{ew})")
    sflow, smask = scale_flow(flow, mask, lam)
    if sflow.shape != (ih, iw):
        sflow = FlowField(resize_bilinear(sflow.dx, ih, iw), resize_bilinear(sflow.dy, ih, iw))
        smask = ForegroundMask((resize_bilinear(smask.values, ih, iw) >= 0.5).astype(np.float32))
    return rectify(image_hd, sflow, smask, tear_ratio)


def paste(result: RasterResult, shape: tuple[int, int], fill: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Place a rectified raster on an absolute ``shape`` canvas (cropping overflow)."""
    h, w = shape
    c = result.image.channels
    img = np.full((h, w, c), fill, dtype=np.float64)
    cov = np.zeros((h, w), dtype=bool)
    tx, ty = result.translation
    rh, rw = result.coverage.shape
    r0, c0 = max(0, ty), max(0, tx)
    r1, c1 = min(h, ty + rh), min(w, tx + rw)
    if r1 <= r0 or c1 <= c0:
        return img, cov
    sub_cov = result.coverage[r0 - ty:r1 - ty, c0 - tx:c1 - tx]
    sub_img = result.image.data[r0 - ty:r1 - ty, c0 - tx:c1 - tx]
    img[r0:r1, c0:c1][sub_cov] = sub_img[sub_cov]
    cov[r0:r1, c0:c1] = sub_cov
    return img, cov


def _circumcircle(a, b, c):
    ax, ay = a
    bx, by = b
    cx, cy = c
    d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    if d == 0:
        # collinear: let the next insertion that sees it remove it
        return ax, ay, np.inf
    a2, b2, c2 = ax * ax + ay * ay, bx * bx + by * by, cx * cx + cy * cy
    ux = (a2 * (by - cy) + b2 * (cy - ay) + c2 * (ay - by)) / d
    uy = (a2 * (cx - bx) + b2 * (ax - cx) + c2 * (bx - ax)) / d
    return ux, uy, (ax - ux) ** 2 + (ay - uy) ** 2


def delaunay_triangles(points: np.ndarray) -> np.ndarray:
    """Incremental Bowyer-Watson Delaunay triangulation, O(n^2).

    Intended for a few hundred points.  Returns (T, 3) indices into ``points``.
    """
    pts = [tuple(p) for p in np.asarray(points, dtype=np.float64)]
    n = len(pts)
    if n < 3:
        return np.zeros((0, 3), dtype=np.intp)
    arr = np.asarray(pts)
    center = arr.mean(axis=0)
    span = max(np.ptp(arr[:, 0]), np.ptp(arr[:, 1]), 1.0) * 64
    pts += [
        (center[0] - 2 * span, center[1] - span),
        (center[0] + 2 * span, center[1] - span),
        (center[0], center[1] + 2 * span),
    ]
    tris = {(n, n + 1, n + 2): _circumcircle(*pts[n:n + 3])}
    for i in range(n):
        px, py = pts[i]
        bad = [t for t, (ux, uy, r2) in tris.items() if (px - ux) ** 2 + (py - uy) ** 2 < r2 * (1 - 1e-12)]
        edges: dict = {}
        for t in bad:
            for e in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
                key = tuple(sorted(e))
                edges[key] = edges.get(key, 0) + 1
            del tris[t]
        for (u, v), cnt in edges.items():
            if cnt == 1:
                t = (u, v, i)
                tris[t] = _circumcircle(pts[u], pts[v], pts[i])
    out = [t for t in tris if max(t) < n]
    return np.array(out, dtype=np.intp).reshape(-1, 3)


def rectify_delaunay(image: ImageRaster, flow: FlowField, mask: ForegroundMask) -> RasterResult:
    """Reference pipeline: Delaunay triangulation of the scattered target points."""
    tgt, src = forward_positions(flow, mask)
    tris = delaunay_triangles(tgt)
    if len(tris):
        tris = tris[np.abs(_signed_areas(tgt[tris])) > 1e-12]
    return rasterize(image, TriangleMesh(tgt, src, tris))
