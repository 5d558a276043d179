"""Synthetic distorted documents with exact displacement-flow ground truth.

A procedurally drawn flat page is covered by a regular vertex mesh.  The mesh
is placed on the canvas, optionally rotated, and bent by fold/curve
perturbations; the page is then texture-mapped through the bent mesh.  The
same barycentric inversion that picks each distorted pixel's color also gives
its exact position on the flat page, which is the ground-truth flow.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .flow_core import FlowField, ForegroundMask, ImageRaster, Sample, save_flow, save_image
from .rectifier import sample_bilinear, scan_triangles

__all__ = [
    "MeshGrid",
    "PerturbSpec",
    "AugmentSpec",
    "generate_flat_document",
    "identity_mesh",
    "mesh_violations",
    "perturb_mesh",
    "fold_weight",
    "curve_weight",
    "procedural_background",
    "hsv_jitter",
    "synthesize",
    "write_dataset",
]

MIN_SIDE = 32
MAX_PERTURBS = 12
# target spacing between mesh vertices, in page pixels
MESH_STEP = 4.0


@dataclass(frozen=True)
class MeshGrid:
    """Vertex grid; ``vertices[r, c]`` is the (x, y) position of vertex (r, c)."""

    vertices: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64)
        if v.ndim != 3 or v.shape[2] != 2 or v.shape[0] < 2 or v.shape[1] < 2:
            raise ValueError(f"vertices must be rows x cols x 2 with rows, cols >= 2, got {v.shape}")
        v.flags.writeable = False
        object.__setattr__(self, "vertices", v)

    @property
    def rows(self) -> int:
        return self.vertices.shape[0]

    @property
    def cols(self) -> int:
        return self.vertices.shape[1]

    def triangles(self) -> np.ndarray:
        """(T, 3) vertex indices, two per quad, TL-TR-BR and TL-BR-BL."""
        idx = np.arange(self.rows * self.cols).reshape(self.rows, self.cols)
        tl, tr = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
        bl, br = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
        return np.concatenate([np.stack([tl, tr, br], 1), np.stack([tl, br, bl], 1)])

    def quad_areas(self) -> np.ndarray:
        """Signed areas of both triangles of every quad, shape (2, rows-1, cols-1)."""
        v = self.vertices
        tl, tr, bl, br = v[:-1, :-1], v[:-1, 1:], v[1:, :-1], v[1:, 1:]
        return np.stack([_cross(tl, tr, br), _cross(tl, br, bl)]) * 0.5


def _cross(a, b, c):
    return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])


@dataclass(frozen=True)
class PerturbSpec:
    kind: str  # "fold" or "curve"
    anchor: tuple[float, float]
    direction: tuple[float, float]
    strength: float
    radius: float

    def __post_init__(self):
        if self.kind not in ("fold", "curve"):
            raise ValueError(f"kind must be 'fold' or 'curve', got {self.kind!r}")
        if abs(np.hypot(*self.direction) - 1.0) > 1e-6:
            raise ValueError(f"direction {self.direction} is not a unit vector")
        if not self.strength >= 0:
            raise ValueError(f"strength must be >= 0, got {self.strength}")
        if not self.radius > 0:
            raise ValueError(f"radius must be > 0, got {self.radius}")


@dataclass(frozen=True)
class AugmentSpec:
    """Background and photometric augmentation.

    ``background`` is an image (tiled to the canvas if smaller), an integer
    seed for a procedural texture, or None to derive the texture from the
    sample seed.  Jitters are the maximum fractional change of each HSV
    channel.
    """

    background: ImageRaster | int | None = None
    hue_jitter: float = 0.05
    sat_jitter: float = 0.2
    val_jitter: float = 0.15

    def __post_init__(self):
        for name in ("hue_jitter", "sat_jitter", "val_jitter"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must be in [0, 1], got {v}")


def generate_flat_document(seed: int, h: int, w: int) -> ImageRaster:
    """A white page with text-like line blocks, ruled lines and figures."""
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ValueError(f"page must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}")
    rng = np.random.default_rng([seed, 0xD0C])
    page = np.ones((h, w, 3))
    margin_x = max(2, int(w * rng.uniform(0.06, 0.1)))
    margin_y = max(2, int(h * rng.uniform(0.05, 0.08)))
    line_h = max(3, int(round(h * rng.uniform(0.018, 0.026))))
    gap = line_h + max(1, int(round(line_h * rng.uniform(0.5, 1.0))))
    ink = rng.uniform(0.0, 0.2, size=3)

    y = margin_y
    while y + line_h < h - margin_y:
        roll = rng.random()
        if roll < 0.12 and y + 6 * gap < h - margin_y:
            # figure: tinted block with a dark frame
            fh = int(gap * rng.integers(3, 6))
            fw = int((w - 2 * margin_x) * rng.uniform(0.3, 0.9))
            x0 = margin_x + int(rng.integers(0, max(1, w - 2 * margin_x - fw)))
            page[y:y + fh, x0:x0 + fw] = rng.uniform(0.5, 0.9, size=3)
            page[y:y + fh, [x0, x0 + fw - 1]] = ink
            page[[y, y + fh - 1], x0:x0 + fw] = ink
            y += fh + gap
        elif roll < 0.2:
            page[y + line_h // 2, margin_x:w - margin_x] = ink * 0.5 + 0.3
            y += gap
        else:
            # a line of "words"
            x = margin_x + (int(rng.integers(2, 5)) * line_h if rng.random() < 0.2 else 0)
            end = w - margin_x - (int(rng.integers(0, (w - 2 * margin_x) // 2)) if rng.random() < 0.25 else 0)
            while x < end:
                ww = int(rng.integers(line_h, 5 * line_h))
                page[y:y + line_h, x:min(x + ww, end)] = ink
                x += ww + max(1, line_h // 2 + int(rng.integers(0, line_h)))
            y += gap
    # anti-alias relative to stroke height so content stays band-limited
    sig = 0.4 * line_h
    page = ndimage.gaussian_filter(page, sigma=(sig, sig, 0))
    return ImageRaster(np.clip(page, 0, 1), "RGB")


def identity_mesh(x0: float, y0: float, width: float, height: float, step: float = MESH_STEP) -> MeshGrid:
    """Axis-aligned grid spanning ``[x0, x0+width] x [y0, y0+height]``."""
    cols = max(2, int(np.ceil(width / step)) + 1)
    rows = max(2, int(np.ceil(height / step)) + 1)
    xs = np.linspace(x0, x0 + width, cols)
    ys = np.linspace(y0, y0 + height, rows)
    gx, gy = np.meshgrid(xs, ys)
    return MeshGrid(np.stack([gx, gy], axis=-1))


def mesh_violations(mesh: MeshGrid, canvas: tuple[int, int] | None = None) -> list[str]:
    out = []
    areas = mesh.quad_areas()
    if not (areas > 0).all():
        k, r, c = np.argwhere(areas <= 0)[0]
        out.append(f"inverted quad at ({r}, {c})")
    if canvas is not None:
        h, w = canvas
        v = mesh.vertices
        ok = (v[..., 0] >= -0.25 * w) & (v[..., 0] <= 1.25 * w) & (v[..., 1] >= -0.25 * h) & (v[..., 1] <= 1.25 * h)
        if not ok.all():
            out.append(f"vertex out of bounds at {tuple(np.argwhere(~ok)[0])}")
    return out


def fold_weight(d, radius):
    return radius / (d + radius)


def curve_weight(d, radius):
    return np.maximum(0.0, 1.0 - (d / radius) ** 2)


def _displacement(vertices, spec: PerturbSpec, strength: float) -> np.ndarray:
    ux, uy = spec.direction
    rel = vertices - np.asarray(spec.anchor)
    d = np.abs(rel[..., 0] * uy - rel[..., 1] * ux)
    wgt = fold_weight(d, spec.radius) if spec.kind == "fold" else curve_weight(d, spec.radius)
    return strength * wgt[..., None] * np.array([ux, uy])


def perturb_mesh(mesh: MeshGrid, spec: PerturbSpec, canvas: tuple[int, int] | None = None) -> MeshGrid:
    """Displace every vertex along ``spec.direction`` by ``strength * w(d)``.

    ``d`` is the vertex's distance to the line through ``anchor`` along
    ``direction``.  If the result inverts a quad (or leaves the overshoot
    bounds when ``canvas`` is given), the strength is halved, at most 8 times;
    a perturbation that never becomes valid is dropped.
    """
    strength = spec.strength
    for _ in range(9):
        out = MeshGrid(mesh.vertices + _displacement(mesh.vertices, spec, strength))
        if not mesh_violations(out, canvas):
            return out
        strength *= 0.5
    return mesh


def random_perturb(rng: np.random.Generator, mesh: MeshGrid, scale: float) -> PerturbSpec:
    r, c = rng.integers(0, mesh.rows), rng.integers(0, mesh.cols)
    theta = rng.uniform(0, 2 * np.pi)
    if rng.random() < 0.5:
        return PerturbSpec("fold", tuple(mesh.vertices[r, c]), (np.cos(theta), np.sin(theta)),
                           rng.uniform(0.02, 0.06) * scale, rng.uniform(0.1, 0.3) * scale)
    return PerturbSpec("curve", tuple(mesh.vertices[r, c]), (np.cos(theta), np.sin(theta)),
                       rng.uniform(0.04, 0.1) * scale, rng.uniform(0.3, 0.8) * scale)


def procedural_background(seed: int, h: int, w: int) -> np.ndarray:
    """Multi-octave value noise blended between two random tints (H x W x 3)."""
    rng = np.random.default_rng([seed, 0xB6])
    noise = np.zeros((h, w))
    amp, total = 1.0, 0.0
    for cells in (4, 8, 16, 32):
        grid = rng.random((cells + 1, cells + 1))
        noise += amp * ndimage.zoom(grid, (h / cells, w / cells), order=3, mode="nearest")[:h, :w]
        total += amp
        amp *= 0.5
    noise = np.clip(noise / total, 0, 1)
    c0, c1 = rng.uniform(0.05, 0.7, size=3), rng.uniform(0.2, 0.95, size=3)
    return c0 + (c1 - c0) * noise[..., None]


def _tile(img: ImageRaster, h: int, w: int) -> np.ndarray:
    d = img.data if img.channels == 3 else np.repeat(img.data, 3, axis=2)
    reps = (-(-h // d.shape[0]), -(-w // d.shape[1]), 1)
    return np.tile(d, reps)[:h, :w].astype(np.float64)


def hsv_jitter(rgb: np.ndarray, rng: np.random.Generator, spec: AugmentSpec) -> np.ndarray:
    """Multiply each HSV channel by ``1 + U(-j, j)`` and clamp to [0, 1]."""
    from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

    factors = 1.0 + rng.uniform(-1, 1, size=3) * np.array([spec.hue_jitter, spec.sat_jitter, spec.val_jitter])
    hsv = rgb_to_hsv(np.clip(rgb, 0, 1)) * factors
    return hsv_to_rgb(np.clip(hsv, 0, 1))


def synthesize(seed: int, h: int, w: int, n_perturbs: int = 4, augment: AugmentSpec | None = None) -> Sample:
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ValueError(f"canvas must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}")
    if not 0 <= n_perturbs <= MAX_PERTURBS:
        raise ValueError(f"n_perturbs must be in [0, {MAX_PERTURBS}], got {n_perturbs}")
    augment = augment or AugmentSpec()
    rng = np.random.default_rng([seed, 0x5EED])

    scale = rng.uniform(0.55, 0.9)
    ph, pw = max(MIN_SIDE, round(scale * h)), max(MIN_SIDE, round(scale * w))
    page = generate_flat_document(seed, ph, pw)
    fx, fy = (w - pw) // 2, (h - ph) // 2

    # source mesh in page coordinates, target mesh on the canvas
    src_mesh = identity_mesh(0, 0, pw - 1, ph - 1)
    slack = 0.5 * (1 - scale)
    offset = np.array([fx + rng.uniform(-slack, slack) * w * 0.5, fy + rng.uniform(-slack, slack) * h * 0.5])
    verts = src_mesh.vertices + offset
    if n_perturbs > 0:
        theta = np.deg2rad(rng.uniform(-15, 15))
        center = offset + np.array([pw - 1, ph - 1]) / 2
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        verts = (verts - center) @ rot.T + center
    mesh = MeshGrid(verts)
    for _ in range(n_perturbs):
        mesh = perturb_mesh(mesh, random_perturb(rng, mesh, min(h, w)), (h, w))

    tris = mesh.triangles()
    src_xy, covered = scan_triangles(mesh.vertices.reshape(-1, 2), src_mesh.vertices.reshape(-1, 2), tris, (h, w))
    # slivers at sharp corners can light up isolated pixel centers; keep the sheet
    labels, n_parts = ndimage.label(covered)
    if n_parts > 1:
        covered = labels == 1 + int(np.argmax(np.bincount(labels.ravel())[1:]))
    colors, _ = sample_bilinear(page.data, src_xy[covered])

    if isinstance(augment.background, ImageRaster):
        bg = _tile(augment.background, h, w)
    else:
        bg_seed = seed if augment.background is None else augment.background
        bg = procedural_background(bg_seed, h, w)
    img = bg.copy()
    img[covered] = colors
    img = hsv_jitter(img, rng, augment)

    rows, cols = np.indices((h, w))
    dx = np.zeros((h, w))
    dy = np.zeros((h, w))
    dx[covered] = fx + src_xy[covered][:, 0] - cols[covered]
    dy[covered] = fy + src_xy[covered][:, 1] - rows[covered]

    flat = np.ones((h, w, 3))
    flat[fy:fy + ph, fx:fx + pw] = page.data
    return Sample(
        distorted=ImageRaster(img, "RGB"),
        gt_flow=FlowField(dx, dy),
        gt_mask=ForegroundMask(covered.astype(np.float32)),
        flat_reference=ImageRaster(flat, "RGB"),
        seed=seed,
    )


@dataclass
class DatasetParams:
    h: int = 128
    w: int = 120
    n_perturbs: int = 4
    hue_jitter: float = 0.05
    sat_jitter: float = 0.2
    val_jitter: float = 0.15
    seeds: list = field(default_factory=list)


def write_dataset(root, seeds, h: int = 128, w: int = 120, n_perturbs: int = 4,
                  augment: AugmentSpec | None = None) -> Path:
    """Write ``<seed>.png``, ``<seed>.dfl``, ``<seed>_flat.png`` and ``manifest.json``."""
    augment = augment or AugmentSpec()
    if isinstance(augment.background, ImageRaster):
        raise ValueError("image backgrounds cannot be recorded in a manifest; pass a seed instead")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    seeds = [int(s) for s in seeds]
    for s in seeds:
        sample = synthesize(s, h, w, n_perturbs, augment)
        save_image(root / f"{s}.png", sample.distorted)
        save_flow(root / f"{s}.dfl", sample.gt_flow, sample.gt_mask)
        save_image(root / f"{s}_flat.png", sample.flat_reference)
    params = DatasetParams(h, w, n_perturbs, augment.hue_jitter, augment.sat_jitter, augment.val_jitter, seeds)
    manifest = asdict(params)
    manifest["background"] = augment.background
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root
