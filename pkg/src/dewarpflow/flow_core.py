"""Shared data model: images, displacement flows, foreground masks, samples.

Conventions used throughout the package:

* pixel ``(row, col)`` has its center at continuous coordinate ``(x=col, y=row)``;
* ``dx`` is the column offset (positive = rightward), ``dy`` the row offset
  (positive = downward), both in pixels of the distorted-image grid;
* ``p + (dx, dy)(p)`` is where distorted pixel ``p`` lands in the flat page.

Arrays are stored as float32 and frozen (read-only) after construction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

__all__ = [
    "ImageRaster",
    "FlowField",
    "ForegroundMask",
    "Sample",
    "Violation",
    "FlowFormatError",
    "validate_sample",
    "resize_bilinear",
    "scale_flow",
    "save_flow",
    "load_flow",
    "load_image",
    "save_image",
    "to_gray",
]

COLOR_SPACES = ("RGB", "HSV", "GRAY")
FLOW_MAGIC = b"DFL1"
_HEADER = struct.Struct("<4sII")
# refuse headers that would describe more than 2**28 pixels (3 GiB of payload)
_MAX_PIXELS = 1 << 28


def _frozen(arr, dtype=np.float32):
    out = np.array(arr, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class ImageRaster:
    """H x W x C image with values in [0, 1]."""

    data: np.ndarray
    color_space: str = "RGB"

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ValueError(f"image data must be HxW, HxWx1 or HxWx3, got {data.shape}")
        if self.color_space not in COLOR_SPACES:
            raise ValueError(f"unknown color space {self.color_space!r}")
        if (self.color_space == "GRAY") != (data.shape[2] == 1):
            raise ValueError(f"{self.color_space} image with {data.shape[2]} channels")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]


@dataclass(frozen=True)
class FlowField:
    """Per-pixel displacement (dx, dy) in pixels."""

    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        dx, dy = np.asarray(self.dx), np.asarray(self.dy)
        if dx.ndim != 2 or dx.shape != dy.shape:
            raise ValueError(f"dx/dy must be matching 2-D arrays, got {dx.shape} and {dy.shape}")
        object.__setattr__(self, "dx", _frozen(dx))
        object.__setattr__(self, "dy", _frozen(dy))

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width)), np.zeros((height, width)))

    @classmethod
    def from_array(cls, arr) -> "FlowField":
        """Build from a 2 x H x W array (channel 0 = dx)."""
        arr = np.asarray(arr)
        return cls(arr[0], arr[1])

    def as_array(self, dtype=np.float64) -> np.ndarray:
        return np.stack([self.dx, self.dy]).astype(dtype)

    @property
    def height(self) -> int:
        return self.dx.shape[0]

    @property
    def width(self) -> int:
        return self.dx.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.dx.shape


@dataclass(frozen=True)
class ForegroundMask:
    """Foreground probability (predictions) or label (ground truth) per pixel."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {values.shape}")
        object.__setattr__(self, "values", _frozen(values))

    @classmethod
    def full(cls, height: int, width: int, value: float = 1.0) -> "ForegroundMask":
        return cls(np.full((height, width), value))

    def binary(self) -> np.ndarray:
        return self.values >= 0.5

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class Sample:
    distorted: ImageRaster
    gt_flow: FlowField
    gt_mask: ForegroundMask
    flat_reference: ImageRaster
    seed: int = 0


class Violation(NamedTuple):
    invariant: str
    index: tuple | None
    detail: str = ""

    def __str__(self):
        where = "" if self.index is None else f" at {self.index}"
        return f"{self.invariant}{where}: {self.detail}" if self.detail else f"{self.invariant}{where}"


class FlowFormatError(ValueError):
    """Malformed ``.dfl`` payload; ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def _first(bad: np.ndarray):
    idx = np.argwhere(bad)
    return tuple(int(i) for i in idx[0]) if len(idx) else None


def validate_sample(s: Sample) -> list[Violation]:
    """Check every type invariant of a sample; never raises."""
    out: list[Violation] = []
    for name, img in (("distorted", s.distorted), ("flat_reference", s.flat_reference)):
        bad = ~np.isfinite(img.data) | (img.data < 0) | (img.data > 1)
        if bad.any():
            out.append(Violation(f"{name} values in [0,1]", _first(bad)))

    shapes = {"distorted": s.distorted.shape, "gt_flow": s.gt_flow.shape, "gt_mask": s.gt_mask.shape}
    if len(set(shapes.values())) > 1:
        out.append(Violation("shared spatial dimensions", None, repr(shapes)))

    finite = np.isfinite(s.gt_flow.dx) & np.isfinite(s.gt_flow.dy)
    if not finite.all():
        out.append(Violation("finite entries", _first(~finite)))

    m = s.gt_mask.values
    bad = ~((m == 0) | (m == 1))
    if bad.any():
        out.append(Violation("binary ground-truth mask", _first(bad)))

    if s.gt_flow.shape == s.gt_mask.shape:
        h, w = s.flat_reference.shape
        rows, cols = np.indices(s.gt_flow.shape)
        with np.errstate(invalid="ignore"):
            tx = cols + s.gt_flow.dx.astype(np.float64)
            ty = rows + s.gt_flow.dy.astype(np.float64)
            outside = (tx < -0.5) | (tx > w - 0.5) | (ty < -0.5) | (ty > h - 0.5)
        outside &= (m == 1) & finite
        if outside.any():
            out.append(Violation("foreground flow maps inside flat_reference", _first(outside)))
    return out


def _axis_weights(n_out: int, n_in: int, scale: float):
    # half-pixel-center mapping, clamped at the borders
    src = (np.arange(n_out) + 0.5) / scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the two leading axes (half-pixel centers, edge clamp)."""
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape[:2]
    if (out_h, out_w) == (h, w):
        return arr.copy()
    r0, r1, fr = _axis_weights(out_h, h, out_h / h)
    c0, c1, fc = _axis_weights(out_w, w, out_w / w)
    extra = (None,) * (arr.ndim - 2)
    fr = fr[(slice(None), None) + extra]
    fc = fc[(None, slice(None)) + extra]
    top = arr[r0][:, c0] * (1 - fc) + arr[r0][:, c1] * fc
    bot = arr[r1][:, c0] * (1 - fc) + arr[r1][:, c1] * fc
    return top * (1 - fr) + bot * fr


def scale_flow(flow: FlowField, mask: ForegroundMask, lam: float) -> tuple[FlowField, ForegroundMask]:
    """Resample a flow/mask pair to ``round(lam*H) x round(lam*W)``.

    The mask is resampled and re-binarized at 0.5.  Displacements are
    resampled with mask-normalized bilinear weights, so background zeros do
    not pull page-edge vectors toward zero, then multiplied by ``lam``.
    ``lam == 1`` returns the inputs.
    """
    if not lam > 0:
        raise ValueError(f"scale factor must be positive, got {lam}")
    if lam == 1:
        return flow, mask
    h, w = flow.shape
    oh, ow = max(1, round(lam * h)), max(1, round(lam * w))
    mv = np.asarray(mask.values, dtype=np.float64)
    weight = resize_bilinear(mv, oh, ow)
    keep = weight >= 0.5
    safe = np.where(keep, weight, 1.0)
    dx = np.where(keep, resize_bilinear(flow.dx * mv, oh, ow) / safe, 0.0) * lam
    dy = np.where(keep, resize_bilinear(flow.dy * mv, oh, ow) / safe, 0.0) * lam
    return FlowField(dx, dy), ForegroundMask(keep.astype(np.float32))


def save_flow(path, flow: FlowField, mask: ForegroundMask | None = None) -> None:
    if mask is None:
        mask = ForegroundMask.full(*flow.shape)
    if mask.shape != flow.shape:
        raise ValueError(f"mask shape {mask.shape} != flow shape {flow.shape}")
    h, w = flow.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(FLOW_MAGIC, h, w))
        for arr in (flow.dx, flow.dy, mask.values):
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_flow(path) -> tuple[FlowField, ForegroundMask]:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FlowFormatError("truncated header", len(buf))
    magic, h, w = _HEADER.unpack_from(buf)
    if magic != FLOW_MAGIC:
        raise FlowFormatError(f"bad magic {magic!r}", 0)
    if h == 0 or w == 0 or h * w > _MAX_PIXELS:
        raise FlowFormatError(f"unsupported dimensions {h}x{w}", 4)
    plane = 4 * h * w
    expected = _HEADER.size + 3 * plane
    if len(buf) < expected:
        raise FlowFormatError(f"truncated payload, expected {expected} bytes", len(buf))
    if len(buf) > expected:
        raise FlowFormatError("trailing bytes after payload", expected)
    planes = [
        np.frombuffer(buf, dtype="<f4", count=h * w, offset=_HEADER.size + k * plane).reshape(h, w)
        for k in range(3)
    ]
    return FlowField(planes[0], planes[1]), ForegroundMask(planes[2])


def to_gray(img: ImageRaster) -> np.ndarray:
    """Rec. 601 luma as a float64 H x W array."""
    d = img.data.astype(np.float64)
    if img.channels == 1:
        return d[:, :, 0]
    if img.color_space == "HSV":
        from matplotlib.colors import hsv_to_rgb

        d = hsv_to_rgb(d)
    return d @ np.array([0.299, 0.587, 0.114])


def load_image(path, background: float = 1.0) -> ImageRaster:
    """Load an 8-bit PNG; an alpha channel is composited onto ``background``."""
    from PIL import Image

    with Image.open(path) as im:
        if im.mode in ("L", "I", "I;16"):
            return ImageRaster(np.asarray(im.convert("L"), dtype=np.float32) / 255.0, "GRAY")
        arr = np.asarray(im.convert("RGBA"), dtype=np.float32) / 255.0
    rgb, alpha = arr[:, :, :3], arr[:, :, 3:]
    return ImageRaster(rgb * alpha + background * (1 - alpha), "RGB")


def save_image(path, img: ImageRaster, alpha: np.ndarray | None = None) -> None:
    from PIL import Image

    data = img.data
    if img.color_space == "HSV":
        from matplotlib.colors import hsv_to_rgb

        data = hsv_to_rgb(data)
    u8 = np.round(np.clip(data, 0, 1) * 255).astype(np.uint8)
    if u8.shape[2] == 1:
        u8 = np.repeat(u8, 3, axis=2) if alpha is not None else u8[:, :, 0]
    if alpha is not None:
        a = np.round(np.clip(alpha, 0, 1) * 255).astype(np.uint8)
        u8 = np.dstack([u8, a])
    Image.fromarray(u8).save(path, format="PNG")
