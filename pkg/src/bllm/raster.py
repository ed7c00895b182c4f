"""Top-down rasterization of point clouds and scene annotations.

Determinism is the design constraint throughout: integer Bresenham lines
(no anti-aliasing), nearest-neighbor resize (no blending), half-up
intensity rounding. Identical inputs give bit-identical pixel buffers,
which the golden-image tests rely on.

Pixel convention: world x right maps to image columns left to right,
world y forward maps to rows bottom to top (forward = image up). A world
point lands in the cell whose floor projection it hits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ValidationError

COLOR_MOTORWAY = (255, 255, 0)
COLOR_BICYCLE = (255, 165, 0)
COLOR_OTHER = (255, 255, 255)
COLOR_CROSS_SECTION = (0, 0, 255)

LANE_COLORS = {
    "motorway": COLOR_MOTORWAY,
    "bicycle": COLOR_BICYCLE,
    "other": COLOR_OTHER,
}

DEFAULT_LINE_WIDTH = 2


@dataclass(frozen=True)
class Viewport:
    """World window in meters plus rendering density."""

    x_range: tuple = (-25.0, 25.0)
    y_range: tuple = (0.0, 100.0)
    pixels_per_meter: float = 8.96

    def __post_init__(self):
        if self.x_range[0] >= self.x_range[1] or self.y_range[0] >= self.y_range[1]:
            raise ValidationError("viewport", "empty range")
        if self.pixels_per_meter <= 0:
            raise ValidationError("viewport", "pixels_per_meter must be positive")

    @property
    def width(self):
        return int(round((self.x_range[1] - self.x_range[0]) * self.pixels_per_meter))

    @property
    def height(self):
        return int(round((self.y_range[1] - self.y_range[0]) * self.pixels_per_meter))

    def to_pixel(self, x, y):
        """Continuous pixel coordinates; the containing cell is the floor."""
        px = (x - self.x_range[0]) * self.width / (self.x_range[1] - self.x_range[0])
        py = (self.y_range[1] - y) * self.height / (self.y_range[1] - self.y_range[0])
        return px, py


@dataclass
class BevImage:
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) uint8
    viewport: Viewport = field(default_factory=Viewport)

    @classmethod
    def blank(cls, viewport=None):
        vp = viewport or Viewport()
        return cls(width=vp.width, height=vp.height,
                   pixels=np.zeros((vp.height, vp.width, 3), dtype=np.uint8),
                   viewport=vp)

    @property
    def buffer(self):
        return self.pixels.tobytes()


def rasterize_points(points, viewport=None) -> BevImage:
    """Project (x, y, z, intensity) points; each cell keeps the max
    intensity it receives, scaled to gray = floor(255*v + 0.5)."""
    img = BevImage.blank(viewport)
    vp = img.viewport
    if len(points) == 0:
        return img
    pts = np.asarray(points, dtype=np.float64)
    x, y, inten = pts[:, 0], pts[:, 1], pts[:, 3]
    px = (x - vp.x_range[0]) * img.width / (vp.x_range[1] - vp.x_range[0])
    py = (vp.y_range[1] - y) * img.height / (vp.y_range[1] - vp.y_range[0])
    col = np.floor(px).astype(np.int64)
    row = np.floor(py).astype(np.int64)
    keep = (col >= 0) & (col < img.width) & (row >= 0) & (row < img.height)
    col, row, inten = col[keep], row[keep], inten[keep]
    acc = np.zeros((img.height, img.width))
    np.maximum.at(acc, (row, col), inten)
    gray = np.floor(acc * 255.0 + 0.5).astype(np.uint8)
    img.pixels[:] = gray[:, :, None]
    return img


def _clip_segment(x0, y0, x1, y1, w, h):
    """Liang-Barsky clip against [0, w) x [0, h); None when fully outside."""
    eps = 1e-9
    dx, dy = x1 - x0, y1 - y0
    t0, t1 = 0.0, 1.0
    for p, q in ((-dx, x0 - 0.0), (dx, (w - eps) - x0),
                 (-dy, y0 - 0.0), (dy, (h - eps) - y0)):
        if p == 0.0:
            if q < 0.0:
                return None
            continue
        t = q / p
        if p < 0.0:
            if t > t1:
                return None
            t0 = max(t0, t)
        else:
            if t < t0:
                return None
            t1 = min(t1, t)
    return (x0 + t0 * dx, y0 + t0 * dy, x0 + t1 * dx, y0 + t1 * dy)


def _stamp(pixels, col, row, color, width, x_major):
    h, w = pixels.shape[:2]
    lo = -((width - 1) // 2)
    hi = width // 2 + 1
    for off in range(lo, hi):
        c, r = (col, row + off) if x_major else (col + off, row)
        if 0 <= c < w and 0 <= r < h:
            pixels[r, c] = color


def draw_segment(img: BevImage, p0, p1, color, width=DEFAULT_LINE_WIDTH):
    """Integer Bresenham between the projected endpoints, thickness applied
    perpendicular to the dominant axis."""
    x0, y0 = img.viewport.to_pixel(*p0)
    x1, y1 = img.viewport.to_pixel(*p1)
    clipped = _clip_segment(x0, y0, x1, y1, img.width, img.height)
    if clipped is None:
        return img
    c0, r0 = int(math.floor(clipped[0])), int(math.floor(clipped[1]))
    c1, r1 = int(math.floor(clipped[2])), int(math.floor(clipped[3]))
    dc, dr = abs(c1 - c0), abs(r1 - r0)
    sc = 1 if c1 >= c0 else -1
    sr = 1 if r1 >= r0 else -1
    x_major = dc >= dr
    err = (dc if x_major else dr) // 2
    c, r = c0, r0
    while True:
        _stamp(img.pixels, c, r, color, width, x_major)
        if c == c1 and r == r1:
            break
        if x_major:
            err -= dr
            if err < 0:
                r += sr
                err += dc
            c += sc
        else:
            err -= dc
            if err < 0:
                c += sc
                err += dr
            r += sr
    return img


def draw_polyline(img: BevImage, line, width=DEFAULT_LINE_WIDTH) -> BevImage:
    color = LANE_COLORS[line.lane_type]
    for p0, p1 in zip(line.points, line.points[1:]):
        draw_segment(img, p0, p1, color, width)
    return img


def draw_cross_section(img: BevImage, cs, width=DEFAULT_LINE_WIDTH) -> BevImage:
    v = cs.vertices
    for i in range(4):
        draw_segment(img, v[i], v[(i + 1) % 4], COLOR_CROSS_SECTION, width)
    return img


def resize_nearest(img: BevImage, w: int, h: int) -> BevImage:
    """Nearest-neighbor resample, src index = dst index * src // dst."""
    if w <= 0 or h <= 0:
        raise ValidationError("size", "target size must be positive")
    rows = np.arange(h, dtype=np.int64) * img.height // h
    cols = np.arange(w, dtype=np.int64) * img.width // w
    return BevImage(width=w, height=h,
                    pixels=img.pixels[rows][:, cols].copy(),
                    viewport=img.viewport)


def render_scene(scene, points=(), viewport=None, size=448,
                 line_width=DEFAULT_LINE_WIDTH) -> BevImage:
    """Full frame: point background, then lanes, then cross-sections,
    then resize to size x size. Later layers overwrite earlier ones."""
    img = rasterize_points(points, viewport)
    for lane in scene.lanes:
        draw_polyline(img, lane, line_width)
    for cs in scene.cross_sections:
        draw_cross_section(img, cs, line_width)
    if size is not None and (img.width, img.height) != (size, size):
        img = resize_nearest(img, size, size)
    return img


# ---------------------------------------------------------------------------
# Image files
# ---------------------------------------------------------------------------

def write_ppm(path, img: BevImage):
    with open(path, "wb") as f:
        f.write(f"P6\n{img.width} {img.height}\n255\n".encode("ascii"))
        f.write(img.buffer)


def read_ppm(path) -> BevImage:
    with open(path, "rb") as f:
        blob = f.read()
    parts = blob.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise DataError(f"{path}: not a raw P6 file")
    try:
        w, h = (int(v) for v in parts[1].split())
        maxval = int(parts[2])
    except ValueError:
        raise DataError(f"{path}: bad PPM header") from None
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    raw = parts[3]
    if len(raw) != 3 * w * h:
        raise DataError(f"{path}: payload is {len(raw)} bytes, want {3 * w * h}")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).copy()
    return BevImage(width=w, height=h, pixels=pixels)


def write_png(path, img: BevImage):
    from PIL import Image

    Image.fromarray(img.pixels, mode="RGB").save(path, format="PNG")


def color_purity_violations(img: BevImage):
    """(row, col) of pixels neither grayscale nor a role color."""
    px = img.pixels.astype(np.int16)
    ok = (px[:, :, 0] == px[:, :, 1]) & (px[:, :, 1] == px[:, :, 2])
    for color in (COLOR_MOTORWAY, COLOR_BICYCLE, COLOR_CROSS_SECTION):
        ok = ok | np.all(px == np.array(color, dtype=np.int16), axis=2)
    return [tuple(rc) for rc in np.argwhere(~ok)]
