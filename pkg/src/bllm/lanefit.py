"""Classical lane pipeline: grayscale preprocessing, instance extraction
from a label mask, polynomial fitting, and point-wise accuracy scoring.

Lanes are near-vertical in image space, so curves are fit as x = f(y);
accuracy counts a ground-truth sample as correct when the matched curve
passes within tau pixels horizontally.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, FitError, ValidationError

DEFAULT_EDGE_WEIGHT = 0.3
DEFAULT_DEGREE = 2
DEFAULT_TAU = 20.0

_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_SOBEL_Y = _SOBEL_X.T


def _as_gray(img):
    a = np.asarray(img)
    if a.ndim != 2:
        raise ValidationError("image", f"expected 2-D gray image, got {a.shape}")
    return a


def normalize_minmax(img) -> np.ndarray:
    """Stretch to [0, 255]; a constant image is left unchanged."""
    a = _as_gray(img).astype(np.float64)
    lo, hi = a.min(), a.max()
    if hi == lo:
        return _as_gray(img).astype(np.uint8).copy()
    out = (a - lo) * (255.0 / (hi - lo))
    return np.floor(out + 0.5).astype(np.uint8)


def equalize(img) -> np.ndarray:
    """Cumulative-histogram remap: level v maps to floor(255 * cdf(v))."""
    a = _as_gray(img).astype(np.uint8)
    hist = np.bincount(a.reshape(-1), minlength=256)
    cdf = np.cumsum(hist) / a.size
    lut = np.floor(255.0 * cdf).astype(np.uint8)
    return lut[a]


def sobel_magnitude(img) -> np.ndarray:
    """3x3 Sobel gradient magnitude with edge-replicated borders (float)."""
    a = _as_gray(img).astype(np.float64)
    p = np.pad(a, 1, mode="edge")
    gx = np.zeros_like(a)
    gy = np.zeros_like(a)
    for dy in range(3):
        for dx in range(3):
            win = p[dy:dy + a.shape[0], dx:dx + a.shape[1]]
            gx += _SOBEL_X[dy, dx] * win
            gy += _SOBEL_Y[dy, dx] * win
    return np.sqrt(gx * gx + gy * gy)


def preprocess(img, edge_weight=DEFAULT_EDGE_WEIGHT) -> np.ndarray:
    """normalize -> equalize -> additive edge enhancement, clipped to 8 bits."""
    eq = equalize(normalize_minmax(img))
    mag = sobel_magnitude(eq)
    out = np.clip(eq.astype(np.float64) + edge_weight * mag, 0.0, 255.0)
    return np.floor(out + 0.5).astype(np.uint8)


# ---------------------------------------------------------------------------
# Masks and instances
# ---------------------------------------------------------------------------

def validate_mask(mask) -> np.ndarray:
    m = _as_gray(mask)
    labels = np.unique(m)
    top = int(labels.max()) if labels.size else 0
    expected = set(range(1, top + 1))
    present = set(int(v) for v in labels) - {0}
    if present != expected:
        missing = sorted(expected - present)
        raise ValidationError("mask", f"labels not contiguous, missing {missing}")
    return m


def extract_instances(mask):
    """Per label 1..K: one (x, y) sample per image row, x = mean column of
    that label's pixels in the row."""
    m = validate_mask(mask)
    instances = []
    top = int(m.max()) if m.size else 0
    for label in range(1, top + 1):
        rows, cols = np.nonzero(m == label)
        points = []
        for y in np.unique(rows):
            xs = cols[rows == y]
            points.append((float(xs.mean()), float(y)))
        instances.append(points)
    return instances


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LaneCurve:
    degree: int
    coeffs: tuple  # x = sum coeffs[k] * y^k
    y_range: tuple
    rms: float

    def __post_init__(self):
        if self.degree < 1:
            raise ValidationError("degree", "degree must be >= 1")
        if len(self.coeffs) != self.degree + 1:
            raise ValidationError("coeffs",
                                  f"need {self.degree + 1} coefficients")
        if not all(math.isfinite(c) for c in self.coeffs):
            raise ValidationError("coeffs", "non-finite coefficient")

    def x_at(self, y):
        acc = 0.0
        for c in reversed(self.coeffs):
            acc = acc * y + c
        return acc

    def to_dict(self):
        return {"degree": self.degree, "coeffs": list(self.coeffs),
                "y_range": list(self.y_range), "rms": self.rms}

    @classmethod
    def from_dict(cls, doc):
        return cls(degree=doc["degree"], coeffs=tuple(doc["coeffs"]),
                   y_range=tuple(doc["y_range"]), rms=doc["rms"])


def fit_lane(points, degree=DEFAULT_DEGREE) -> LaneCurve:
    """Least-squares x = f(y). Underdetermined input or a rank-deficient
    design matrix (repeated y values) is an error, not a best effort."""
    pts = list(points)
    if len(pts) < degree + 1:
        raise FitError(f"{len(pts)} points cannot determine degree {degree}")
    x = np.array([p[0] for p in pts])
    y = np.array([p[1] for p in pts])
    if np.all(y == y[0]):
        raise FitError("all points share one y value")
    v = np.vander(y, degree + 1, increasing=True)
    coeffs, _, rank, _ = np.linalg.lstsq(v, x, rcond=None)
    if rank < degree + 1:
        raise FitError(f"design matrix rank {rank} < {degree + 1} "
                       f"(need {degree + 1} distinct y values)")
    residual = v @ coeffs - x
    rms = float(np.sqrt(np.mean(residual ** 2)))
    return LaneCurve(degree=degree, coeffs=tuple(float(c) for c in coeffs),
                     y_range=(float(y.min()), float(y.max())), rms=rms)


def fit_mask(mask, degree=DEFAULT_DEGREE):
    return [fit_lane(pts, degree) for pts in extract_instances(mask)]


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

def lane_accuracy(curves, gt_lanes, tau=DEFAULT_TAU) -> float:
    """Greedy lane matching by mean |dx|, then point-wise tau scoring.
    ``gt_lanes`` is a list of (x, y) sample lists; every ground-truth
    sample of an unmatched lane counts as incorrect."""
    total = sum(len(lane) for lane in gt_lanes)
    if total == 0:
        raise ValidationError("gt", "no ground-truth samples")
    costs = []
    for ci, curve in enumerate(curves):
        for gi, lane in enumerate(gt_lanes):
            mean_dx = sum(abs(curve.x_at(y) - x) for x, y in lane) / len(lane)
            costs.append((mean_dx, ci, gi))
    costs.sort()
    used_c, used_g = set(), set()
    correct = 0
    for _, ci, gi in costs:
        if ci in used_c or gi in used_g:
            continue
        used_c.add(ci)
        used_g.add(gi)
        curve = curves[ci]
        correct += sum(1 for x, y in gt_lanes[gi]
                       if abs(curve.x_at(y) - x) <= tau)
    return 100.0 * correct / total


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def write_pgm(path, img):
    a = _as_gray(img).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode("ascii"))
        f.write(a.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    parts = blob.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise DataError(f"{path}: not a raw P5 file")
    try:
        w, h = (int(v) for v in parts[1].split())
        maxval = int(parts[2])
    except ValueError:
        raise DataError(f"{path}: bad PGM header") from None
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    raw = parts[3]
    if len(raw) != w * h:
        raise DataError(f"{path}: payload is {len(raw)} bytes, want {w * h}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()


def save_curves(path, curves):
    doc = {"lanes": [c.to_dict() for c in curves]}
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def load_curves(path):
    with open(path) as f:
        doc = json.load(f)
    return [LaneCurve.from_dict(d) for d in doc["lanes"]]


def load_gt_lanes(path):
    with open(path) as f:
        doc = json.load(f)
    return [[(float(x), float(y)) for x, y in lane["points"]]
            for lane in doc["lanes"]]
