"""Canny edge detection and simple threshold edge detectors.

Images are 2-D numpy arrays indexed ``[row, col]``. Gradient components follow
the Sobel kernels below under cross-correlation, so ``gx`` grows with
intensity to the right and ``gy`` grows with intensity *upwards* (towards
smaller row index).

Border policy: blur and gradient kernels see edge-replicated borders; the
suppression and hysteresis stages never mark the outermost pixel ring.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DimensionError

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = np.array([[1, 2, 1], [0, 0, 0], [-1, -2, -1]], dtype=np.float64)
PREWITT_X = np.array([[-1, 0, 1], [-1, 0, 1], [-1, 0, 1]], dtype=np.float64)
PREWITT_Y = np.array([[1, 1, 1], [0, 0, 0], [-1, -1, -1]], dtype=np.float64)
ROBERTS_A = np.array([[1, 0], [0, -1]], dtype=np.float64)
ROBERTS_B = np.array([[0, 1], [-1, 0]], dtype=np.float64)

OPERATORS = ("sobel", "prewitt", "roberts")

DEFAULT_SIGMA = 1.4
DEFAULT_RADIUS = 2
DEFAULT_LOW_FRAC = 0.1
DEFAULT_HIGH_FRAC = 0.2


@dataclass(frozen=True)
class GaussianSpec:
    sigma: float = DEFAULT_SIGMA
    radius: int = DEFAULT_RADIUS

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be > 0, got {self.sigma}")
        if self.radius < 0:
            raise ConfigError(f"radius must be >= 0, got {self.radius}")

    @property
    def side(self) -> int:
        return 2 * self.radius + 1


@dataclass(frozen=True)
class HysteresisThresholds:
    """Magnitude thresholds. With ``relative=True`` they are fractions of the
    image's maximum gradient magnitude and get resolved by :func:`canny`."""

    low: float = DEFAULT_LOW_FRAC
    high: float = DEFAULT_HIGH_FRAC
    relative: bool = True

    def __post_init__(self):
        if self.low < 0 or self.low > self.high:
            raise ConfigError(f"need 0 <= low <= high, got low={self.low}, high={self.high}")

    def resolve(self, max_magnitude: float) -> "HysteresisThresholds":
        if not self.relative:
            return self
        return HysteresisThresholds(self.low * max_magnitude, self.high * max_magnitude, relative=False)


@dataclass
class GradField:
    gx: np.ndarray
    gy: np.ndarray
    mag: np.ndarray


class NmsSample(NamedTuple):
    t: float
    g_up: float
    g_down: float


def validate_image8(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2:
        raise DimensionError(f"expected a 2-D grayscale image, got shape {img.shape}")
    if img.dtype != np.uint8:
        if img.size and (img.min() < 0 or img.max() > 255):
            raise ConfigError("8-bit image values must lie in [0, 255]")
        img = img.astype(np.uint8)
    return img


def gaussian_kernel(spec: GaussianSpec) -> np.ndarray:
    """Sampled 2-D Gaussian on integer offsets, normalized to unit sum."""
    r, s2 = spec.radius, spec.sigma * spec.sigma
    raw = [
        [math.exp(-(x * x + y * y) / (2.0 * s2)) / (2.0 * math.pi * s2) for x in range(-r, r + 1)]
        for y in range(-r, r + 1)
    ]
    total = math.fsum(v for row in raw for v in row)
    return np.array([[v / total for v in row] for row in raw], dtype=np.float64)


def _correlate_replicate(img: np.ndarray, kernel: np.ndarray, pad_before: int, pad_after: int) -> np.ndarray:
    # taps accumulated in row-major kernel order; keeps results bit-reproducible
    h, w = img.shape
    p = np.pad(img, ((pad_before, pad_after), (pad_before, pad_after)), mode="edge")
    kh, kw = kernel.shape
    out = np.zeros((h, w), dtype=np.float64)
    for dy in range(kh):
        for dx in range(kw):
            out += kernel[dy, dx] * p[dy:dy + h, dx:dx + w]
    return out


def gaussian_blur(img: np.ndarray, spec: GaussianSpec) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < spec.side:
        raise DimensionError(f"image {img.shape} smaller than {spec.side}x{spec.side} kernel")
    return _correlate_replicate(img, gaussian_kernel(spec), spec.radius, spec.radius)


def _gradients(img: np.ndarray, kx: np.ndarray, ky: np.ndarray) -> GradField:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 3:
        raise DimensionError(f"gradient operators need at least a 3x3 image, got {img.shape}")
    if kx.shape[0] == 2:
        gx = _correlate_replicate(img, kx, 0, 1)
        gy = _correlate_replicate(img, ky, 0, 1)
    else:
        gx = _correlate_replicate(img, kx, 1, 1)
        gy = _correlate_replicate(img, ky, 1, 1)
    return GradField(gx, gy, np.sqrt(gx * gx + gy * gy))


def sobel_gradients(img: np.ndarray) -> GradField:
    return _gradients(img, SOBEL_X, SOBEL_Y)


def _neighbour_offsets(gx: float, gy: float):
    """(t, primary (dr, dc), diagonal (dr, dc)) for the gradient's octant.

    The gradient points along (col +gx, row -gy). The primary neighbour lies on
    the dominant axis, the diagonal one on the side of the minor component.
    """
    sc = 1 if gx >= 0 else -1
    sr = -1 if gy >= 0 else 1
    if abs(gx) >= abs(gy):
        return abs(gy) / abs(gx), (0, sc), (sr, sc)
    return abs(gx) / abs(gy), (sr, 0), (sr, sc)


def nms_sample(grad: GradField, i: int, j: int) -> NmsSample:
    """Interpolated comparison magnitudes for interior pixel (i, j)."""
    gx, gy, mag = float(grad.gx[i, j]), float(grad.gy[i, j]), grad.mag
    if gx == 0.0 and gy == 0.0:
        return NmsSample(0.0, 0.0, 0.0)
    t, (pr, pc), (dr, dc) = _neighbour_offsets(gx, gy)
    up = (1.0 - t) * mag[i + pr, j + pc] + t * mag[i + dr, j + dc]
    down = (1.0 - t) * mag[i - pr, j - pc] + t * mag[i - dr, j - dc]
    return NmsSample(t, float(up), float(down))


def nms(grad: GradField) -> np.ndarray:
    """Zero every pixel that is not a maximum along its gradient direction.

    Ties (magnitude equal to an interpolated neighbour) are retained.
    """
    gx, gy, mag = grad.gx, grad.gy, grad.mag
    h, w = mag.shape
    out = np.zeros_like(mag)
    if h < 3 or w < 3:
        return out
    cx, cy, cm = gx[1:-1, 1:-1], gy[1:-1, 1:-1], mag[1:-1, 1:-1]
    ax, ay = np.abs(cx), np.abs(cy)
    x_major = ax >= ay
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        t = np.where(x_major, ay / ax, ax / ay)
    t = np.nan_to_num(t, nan=0.0)
    sc = np.where(cx >= 0, 1, -1)
    sr = np.where(cy >= 0, -1, 1)
    pr = np.where(x_major, 0, sr)
    pc = np.where(x_major, sc, 0)

    ii, jj = np.mgrid[1:h - 1, 1:w - 1]
    up = (1.0 - t) * mag[ii + pr, jj + pc] + t * mag[ii + sr, jj + sc]
    down = (1.0 - t) * mag[ii - pr, jj - pc] + t * mag[ii - sr, jj - sc]
    keep = (cm > 0) & (cm >= up) & (cm >= down)
    out[1:-1, 1:-1] = np.where(keep, cm, 0.0)
    return out


def hysteresis(suppressed: np.ndarray, th: HysteresisThresholds) -> np.ndarray:
    """Strong pixels (k > high) plus weak ones (low <= k <= high) 8-connected to them."""
    if th.relative:
        raise ConfigError("hysteresis needs absolute thresholds; call HysteresisThresholds.resolve first")
    if th.low > th.high:
        raise ConfigError(f"low {th.low} > high {th.high}")
    candidate = (suppressed > 0) & (suppressed >= th.low)
    strong = candidate & (suppressed > th.high)
    labels, count = ndimage.label(candidate, structure=np.ones((3, 3), dtype=bool))
    if count == 0:
        return np.zeros(suppressed.shape, dtype=np.uint8)
    seeded = np.zeros(count + 1, dtype=bool)
    seeded[np.unique(labels[strong])] = True
    seeded[0] = False
    return seeded[labels].astype(np.uint8)


def canny(img: np.ndarray, spec: GaussianSpec = GaussianSpec(), th: HysteresisThresholds = HysteresisThresholds()) -> np.ndarray:
    """Blur, Sobel gradients, suppression, hysteresis. Returns a {0,1} uint8 map."""
    img = validate_image8(img)
    grad = sobel_gradients(gaussian_blur(img, spec))
    resolved = th.resolve(float(grad.mag.max()))
    return hysteresis(nms(grad), resolved)


def threshold_detector(img: np.ndarray, operator: str = "sobel", tfrac: float = 0.2) -> np.ndarray:
    """Pixels whose gradient magnitude exceeds ``tfrac`` times the image maximum."""
    if not 0 < tfrac < 1:
        raise ConfigError(f"tfrac must lie in (0, 1), got {tfrac}")
    img = validate_image8(img)
    if operator == "sobel":
        grad = _gradients(img, SOBEL_X, SOBEL_Y)
    elif operator == "prewitt":
        grad = _gradients(img, PREWITT_X, PREWITT_Y)
    elif operator == "roberts":
        grad = _gradients(img, ROBERTS_A, ROBERTS_B)
    else:
        raise ConfigError(f"unknown operator {operator!r}; expected one of {OPERATORS}")
    return (grad.mag > tfrac * grad.mag.max()).astype(np.uint8)


def detect(img: np.ndarray, operator: str = "canny", spec: GaussianSpec = GaussianSpec(),
           th: HysteresisThresholds = HysteresisThresholds(), tfrac: float = 0.2) -> np.ndarray:
    """Dispatch on operator name; used by data loading and the CLI."""
    if operator == "canny":
        return canny(img, spec, th)
    return threshold_detector(img, operator, tfrac)

