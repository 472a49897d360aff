"""Preprocessing and augmentation.

Preprocessing flattens each scan by a quadratic layer contour (given or
estimated from the brightest row per column) and keeps intensities in [0, 1].
Two augmentation policies are provided: the SSL pair policy built around a
large-area random resized crop, and a light supervised policy (translate,
rotate, flip). Plus crop-histogram diagnostics.

All randomness comes from caller-provided generators; every operation is a
deterministic function of (input, seed).
"""

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from tinc import imageio
from tinc.errors import InfeasibleCropError, ValidationError

DEFAULT_ASPECT_RANGE = (3.0 / 4.0, 4.0 / 3.0)
SSL_AREA_RANGE = (0.4, 0.8)
_CROP_ATTEMPTS = 10


@dataclass(frozen=True)
class AugmentPolicy:
    mode: str
    target_size: tuple
    crop_area_range: tuple = SSL_AREA_RANGE
    aspect_range: tuple = DEFAULT_ASPECT_RANGE
    max_rotation_deg: float = 10.0
    max_translation_frac: float = 0.1
    hflip_prob: float = 0.5
    jitter: float = 0.2
    noise_std: float = 0.0

    def validate(self):
        if self.mode not in ("ssl", "supervised"):
            raise ValidationError(f"mode must be ssl or supervised, got {self.mode!r}")
        lo, hi = self.crop_area_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValidationError(
                f"crop_area_range must satisfy 0 < lo <= hi <= 1, got {(lo, hi)}")
        alo, ahi = self.aspect_range
        if not (0.0 < alo <= ahi):
            raise ValidationError(f"bad aspect_range {(alo, ahi)}")
        if not (0.0 <= self.hflip_prob <= 1.0):
            raise ValidationError(f"hflip_prob must be in [0,1], got {self.hflip_prob}")
        if self.noise_std < 0:
            raise ValidationError(f"noise_std must be >= 0, got {self.noise_std}")
        return self


def ssl_policy(target_size, **overrides):
    return replace(AugmentPolicy(mode="ssl", target_size=tuple(target_size)),
                   **overrides).validate()


def supervised_policy(target_size, **overrides):
    return replace(AugmentPolicy(mode="supervised", target_size=tuple(target_size)),
                   **overrides).validate()


def _check_image(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValidationError(f"image must be 2-d, got shape {image.shape}")
    return image


# ---------------------------------------------------------------------------
# Flattening
# ---------------------------------------------------------------------------

def contour_values(contour, width):
    a, b, c = contour
    xs = np.arange(width, dtype=np.float64)
    return a * xs * xs + b * xs + c


def flatten(image, contour):
    """Shift each column so the quadratic contour becomes a horizontal line.

    Column x moves up by round(contour(x) - c0), c0 the contour value at the
    center column; vacated rows are padded with the nearest remaining row.
    """
    image = _check_image(image)
    h, w = image.shape
    yc = contour_values(contour, w)
    c0 = yc[w // 2]
    shifts = np.round(yc - c0).astype(np.int64)
    if np.any(np.abs(shifts) >= h):
        worst = int(np.abs(shifts).max())
        raise ValidationError(f"contour out of range: column shift {worst} "
                              f"exceeds image height {h}")
    rows = np.clip(np.arange(h)[:, None] + shifts[None, :], 0, h - 1)
    return image[rows, np.arange(w)[None, :]]


def fit_quadratic(points):
    """Least-squares (a, b, c) for y = a x^2 + b x + c."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
        raise ValidationError(f"need >= 3 (x, y) points, got shape {pts.shape}")
    xs, ys = pts[:, 0], pts[:, 1]
    if np.unique(xs).size < 3:
        raise ValidationError("quadratic fit needs >= 3 distinct x values")
    design = np.stack([xs * xs, xs, np.ones_like(xs)], axis=1)
    coef, *_ = np.linalg.lstsq(design, ys, rcond=None)
    return float(coef[0]), float(coef[1]), float(coef[2])


def trace_brightest_row(image):
    """(x, y) of the brightest row per column; the layer-trace substitute."""
    image = _check_image(image)
    ys = np.argmax(image, axis=0)
    return np.stack([np.arange(image.shape[1], dtype=np.float64),
                     ys.astype(np.float64)], axis=1)


def estimate_contour(image):
    return fit_quadratic(trace_brightest_row(image))


# ---------------------------------------------------------------------------
# Geometric primitives (bilinear, edge padding)
# ---------------------------------------------------------------------------

def _bilinear_gather(image, ys, xs):
    h, w = image.shape
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = ys - y0
    wx = xs - x0
    top = image[y0, x0] * (1 - wx) + image[y0, x1] * wx
    bot = image[y1, x0] * (1 - wx) + image[y1, x1] * wx
    return top * (1 - wy) + bot * wy


def resize(image, target_size):
    """Bilinear resize with half-pixel center alignment."""
    image = _check_image(image)
    h, w = image.shape
    th, tw = target_size
    if th < 1 or tw < 1:
        raise ValidationError(f"target size must be positive, got {(th, tw)}")
    if (th, tw) == (h, w):
        return image.copy()
    ys = (np.arange(th, dtype=np.float64)[:, None] + 0.5) * (h / th) - 0.5
    xs = (np.arange(tw, dtype=np.float64)[None, :] + 0.5) * (w / tw) - 0.5
    return _bilinear_gather(image, np.broadcast_to(ys, (th, tw)),
                            np.broadcast_to(xs, (th, tw)))


def rotate(image, degrees):
    """Rotate about the image center, bilinear, edge padded."""
    image = _check_image(image)
    if degrees == 0.0:
        return image.copy()
    h, w = image.shape
    theta = np.deg2rad(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yo = np.arange(h, dtype=np.float64)[:, None] - cy
    xo = np.arange(w, dtype=np.float64)[None, :] - cx
    cos, sin = np.cos(theta), np.sin(theta)
    ys = cos * yo - sin * xo + cy
    xs = sin * yo + cos * xo + cx
    return _bilinear_gather(image, ys, xs)


def translate(image, dy, dx):
    """Shift content by (dy, dx) pixels, bilinear, edge padded."""
    image = _check_image(image)
    h, w = image.shape
    ys = np.arange(h, dtype=np.float64)[:, None] - dy
    xs = np.arange(w, dtype=np.float64)[None, :] - dx
    return _bilinear_gather(image, np.broadcast_to(ys, (h, w)),
                            np.broadcast_to(xs, (h, w)))


def hflip(image):
    return _check_image(image)[:, ::-1].copy()


# ---------------------------------------------------------------------------
# Random resized crop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CropMeta:
    area_ratio: float
    rect: tuple


def _fallback_rect(h, w, area_range, aspect_range):
    """Centered rectangle of maximum in-range area, or InfeasibleCropError."""
    lo, hi = area_range
    alo, ahi = aspect_range
    best = None
    for ch in range(1, h + 1):
        cw_min = max(1, int(np.ceil(ch * alo)), int(np.ceil(lo * h * w / ch)))
        cw_max = min(w, int(np.floor(ch * ahi)), int(np.floor(hi * h * w / ch)))
        if cw_min > cw_max:
            continue
        area = ch * cw_max
        if best is None or area > best[0]:
            best = (area, ch, cw_max)
    if best is None:
        raise InfeasibleCropError(
            f"no feasible crop of {h}x{w} with area in {area_range} "
            f"and aspect in {aspect_range}")
    _, ch, cw = best
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def random_resized_crop(image, area_range, aspect_range, target_size, rng):
    """Crop a random rectangle and resize; realized area ratio stays in range.

    Samples the area ratio uniformly and the aspect log-uniformly, retrying
    up to 10 times when rounding pushes the rectangle outside the image or
    the range, then falls back to a centered crop of the largest in-range
    area. Returns (image, CropMeta).
    """
    image = _check_image(image)
    h, w = image.shape
    lo, hi = area_range
    if not (0.0 < lo <= hi <= 1.0):
        raise ValidationError(f"area_range must be within (0, 1], got {area_range}")
    rect = None
    for _ in range(_CROP_ATTEMPTS):
        ratio = rng.uniform(lo, hi)
        log_a = rng.uniform(np.log(aspect_range[0]), np.log(aspect_range[1]))
        aspect = np.exp(log_a)
        area = ratio * h * w
        ch = int(round(np.sqrt(area / aspect)))
        cw = int(round(np.sqrt(area * aspect)))
        if ch < 1 or cw < 1 or ch > h or cw > w:
            continue
        if not (lo <= ch * cw / (h * w) <= hi):
            continue
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        rect = (top, left, ch, cw)
        break
    if rect is None:
        rect = _fallback_rect(h, w, area_range, aspect_range)
    top, left, ch, cw = rect
    crop = image[top:top + ch, left:left + cw]
    meta = CropMeta(area_ratio=ch * cw / (h * w), rect=rect)
    return resize(crop, target_size), meta


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------

def ssl_augment(image, rng, policy=None):
    """Crop (large area), flip, brightness/contrast jitter, then optional
    additive speckle-like Gaussian noise; output stays clamped to [0, 1]."""
    image = _check_image(image)
    if policy is None:
        policy = ssl_policy((image.shape[0], image.shape[1]))
    out, _ = random_resized_crop(image, policy.crop_area_range,
                                 policy.aspect_range, policy.target_size, rng)
    if rng.uniform() < policy.hflip_prob:
        out = hflip(out)
    if policy.jitter > 0:
        contrast = 1.0 + rng.uniform(-policy.jitter, policy.jitter)
        brightness = rng.uniform(-policy.jitter, policy.jitter)
        mean = out.mean()
        out = (out - mean) * contrast + mean + brightness
        out = np.clip(out, 0.0, 1.0)
    if policy.noise_std > 0:
        out = out + rng.normal(0.0, policy.noise_std, out.shape)
        out = np.clip(out, 0.0, 1.0)
    return out


def supervised_augment(image, rng, policy=None):
    """Translate then rotate then flip, edge padded, then resize to target."""
    image = _check_image(image)
    if policy is None:
        policy = supervised_policy((image.shape[0], image.shape[1]))
    h, w = image.shape
    if policy.max_translation_frac > 0:
        dy = rng.uniform(-policy.max_translation_frac, policy.max_translation_frac) * h
        dx = rng.uniform(-policy.max_translation_frac, policy.max_translation_frac) * w
        image = translate(image, dy, dx)
    if policy.max_rotation_deg > 0:
        image = rotate(image, rng.uniform(-policy.max_rotation_deg,
                                          policy.max_rotation_deg))
    if rng.uniform() < policy.hflip_prob:
        image = hflip(image)
    return resize(image, policy.target_size)


def eval_transform(image, target_size):
    """Deterministic evaluation-time transform: plain resize."""
    return resize(image, target_size)


# ---------------------------------------------------------------------------
# Histogram diagnostics
# ---------------------------------------------------------------------------

def histogram(image, bins):
    """Counts over equal-width bins on [0, 1]; sums to the pixel count."""
    if bins < 2:
        raise ValidationError(f"bins must be >= 2, got {bins}")
    image = _check_image(image)
    counts, _ = np.histogram(image, bins=bins, range=(0.0, 1.0))
    return counts


def chi2_distance(h1, h2):
    """Symmetric chi-squared distance between two count histograms."""
    a = np.asarray(h1, dtype=np.float64)
    b = np.asarray(h2, dtype=np.float64)
    denom = a + b
    mask = denom > 0
    return float(0.5 * np.sum((a[mask] - b[mask]) ** 2 / denom[mask]))


# ---------------------------------------------------------------------------
# Scan loading pipelines
# ---------------------------------------------------------------------------

class ScanLoader:
    """Reads a PGM, estimates the layer contour, flattens; caches by path."""

    def __init__(self, pre_crop_rows: Optional[tuple] = None, max_cache=8192):
        self.pre_crop_rows = pre_crop_rows
        self._cache = {}
        self._max_cache = max_cache

    def __call__(self, path):
        key = str(path)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        image = imageio.read_pgm(path)
        image = flatten(image, estimate_contour(image))
        if self.pre_crop_rows is not None:
            top, bottom = self.pre_crop_rows
            image = image[top:bottom]
        if len(self._cache) < self._max_cache:
            self._cache[key] = image
        return image


def make_pair_augmenter(policy, loader=None):
    """An augmenter(path, rng) for the pair sampler: load, flatten, SSL-augment."""
    policy.validate()
    loader = loader or ScanLoader()
    def augmenter(path, rng):
        return ssl_augment(loader(path), rng, policy)
    return augmenter
