"""Pseudo-attention masks: candidate extraction, distance transform, soft masks.

Candidate masks come from plain signal processing (Sobel edges plus local
adaptive thresholds, cleaned with morphology). The distance transform is the
exact two-pass Felzenszwalb-Huttenlocher algorithm; soft masks are a Gaussian
of that distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy import ndimage

DEFAULT_SIGMA = 6.0


@dataclass(frozen=True)
class CandidateParams:
    """Parameters for :func:`candidate_mask`.

    ``c`` is an offset in normalized-pixel units added to the local mean.
    """

    k: int = 31
    c: float = 2.0
    closing_iterations: int = 2
    min_area: int = 20

    def __post_init__(self):
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError("window size k must be a positive odd integer")
        if self.closing_iterations < 0 or self.min_area < 0:
            raise ValueError("closing_iterations and min_area must be non-negative")


@dataclass
class SoftMask:
    pixels: np.ndarray
    sigma: float
    empty: bool = False


def _pixels(spec) -> np.ndarray:
    px = getattr(spec, "pixels", spec)
    px = np.asarray(px, dtype=np.float64)
    if px.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {px.shape}")
    if not np.isfinite(px).all():
        raise ValueError("spectrogram contains non-finite values")
    return px


def sobel_magnitude(img: np.ndarray) -> np.ndarray:
    gx = ndimage.sobel(img, axis=1, mode="nearest")
    gy = ndimage.sobel(img, axis=0, mode="nearest")
    return np.hypot(gx, gy)


def adaptive_threshold(img: np.ndarray, k: int, c: float) -> np.ndarray:
    """True where a pixel exceeds its k×k local mean by more than ``c``."""
    local = ndimage.uniform_filter(img, size=k, mode="reflect")
    return img > local + c


def closing(mask: np.ndarray, iterations: int) -> np.ndarray:
    """3×3 closing repeated ``iterations`` times (dilations then erosions).

    The erosion treats the outside of the image as foreground so that it is the
    exact adjoint of the dilation; the result is then a true closing
    (extensive and idempotent) even at the borders.
    """
    m = np.asarray(mask, dtype=bool)
    if iterations == 0:
        return m.copy()
    s = np.ones((3, 3), dtype=bool)
    d = ndimage.binary_dilation(m, structure=s, iterations=iterations, border_value=0)
    return ndimage.binary_erosion(d, structure=s, iterations=iterations, border_value=1)


def remove_small(mask: np.ndarray, min_area: int) -> np.ndarray:
    lab, n = ndimage.label(mask, structure=np.ones((3, 3)))
    if n == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(lab.ravel())
    keep = sizes >= min_area
    keep[0] = False
    return keep[lab]


def candidate_mask(spec, params: CandidateParams = CandidateParams()) -> np.ndarray:
    """Automatic binary mask of likely patterns in a normalized spectrogram."""
    img = _pixels(spec)
    edges = adaptive_threshold(sobel_magnitude(img), params.k, params.c)
    bright = adaptive_threshold(img, params.k, params.c)
    m = closing(edges | bright, params.closing_iterations)
    return remove_small(m, params.min_area).astype(np.uint8)


# -- exact Euclidean distance transform -------------------------------------------

@numba.njit(cache=True)
def _edt_1d(f, out, v, z):
    """Lower envelope of parabolas; squared distances of a sampled function ``f``."""
    n = f.shape[0]
    k = 0
    v[0] = 0
    z[0] = -np.inf
    z[1] = np.inf
    for q in range(1, n):
        if f[q] == np.inf:
            continue
        if f[v[k]] == np.inf:
            # envelope holds only an infinite parabola so far; replace it
            v[k] = q
            continue
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d = q - v[k]
        out[q] = d * d + f[v[k]]


@numba.njit(cache=True)
def _edt_squared(fg):
    h, w = fg.shape
    n = max(h, w)
    f = np.empty(n)
    out = np.empty(n)
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1)
    g = np.empty((h, w))
    for x in range(w):
        for y in range(h):
            f[y] = 0.0 if fg[y, x] else np.inf
        _edt_1d(f[:h], out[:h], v, z)
        for y in range(h):
            g[y, x] = out[y]
    for y in range(h):
        for x in range(w):
            f[x] = g[y, x]
        _edt_1d(f[:w], out[:w], v, z)
        for x in range(w):
            g[y, x] = out[x]
    return g


def distance_transform(mask) -> np.ndarray:
    """Euclidean distance from each pixel to the nearest foreground pixel.

    An all-background mask yields ``+inf`` everywhere.
    """
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D mask, got shape {m.shape}")
    if m.size == 0:
        return np.zeros(m.shape)
    fg = m.astype(bool)
    if not fg.any():
        return np.full(m.shape, np.inf)
    return np.sqrt(_edt_squared(np.ascontiguousarray(fg)))


def soft_mask(d, sigma: float = DEFAULT_SIGMA) -> SoftMask:
    """Gaussian relaxation ``exp(-d² / 2σ²)`` of a distance map.

    An all-infinite distance map (no foreground) gives an all-zero mask with
    ``empty=True``.
    """
    if not (isinstance(sigma, (int, float, np.floating)) and math.isfinite(sigma) and sigma > 0):
        raise ValueError(f"sigma must be a positive finite number, got {sigma}")
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0) or np.any(np.isnan(d)):
        raise ValueError("distance map must be non-negative")
    if d.size and np.isinf(d).all():
        return SoftMask(np.zeros(d.shape), float(sigma), empty=True)
    return SoftMask(np.exp(-(d * d) / (2.0 * sigma * sigma)), float(sigma))


def soften(mask, sigma: float = DEFAULT_SIGMA) -> SoftMask:
    return soft_mask(distance_transform(mask), sigma)


def soften_batch(masks: np.ndarray, sigma: float | None) -> np.ndarray:
    """Soft masks for a stack of binary masks; ``sigma=None`` returns them as floats."""
    masks = np.asarray(masks)
    if sigma is None:
        return masks.astype(np.float64)
    return np.stack([soften(m, sigma).pixels for m in masks]) if len(masks) else masks.astype(np.float64)


def hflip(img: np.ndarray) -> np.ndarray:
    """Reverse the column (time) order of an image or a stack of images."""
    return np.ascontiguousarray(np.asarray(img)[..., ::-1])
