"""Latent image preprocessing: segmentation, ridge enhancement, model input.

Images are plain 2-D numpy arrays with intensities in [0, 255]. Masks are
boolean arrays of the same shape. Angles follow array coordinates: a ridge
angle ``theta`` is the direction ``(cos theta, sin theta)`` in (column, row)
space, folded into [0, pi).

Pipeline order: segment -> largest_component -> apply mask -> orientation
-> gabor_enhance -> normalize -> adaptive_threshold -> to_model_input.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage
from scipy.signal import fftconvolve

from .config import PreprocessConfig
from .errors import ConfigError, EmptySegmentationError, ImageError

MIN_SIDE = 32
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class OrientationField:
    theta: np.ndarray  # (rows, cols) of blocks, radians in [0, pi)
    coherence: np.ndarray  # same shape, in [0, 1]
    block_size: int

    def upsample(self, shape: tuple[int, int]) -> np.ndarray:
        """Per-pixel angle map by nearest-block lookup."""
        rows = np.minimum(np.arange(shape[0]) // self.block_size, self.theta.shape[0] - 1)
        cols = np.minimum(np.arange(shape[1]) // self.block_size, self.theta.shape[1] - 1)
        return self.theta[np.ix_(rows, cols)]


def check_image(img) -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ImageError(f"expected a 2-D grayscale image, got shape {arr.shape}")
    if arr.shape[0] < MIN_SIDE or arr.shape[1] < MIN_SIDE:
        raise ImageError(f"image {arr.shape} smaller than {MIN_SIDE}x{MIN_SIDE}")
    if arr.size and (np.nanmin(arr) < 0 or np.nanmax(arr) > 255 or not np.isfinite(arr).all()):
        raise ImageError("pixel values must lie in [0, 255]")
    return arr


def _check_mask(mask, shape) -> np.ndarray:
    m = np.asarray(mask)
    if m.shape != tuple(shape):
        raise ConfigError(f"mask shape {m.shape} does not match image shape {tuple(shape)}")
    return m.astype(bool)


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I", "F"):
            raise ImageError(f"{path}: expected an 8-bit image, got mode {im.mode}")
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    return check_image(arr)


def load_mask(path: str | Path, shape: tuple[int, int] | None = None) -> np.ndarray:
    with Image.open(path) as im:
        m = np.asarray(im.convert("L")) != 0
    if shape is not None:
        m = _check_mask(m, shape)
    return m


def save_image(path: str | Path, img: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(img, dtype=np.float64)), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def _block_grid(shape, block_size):
    return math.ceil(shape[0] / block_size), math.ceil(shape[1] / block_size)


def _block_reduce(arr: np.ndarray, block_size: int, func=np.mean) -> np.ndarray:
    """Reduce non-overlapping blocks; partial edge blocks use only their real pixels."""
    nby, nbx = _block_grid(arr.shape, block_size)
    out = np.empty((nby, nbx), dtype=np.float64)
    for by in range(nby):
        for bx in range(nbx):
            out[by, bx] = func(arr[by * block_size:(by + 1) * block_size, bx * block_size:(bx + 1) * block_size])
    return out


def _expand_blocks(blocks: np.ndarray, block_size: int, shape) -> np.ndarray:
    full = np.repeat(np.repeat(blocks, block_size, axis=0), block_size, axis=1)
    return full[: shape[0], : shape[1]]


# ---------------------------------------------------------------------------
# segmentation

def segment(img, external_mask=None, block_size: int = 16, variance_threshold: float = 0.1) -> np.ndarray:
    """Foreground mask: the external mask if given, else block-variance thresholding.

    A block is foreground when its intensity variance exceeds
    ``variance_threshold`` times the global image variance.
    """
    img = check_image(img)
    if external_mask is not None:
        return _check_mask(external_mask, img.shape)
    data = img.astype(np.float64)
    cutoff = variance_threshold * data.var()
    block_var = _block_reduce(data, block_size, np.var)
    return _expand_blocks(block_var > cutoff, block_size, img.shape)


def largest_component(mask) -> np.ndarray:
    """Keep the largest 4-connected true region.

    Ties go to the component whose first pixel comes earliest in row-major
    order; ``ndimage.label`` numbers components in exactly that order.
    """
    m = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(m, structure=FOUR_CONNECTED)
    if n == 0:
        raise EmptySegmentationError("segmentation mask has no foreground pixels")
    sizes = np.bincount(labels.ravel())[1:]
    keep = int(np.argmax(sizes)) + 1
    return labels == keep


# ---------------------------------------------------------------------------
# orientation

def estimate_orientation(img, mask=None, block_size: int = 16) -> OrientationField:
    """Blockwise ridge orientation from the smoothed gradient structure tensor."""
    if block_size < 4:
        raise ConfigError("block_size must be >= 4")
    img = check_image(img)
    data = img.astype(np.float64)
    mask = np.ones(data.shape, bool) if mask is None else _check_mask(mask, data.shape)

    gx = ndimage.sobel(data, axis=1, mode="reflect")
    gy = ndimage.sobel(data, axis=0, mode="reflect")
    sigma = block_size / 2.0
    gxx = ndimage.gaussian_filter(gx * gx, sigma, mode="reflect")
    gyy = ndimage.gaussian_filter(gy * gy, sigma, mode="reflect")
    gxy = ndimage.gaussian_filter(gx * gy, sigma, mode="reflect")

    bxx = _block_reduce(gxx, block_size)
    byy = _block_reduce(gyy, block_size)
    bxy = _block_reduce(gxy, block_size)

    # gradient direction is normal to the ridges
    normal = 0.5 * np.arctan2(2.0 * bxy, bxx - byy)
    theta = np.mod(normal + np.pi / 2.0, np.pi)
    trace = bxx + byy
    gap = np.sqrt((bxx - byy) ** 2 + 4.0 * bxy ** 2)
    scale = max(float(trace.max(initial=0.0)), 1e-300)
    degenerate = trace <= 1e-12 * scale
    coherence = np.where(degenerate, 0.0, gap / np.where(degenerate, 1.0, trace))
    coherence = np.clip(coherence, 0.0, 1.0)

    foreground = _block_reduce(mask.astype(np.float64), block_size) >= 0.5
    off = degenerate | ~foreground
    theta = np.where(off, 0.0, theta)
    coherence = np.where(off, 0.0, coherence)
    # folding can land exactly on pi after rounding
    theta = np.where(theta >= np.pi, 0.0, theta)
    return OrientationField(theta=theta, coherence=coherence, block_size=block_size)


# ---------------------------------------------------------------------------
# Gabor enhancement

def gabor_kernel(theta: float, frequency: float, sigma: float | None = None) -> np.ndarray:
    """Even-symmetric, zero-mean Gabor kernel for ridges running along ``theta``."""
    if frequency <= 0:
        raise ConfigError("frequency must be positive")
    if sigma is None:
        sigma = 0.5 / frequency
    radius = int(math.ceil(3.0 * sigma))
    y, x = np.mgrid[-radius:radius + 1, -radius:radius + 1].astype(np.float64)
    across = -x * math.sin(theta) + y * math.cos(theta)
    kern = np.exp(-(x * x + y * y) / (2.0 * sigma * sigma)) * np.cos(2.0 * math.pi * frequency * across)
    return kern - kern.mean()


def gabor_response(img, field: OrientationField, frequency: float, mask=None) -> np.ndarray:
    """Raw (unscaled) blockwise Gabor response; zero outside the mask."""
    img = check_image(img)
    data = img.astype(np.float64)
    mask = np.ones(data.shape, bool) if mask is None else _check_mask(mask, data.shape)
    bs = field.block_size
    if field.theta.shape != _block_grid(data.shape, bs):
        raise ConfigError(f"orientation field {field.theta.shape} does not cover image {data.shape}")

    cache: dict[float, np.ndarray] = {}
    radius = int(math.ceil(3.0 * 0.5 / frequency))
    padded = np.pad(data, radius, mode="reflect")
    out = np.zeros_like(data)
    nby, nbx = field.theta.shape
    for by in range(nby):
        y0, y1 = by * bs, min((by + 1) * bs, data.shape[0])
        for bx in range(nbx):
            x0, x1 = bx * bs, min((bx + 1) * bs, data.shape[1])
            if not mask[y0:y1, x0:x1].any():
                continue
            t = float(field.theta[by, bx])
            kern = cache.get(t)
            if kern is None:
                kern = cache[t] = gabor_kernel(t, frequency)
            patch = padded[y0:y1 + 2 * radius, x0:x1 + 2 * radius]
            # kernel is point-symmetric, so convolution equals correlation
            out[y0:y1, x0:x1] = fftconvolve(patch, kern, mode="valid")
    out[~mask] = 0.0
    return out


def _rescale(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    out = np.zeros_like(values, dtype=np.float64)
    if not mask.any():
        return out
    fg = values[mask]
    lo, hi = fg.min(), fg.max()
    if hi - lo <= 1e-9 * max(1.0, np.abs(fg).max()):
        return out
    out[mask] = (fg - lo) * (255.0 / (hi - lo))
    return out


def gabor_enhance(img, field: OrientationField, frequency: float = 1.0 / 9.0, mask=None) -> np.ndarray:
    """Orientation-tuned Gabor filtering, min-max rescaled to [0, 255] over the foreground."""
    img = check_image(img)
    mask = np.ones(img.shape, bool) if mask is None else _check_mask(mask, img.shape)
    return _rescale(gabor_response(img, field, frequency, mask), mask)


# ---------------------------------------------------------------------------
# contrast

def normalize(img, target_mean: float = 128.0, target_var: float = 2500.0, mask=None) -> np.ndarray:
    """Mean/variance normalization over foreground pixels, clipped to [0, 255].

    Background pixels (outside ``mask``) are left untouched.
    """
    data = np.asarray(img, dtype=np.float64)
    if data.size == 0:
        raise ImageError("empty image")
    mask = np.ones(data.shape, bool) if mask is None else _check_mask(mask, data.shape)
    out = data.copy()
    if not mask.any():
        return out
    fg = data[mask]
    mean, var = fg.mean(), fg.var()
    if var <= 0:
        out[mask] = target_mean
    else:
        out[mask] = target_mean + (fg - mean) * math.sqrt(target_var / var)
    return np.clip(out, 0.0, 255.0)


def adaptive_threshold(img, window: int = 15, offset: float = 2.0) -> np.ndarray:
    """Binarize against the local window mean minus ``offset``: below -> 0, else 255."""
    if window < 3 or window % 2 == 0:
        raise ConfigError("window must be odd and >= 3")
    data = np.asarray(img, dtype=np.float64)
    local = ndimage.uniform_filter(data, size=window, mode="reflect")
    return np.where(data < local - offset, 0.0, 255.0)


# ---------------------------------------------------------------------------
# model input

def to_model_input(img, size: int = 224) -> torch.Tensor:
    """Bilinear resize to ``size``x``size``, map [0,255] to [-1,1], replicate to 3 channels."""
    data = np.asarray(img, dtype=np.float32)
    if data.ndim != 2 or data.size == 0:
        raise ImageError(f"expected a nonempty 2-D image, got shape {data.shape}")
    t = torch.from_numpy(np.ascontiguousarray(data))[None, None]
    t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False, antialias=False)
    t = (t / 255.0 - 0.5) / 0.5
    t = t.clamp_(-1.0, 1.0)
    return t[0].expand(3, size, size).contiguous()


def enhance(img, cfg: PreprocessConfig = PreprocessConfig(), external_mask=None) -> np.ndarray:
    """Run every stage up to (not including) ``to_model_input``; returns uint8."""
    img = check_image(img)
    raw = segment(img, external_mask, cfg.block_size, cfg.variance_threshold)
    mask = largest_component(raw)
    masked = np.where(mask, img.astype(np.float64), 0.0)
    field = estimate_orientation(masked, mask, cfg.block_size)
    enhanced = gabor_enhance(masked, field, cfg.gabor_frequency, mask)
    normed = normalize(enhanced, cfg.target_mean, cfg.target_var, mask)
    binary = adaptive_threshold(normed, cfg.threshold_window, cfg.threshold_offset)
    # thresholding turns flat background white; keep it suppressed
    binary[~mask] = 0.0
    return binary.astype(np.uint8)


def preprocess(img, cfg: PreprocessConfig = PreprocessConfig(), external_mask=None) -> torch.Tensor:
    return to_model_input(enhance(img, cfg, external_mask), cfg.input_size)
