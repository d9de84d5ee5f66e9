"""Image denoising with a trained pair, plus PSNR/SSIM quality metrics.

Every patch on the stride grid of the noisy image is sparse-coded with an
error-driven stop (target residual ``epsilon_gain * sigma * m`` for m x m
patches, hard cap on the triplet count), the reconstructions are averaged
per pixel over the overlapping estimates, and the result is clamped to
[0, 255].  No blending with the noisy input is applied unless requested.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import correlate1d

from .coding import ErrorDriven, omp2d_batch
from .data import ImageTooSmall, extract_patches
from .linalg import ShapeMismatch
from .update import DictionaryPair

PSNR_CAP_DB = 999.0
_CODING_CHUNK = 16384


class TooSmall(ValueError):
    """Image smaller than the SSIM window."""


@dataclass(frozen=True)
class DenoiseConfig:
    """Denoising parameters.

    ``s_cap`` defaults to half the patch pixel count, resolved against
    the dictionary's patch side when the run starts.
    """

    sigma: float
    epsilon_gain: float = 1.15
    s_cap: Optional[int] = None
    stride: int = 1
    blend_weight: float = 0.0  # optional convex blend with the noisy input

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.s_cap is not None and self.s_cap < 1:
            raise ValueError("s_cap must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if not 0.0 <= self.blend_weight < 1.0:
            raise ValueError("blend_weight must be in [0, 1)")

    def resolve_s_cap(self, m: int) -> int:
        return self.s_cap if self.s_cap is not None else max(1, (m * m) // 2)


@dataclass
class DenoiseResult:
    image: np.ndarray
    patches_coded: int
    mean_triplets: float
    epsilon: float
    s_cap: int


def denoise_image(noisy, pair: DictionaryPair, cfg: DenoiseConfig) -> DenoiseResult:
    """Denoise a grayscale image; see the module docstring."""
    img = np.asarray(noisy, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeMismatch(f"image must be 2-D, got shape {img.shape}")
    m = pair.m
    h, w = img.shape
    if m > min(h, w):
        raise ImageTooSmall(f"{h}x{w} image cannot hold {m}x{m} patches")
    stride = min(cfg.stride, m)
    eps = cfg.epsilon_gain * cfg.sigma * m  # sqrt of the patch pixel count
    s_cap = cfg.resolve_s_cap(m)
    stop = ErrorDriven(eps, s_cap)

    patches = extract_patches(img, m, stride).patches
    grid_h = (h - m) // stride + 1
    grid_w = (w - m) // stride + 1

    recon = np.empty_like(patches)
    triplets = 0
    for lo in range(0, patches.shape[0], _CODING_CHUNK):
        hi = min(lo + _CODING_CHUNK, patches.shape[0])
        codes = omp2d_batch(patches[lo:hi], pair, stop)
        triplets += int(codes.counts.sum())
        recon[lo:hi] = np.matmul(np.matmul(pair.left, codes.to_dense()), pair.right.T)
    out = _overlap_average(recon.reshape(grid_h, grid_w, m, m), h, w, stride)
    if cfg.blend_weight > 0.0:
        out = cfg.blend_weight * img + (1.0 - cfg.blend_weight) * out
    np.clip(out, 0.0, 255.0, out=out)
    return DenoiseResult(out, patches.shape[0], triplets / patches.shape[0], eps, s_cap)


def _overlap_average(recon4, h, w, stride):
    """Average the overlapping patch estimates per pixel.

    Accumulates in a fixed (row offset, column offset) order so results
    do not depend on chunking or thread counts.
    """
    grid_h, grid_w, m, _ = recon4.shape
    accum = np.zeros((h, w))
    weight = np.zeros((h, w))
    for di in range(m):
        for dj in range(m):
            rows = slice(di, di + stride * (grid_h - 1) + 1, stride)
            cols = slice(dj, dj + stride * (grid_w - 1) + 1, stride)
            accum[rows, cols] += recon4[:, :, di, dj]
            weight[rows, cols] += 1.0
    covered = weight > 0
    accum[covered] /= weight[covered]
    return accum


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB against a 255 peak."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeMismatch(f"images differ in shape: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(255.0 ** 2 / mse), PSNR_CAP_DB))


_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_K1, _K2 = 0.01, 0.03
_DYNAMIC_RANGE = 255.0


def _ssim_kernel() -> np.ndarray:
    half = (_SSIM_WINDOW - 1) / 2.0
    x = np.arange(_SSIM_WINDOW) - half
    g = np.exp(-(x * x) / (2.0 * _SSIM_SIGMA ** 2))
    return g / g.sum()


def _windowed_mean(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    pad = _SSIM_WINDOW // 2
    smoothed = correlate1d(correlate1d(img, g, axis=0, mode="constant"),
                           g, axis=1, mode="constant")
    return smoothed[pad:-pad, pad:-pad]


def ssim(a, b) -> float:
    """Mean structural similarity with the reference 11x11 Gaussian window
    (sigma 1.5), K1=0.01, K2=0.03, dynamic range 255."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeMismatch(f"images differ in shape: {x.shape} vs {y.shape}")
    if x.ndim != 2 or min(x.shape) < _SSIM_WINDOW:
        raise TooSmall(f"ssim needs at least {_SSIM_WINDOW}x{_SSIM_WINDOW} images")
    g = _ssim_kernel()
    mu_x = _windowed_mean(x, g)
    mu_y = _windowed_mean(y, g)
    var_x = _windowed_mean(x * x, g) - mu_x * mu_x
    var_y = _windowed_mean(y * y, g) - mu_y * mu_y
    cov = _windowed_mean(x * y, g) - mu_x * mu_y
    c1 = (_K1 * _DYNAMIC_RANGE) ** 2
    c2 = (_K2 * _DYNAMIC_RANGE) ** 2
    score = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    )
    return float(score.mean())
