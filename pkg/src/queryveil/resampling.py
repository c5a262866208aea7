"""Resolution handling: bilinear resampling and Gaussian prefiltering.

Every function has a tensor core (differentiable, (3, H, W) tensors) used on
the optimization path, and an `Image` wrapper with validation. Bilinear
resampling uses half-pixel sample centers without corner alignment; different
bilinear conventions give different descriptors, which is exactly why the
blurred variant exists (high frequencies are removed before down-sampling).
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from .errors import InvalidResolutionError
from .image import Image, from_tensor, to_tensor

MIN_RESOLUTION = 32

# sigma_b for blur-then-downsample from (W, H) to max-dim s
BLUR_SIGMA_FACTOR = 0.3


def target_size(height: int, width: int, s: int) -> tuple[int, int]:
    """New (height, width) with max dim == s, aspect kept up to rounding."""
    if width >= height:
        return max(1, round(height * s / width)), s
    return s, max(1, round(width * s / height))


def resample_tensor(x: torch.Tensor, s: int) -> torch.Tensor:
    if s < MIN_RESOLUTION:
        raise InvalidResolutionError(
            f"resolution {s} below minimum {MIN_RESOLUTION}"
        )
    h, w = x.shape[-2], x.shape[-1]
    nh, nw = target_size(h, w, s)
    if (nh, nw) == (h, w):
        return x
    y = F.interpolate(
        x.unsqueeze(0), size=(nh, nw), mode="bilinear",
        align_corners=False, antialias=False,
    ).squeeze(0)
    return y.clamp(0.0, 1.0)


def blur_sigma(height: int, width: int, s: int) -> float:
    return BLUR_SIGMA_FACTOR * max(height, width) / s


def gaussian_kernel1d(sigma: float, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Normalized 1-D Gaussian, truncated at 4 sigma."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = max(1, int(math.ceil(4.0 * sigma)))
    xs = torch.arange(-radius, radius + 1, dtype=dtype)
    k = torch.exp(-(xs**2) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur_tensor(x: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian filtering with reflect padding."""
    k = gaussian_kernel1d(sigma, dtype=x.dtype)
    r = (k.numel() - 1) // 2
    c = x.shape[0]
    y = x.unsqueeze(0)
    # reflect padding needs pad < dim; fall back to replicate rims on tiny images
    pad_mode = "reflect" if r < min(x.shape[-2], x.shape[-1]) else "replicate"
    y = F.pad(y, (r, r, 0, 0), mode=pad_mode)
    y = F.conv2d(y, k.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    y = F.pad(y, (0, 0, r, r), mode=pad_mode)
    y = F.conv2d(y, k.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)
    return y.squeeze(0).clamp(0.0, 1.0)


def blur_resample_tensor(x: torch.Tensor, s: int) -> torch.Tensor:
    """Gaussian prefilter at the source resolution, then downsample to s."""
    if s < MIN_RESOLUTION:
        raise InvalidResolutionError(
            f"resolution {s} below minimum {MIN_RESOLUTION}"
        )
    sigma = blur_sigma(x.shape[-2], x.shape[-1], s)
    return resample_tensor(gaussian_blur_tensor(x, sigma), s)


def resample(image: Image, s: int) -> Image:
    """Resample so the largest dimension equals s (bilinear)."""
    return from_tensor(resample_tensor(to_tensor(image), s), id=image.id)


def gaussian_blur(image: Image, sigma_b: float) -> Image:
    return from_tensor(gaussian_blur_tensor(to_tensor(image), sigma_b), id=image.id)


def blur_resample(image: Image, s: int) -> Image:
    return from_tensor(blur_resample_tensor(to_tensor(image), s), id=image.id)
