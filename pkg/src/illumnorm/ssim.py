"""Windowed SSIM and the reconstruction distance ``1 - SSIM``.

Images are ``(H, W, C)`` arrays/tensors for the single-image functions and
``(B, C, H, W)`` tensors for the batched ones used during training.  Only the
valid region is evaluated (no padding), so every window lies inside the image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


class SsimConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SsimConfig:
    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window_size < 3 or self.window_size % 2 == 0:
            raise SsimConfigError(f"window_size must be odd and >= 3, got {self.window_size}")
        if not self.sigma > 0:
            raise SsimConfigError(f"sigma must be positive, got {self.sigma}")
        for name in ("k1", "k2"):
            k = getattr(self, name)
            if not 0 < k < 1:
                raise SsimConfigError(f"{name} must lie in (0, 1), got {k}")
        if not self.dynamic_range > 0:
            raise SsimConfigError(f"dynamic_range must be positive, got {self.dynamic_range}")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


DEFAULT_SSIM = SsimConfig()


def gaussian_window(config: SsimConfig = DEFAULT_SSIM) -> np.ndarray:
    """Normalized 2-D Gaussian kernel of shape ``(window_size, window_size)``."""
    half = config.window_size // 2
    coords = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(coords**2) / (2.0 * config.sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x))


def _check_pair(a: torch.Tensor, b: torch.Tensor, config: SsimConfig) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    h, w = a.shape[-2:]
    if h < config.window_size or w < config.window_size:
        raise ValueError(
            f"image {h}x{w} is smaller than the {config.window_size}x{config.window_size} window"
        )


def ssim_map(a: torch.Tensor, b: torch.Tensor, config: SsimConfig = DEFAULT_SSIM) -> torch.Tensor:
    """Per-window SSIM for ``(B, C, H, W)`` tensors, shape ``(B, C, H-w+1, W-w+1)``."""
    _check_pair(a, b, config)
    if a.dtype != b.dtype:
        b = b.to(a.dtype)
    channels = a.shape[1]
    kernel = torch.as_tensor(gaussian_window(config), dtype=a.dtype, device=a.device)
    kernel = kernel.expand(channels, 1, -1, -1)

    def filt(t):
        return F.conv2d(t, kernel, groups=channels)

    mu_a = filt(a)
    mu_b = filt(b)
    mu_aa = mu_a * mu_a
    mu_bb = mu_b * mu_b
    mu_ab = mu_a * mu_b
    var_a = filt(a * a) - mu_aa
    var_b = filt(b * b) - mu_bb
    cov = filt(a * b) - mu_ab
    c1, c2 = config.c1, config.c2
    luminance = (2 * mu_ab + c1) / (mu_aa + mu_bb + c1)
    structure = (2 * cov + c2) / (var_a + var_b + c2)
    return luminance * structure


def ssim_per_image(a: torch.Tensor, b: torch.Tensor, config: SsimConfig = DEFAULT_SSIM) -> torch.Tensor:
    """Mean SSIM per batch element (channels averaged), shape ``(B,)``."""
    return ssim_map(a, b, config).mean(dim=(1, 2, 3))


def _hwc_to_batch(x: torch.Tensor) -> torch.Tensor:
    if x.ndim == 2:
        x = x.unsqueeze(-1)
    if x.ndim != 3:
        raise ValueError(f"expected an (H, W, C) image, got shape {tuple(x.shape)}")
    return x.permute(2, 0, 1).unsqueeze(0)


def ssim(a, b, config: SsimConfig = DEFAULT_SSIM):
    """SSIM of two ``(H, W, C)`` (or ``(H, W)``) images.

    Returns a python float for numpy inputs and a 0-d tensor (differentiable)
    for tensor inputs.
    """
    is_tensor = isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor)
    ta, tb = _as_tensor(a), _as_tensor(b)
    if ta.shape != tb.shape:
        raise ValueError(f"shape mismatch: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    if not ta.is_floating_point():
        ta = ta.double()
    value = ssim_per_image(_hwc_to_batch(ta), _hwc_to_batch(tb), config)[0]
    return value if is_tensor else float(value)


def recon_distance(a, b, config: SsimConfig = DEFAULT_SSIM):
    """``1 - SSIM(a, b)``, in ``[0, 2]``."""
    return 1 - ssim(a, b, config)
